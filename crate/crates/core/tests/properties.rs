use cxrnet_core::data::{split, DatasetIndex, Sample, SplitRatios};
use cxrnet_core::eval::{argmax, confusion, summarize};
use cxrnet_core::tensor::{bilinear_resize, relu, softmax};
use cxrnet_core::Tensor;
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-50.0f32..50.0, 1..12)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in logits()) {
        let p = softmax(&Tensor::vector(z));
        let sum: f64 = p.data().iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_shift_invariant(z in logits(), c in -20.0f32..20.0) {
        let a = softmax(&Tensor::vector(z.clone()));
        let b = softmax(&Tensor::vector(z.iter().map(|v| v + c).collect()));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn relu_nonnegative_idempotent(z in logits()) {
        let t = Tensor::vector(z);
        let once = relu(&t);
        prop_assert!(once.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(relu(&once), once);
    }

    #[test]
    fn argmax_matches_scan(z in logits()) {
        let best = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let first = z.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(argmax(&z), first);
    }

    #[test]
    fn resize_keeps_constants(v in -3.0f32..3.0, h in 1usize..9, w in 1usize..9, oh in 1usize..20, ow in 1usize..20) {
        let img = Tensor::full(&[2, h, w], v);
        let out = bilinear_resize(&img, oh, ow).unwrap();
        prop_assert_eq!(out.shape(), &[2, oh, ow]);
        prop_assert!(out.data().iter().all(|&x| x == v));
    }

    #[test]
    fn confusion_accuracy_and_order(pairs in prop::collection::vec((0usize..3, 0usize..3), 0..200), seed in any::<u64>()) {
        let m = confusion(pairs.iter().cloned(), 3).unwrap();
        let s = summarize(&m);
        prop_assert_eq!(m.total() as usize, pairs.len());
        if !pairs.is_empty() {
            prop_assert_eq!(s.accuracy, m.trace() as f64 / m.total() as f64);
        }
        for (i, r) in s.recalls.iter().enumerate() {
            prop_assert_eq!(r.is_none(), m.row_sum(i) == 0);
        }
        let mut shuffled = pairs.clone();
        let n = shuffled.len();
        for i in 0..n {
            let j = (seed.wrapping_mul(i as u64 + 1) >> 7) as usize % n;
            shuffled.swap(i, j);
        }
        prop_assert_eq!(confusion(shuffled, 3).unwrap(), m);
    }

    #[test]
    fn split_partitions_and_stratifies(
        counts in prop::collection::vec(3usize..60, 3),
        val in 0.0f64..0.3,
        test in 0.0f64..0.3,
        seed in any::<u64>(),
    ) {
        let mut samples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample { path: format!("{label}/{i:03}"), label, source: "s".into() });
            }
        }
        let index = DatasetIndex::new(samples, 3).unwrap();
        let ratios = SplitRatios::new(1.0 - val - test, val, test).unwrap();
        let s = split(&index, ratios, seed).unwrap();

        let mut all: Vec<&str> = s.train.iter().chain(&s.val).chain(&s.test).map(|x| x.path.as_str()).collect();
        all.sort_unstable();
        let expected: Vec<&str> = index.samples().iter().map(|x| x.path.as_str()).collect();
        prop_assert_eq!(all, expected);

        for (label, &n) in counts.iter().enumerate() {
            let count = |part: &[Sample]| part.iter().filter(|x| x.label == label).count() as f64;
            prop_assert!((count(&s.val) - n as f64 * val).abs() <= 1.0);
            prop_assert!((count(&s.test) - n as f64 * test).abs() <= 1.0);
        }
        prop_assert_eq!(split(&index, ratios, seed).unwrap(), s);
    }
}

#[test]
fn argmax_agrees_with_scan_on_1000_vectors() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        // Coarse values so ties are common.
        let v: Vec<f32> = (0..3).map(|_| rng.random_range(0..4) as f32 / 4.0).collect();
        let mut best = 0;
        for i in 1..v.len() {
            if v[i] > v[best] {
                best = i;
            }
        }
        assert_eq!(argmax(&v), best, "{v:?}");
    }
}
