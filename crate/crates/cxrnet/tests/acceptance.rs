//! Acceptance gate: one PASS/FAIL line per criterion. Run with
//! `cargo test -p cxrnet --test acceptance`.

#[path = "../../core/tests/common/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cxrnet::container::{load_container, save_container};
use cxrnet::dataset::{preprocess_rgb, Normalization, SplitManifest};
use cxrnet::synth;
use cxrnet_core::data::one_hot;
use cxrnet_core::eval::EvalReport;
use cxrnet_core::gradcam::{grad_cam, grad_cam_from_activation};
use cxrnet_core::model::{build_vgg16, head_backward, head_forward, init_backbone, init_head, ModelSpec, VggConfig};
use cxrnet_core::tensor::{conv2d, dense_vjp, maxpool2d, maxpool2d_backward, softmax};
use cxrnet_core::train::{adam_step, ce_softmax_grad, train_head, AdamHyper, AdamState, MemorySource, TrainConfig};
use cxrnet_core::weights::WeightSet;
use cxrnet_core::Tensor;
use oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONV_CASES: usize = 200;
const CONV_MAX_ABS: f64 = 1e-5;
const CONV_BUDGET: Duration = Duration::from_secs(10);

const GRAD_CASES: u64 = 50;
const FD_STEP: f64 = 1e-3;
const GRAD_REL: f64 = 1e-2;
/// Relative errors are taken against `max(|a|, |b|, floor)`.
const GRAD_FLOOR: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(30);

const ADAM_TOL: f64 = 1e-7;
const ADAM_FIRST_STEP: f64 = -0.000_999_999_995_0;

const METRIC_ACC: f64 = 73.0 / 75.0;
const METRIC_ACC_TOL: f64 = 1e-6;
const METRIC_RECALLS: [f64; 3] = [1.0, 0.882, 1.0];
const METRIC_RECALL_TOL: f64 = 5e-4;

const OVERFIT_BUDGET: Duration = Duration::from_secs(120);

const E2E_COUNTS: &str = "175,100,100";
const E2E_MIN_ACC: f64 = 0.90;
const E2E_EPOCHS: usize = 80;
const E2E_BUDGET: Duration = Duration::from_secs(600);

const CAM_CASES: u64 = 50;
const CAM_EXACT_FACTORS: [f32; 4] = [2.0, 0.5, 4.0, 0.125];
const CAM_OTHER_FACTORS: [f32; 3] = [3.0, 1.7, 0.3];
const CAM_OTHER_TOL: f32 = 1e-5;
const CAM_BUDGET: Duration = Duration::from_secs(60);

type Check = Result<String, String>;

/// Name, optional time budget and the check itself.
type Criterion = (&'static str, Option<Duration>, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn conv_oracle() -> Check {
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    for _ in 0..CONV_CASES {
        let cin = r.random_range(1..=8);
        let cout = r.random_range(1..=8);
        let k = if r.random_bool(0.5) { 1 } else { 3 };
        let pad = r.random_range(0..=k / 2);
        let stride = r.random_range(1..=2);
        let h = r.random_range(k..=8);
        let w = r.random_range(k..=8);
        let x = random_tensor(&mut r, &[cin, h, w], 1.0);
        let kern = random_tensor(&mut r, &[cout, cin, k, k], 1.0);
        let b = random_tensor(&mut r, &[cout], 1.0);
        let out = conv2d(&x, &kern, &b, stride, pad).map_err(|e| e.to_string())?;
        let (shape, expected) = conv2d_direct(&x, &kern, &b, stride, pad);
        ensure(out.shape() == shape.as_slice(), || {
            format!("shape {:?} vs {shape:?}", out.shape())
        })?;
        for (a, e) in out.data().iter().zip(&expected) {
            worst = worst.max((*a as f64 - e).abs());
        }
    }
    ensure(worst <= CONV_MAX_ABS, || {
        format!("max abs diff {worst:.3e} > {CONV_MAX_ABS:e}")
    })?;
    Ok(format!("{CONV_CASES} cases, max abs diff {worst:.2e}"))
}

fn cam_spec() -> ModelSpec {
    VggConfig {
        input_side: 28,
        blocks: vec![
            cxrnet_core::model::VggBlock { convs: 1, channels: 2 },
            cxrnet_core::model::VggBlock { convs: 1, channels: 4 },
        ],
        hidden: 16,
        num_classes: 3,
    }
    .build()
    .expect("valid config")
}

fn random_head(spec: &ModelSpec, seed: u64) -> WeightSet {
    let mut head = init_head(spec, seed);
    let mut r = rng(seed ^ 0xb1a5);
    for p in spec.trainable_parameters().iter().filter(|p| p.shape.len() == 1) {
        head.insert(p.tensor.clone(), random_tensor(&mut r, &p.shape, 0.5))
            .expect("finite");
    }
    head
}

fn random_activation(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.0f32..2.0)).collect()).expect("valid shape")
}

fn gradient_checks() -> Check {
    let h = FD_STEP;
    let mut worst = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut r = rng(77);

    for _ in 0..GRAD_CASES {
        let (n, m) = (r.random_range(1..=8), r.random_range(1..=6));
        let x = random_tensor(&mut r, &[n], 1.0);
        let w = random_tensor(&mut r, &[m, n], 1.0);
        let b = random_tensor(&mut r, &[m], 1.0);
        let coef = random_tensor(&mut r, &[m], 1.0);
        let g = dense_vjp(&x, &w, &coef).map_err(|e| e.to_string())?;
        let f = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let (xf, wf, bf, cf) = (f(&x), f(&w), f(&b), f(&coef));
        let loss =
            |p: &[Vec<f64>; 3]| -> f64 { dense_f64(&p[0], &p[1], &p[2]).iter().zip(&cf).map(|(o, c)| o * c).sum() };
        for (which, analytic) in [g.input.data(), g.weight.data(), g.bias.data()].into_iter().enumerate() {
            for (i, &a) in analytic.iter().enumerate() {
                let mut p = [xf.clone(), wf.clone(), bf.clone()];
                p[which][i] += h;
                let up = loss(&p);
                p[which][i] -= 2.0 * h;
                let fd = (up - loss(&p)) / (2.0 * h);
                worst[0] = worst[0].max(rel_err(a as f64, fd, GRAD_FLOOR));
                counts[0] += 1;
            }
        }
    }

    for _ in 0..GRAD_CASES {
        let k = r.random_range(2..=6);
        let label = r.random_range(0..k);
        let z = random_tensor(&mut r, &[k], 3.0);
        let g =
            ce_softmax_grad(&softmax(&z), &one_hot(label, k).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let zf: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
        for i in 0..k {
            let mut p = zf.clone();
            p[i] += h;
            let up = cross_entropy_f64(&p, label);
            p[i] -= 2.0 * h;
            let fd = (up - cross_entropy_f64(&p, label)) / (2.0 * h);
            worst[1] = worst[1].max(rel_err(g.data()[i] as f64, fd, GRAD_FLOOR));
            counts[1] += 1;
        }
    }

    // Cross-entropy through dense2, ReLU, dense1, flatten and the final pool
    // back to the last conv activation. Elements whose stencil crosses a
    // pool tie or a ReLU kink have no derivative and are skipped.
    let spec = cam_spec();
    let [c, hh, ww] = spec.cam_shape().try_into().expect("rank 3");
    let mut skipped = 0usize;
    for case in 0..GRAD_CASES {
        let head = random_head(&spec, case);
        let act = random_activation(&mut r, &[c, hh, ww]);
        let label = r.random_range(0..3);
        let (feats, idx) = maxpool2d(&act, 2, 2).map_err(|e| e.to_string())?;
        let trace = head_forward(&spec, &head, &feats).map_err(|e| e.to_string())?;
        let dlogits =
            ce_softmax_grad(&trace.probs, &one_hot(label, 3).expect("in range")).map_err(|e| e.to_string())?;
        let grads = head_backward(&spec, &head, &trace, &dlogits, false).map_err(|e| e.to_string())?;
        let dact = maxpool2d_backward(&grads.features, &idx, act.shape()).map_err(|e| e.to_string())?;
        let base: Vec<f64> = act.data().iter().map(|&v| v as f64).collect();
        let (_, gaps) = maxpool_f64(&base, c, hh, ww);
        let (_, pattern) = logits_from_activation(&spec, &head, &base);
        let (ph, pw) = (hh / 2, ww / 2);
        for i in 0..base.len() {
            let (ch, y, x) = (i / (hh * ww), (i % (hh * ww)) / ww, i % ww);
            if gaps[ch * ph * pw + (y / 2) * pw + x / 2] < 4.0 * h {
                skipped += 1;
                continue;
            }
            let mut p = base.clone();
            p[i] += h;
            let (zu, pu) = logits_from_activation(&spec, &head, &p);
            p[i] -= 2.0 * h;
            let (zd, pd) = logits_from_activation(&spec, &head, &p);
            if pu != pattern || pd != pattern {
                skipped += 1;
                continue;
            }
            let fd = (cross_entropy_f64(&zu, label) - cross_entropy_f64(&zd, label)) / (2.0 * h);
            worst[2] = worst[2].max(rel_err(dact.data()[i] as f64, fd, GRAD_FLOOR));
            counts[2] += 1;
        }
    }
    ensure(worst.iter().all(|&w| w < GRAD_REL), || {
        format!("max rel err {worst:.2?} (limit {GRAD_REL:e})")
    })?;
    Ok(format!(
        "{GRAD_CASES} cases each; max rel err dense_vjp {:.1e} ({} entries), ce_softmax_grad {:.1e} ({}), head+pool {:.1e} ({}, {skipped} kink/tie entries skipped)",
        worst[0], counts[0], worst[1], counts[1], worst[2], counts[2]
    ))
}

fn adam_fixture() -> Check {
    let hyper = AdamHyper::default();
    let mut p = Tensor::vector(vec![0.0]);
    let mut s = AdamState::new(&[1]);
    let expected = adam_f64(0.0, &[2.0, 2.0], 0.001, 0.9, 0.999, 1e-8);
    adam_step(&mut p, &Tensor::vector(vec![2.0]), &mut s, &hyper).map_err(|e| e.to_string())?;
    let first = p.data()[0] as f64;
    adam_step(&mut p, &Tensor::vector(vec![2.0]), &mut s, &hyper).map_err(|e| e.to_string())?;
    let second = p.data()[0] as f64;
    let d = [
        (first - expected[0]).abs(),
        (second - expected[1]).abs(),
        (first - ADAM_FIRST_STEP).abs(),
    ];
    ensure(d.iter().all(|&x| x <= ADAM_TOL), || format!("diffs {d:.2?}"))?;
    Ok(format!(
        "steps {first:.13} / {second:.13}, max diff {:.1e}",
        d.iter().cloned().fold(0.0, f64::max)
    ))
}

fn bin(dir: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_cxrnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "`cxrnet {}` exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn read_report(path: &Path) -> Result<EvalReport, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn metrics_fixture() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut csv = String::from("path,true,predicted\n");
    for (t, p, n) in [
        ("COVID", "COVID", 39),
        ("NORMAL", "NORMAL", 15),
        ("NORMAL", "INFECTION", 2),
        ("INFECTION", "INFECTION", 19),
    ] {
        for i in 0..n {
            csv.push_str(&format!("{t}_{p}_{i}.png,{t},{p}\n"));
        }
    }
    fs::write(tmp.path().join("pred.csv"), csv).map_err(|e| e.to_string())?;
    bin(tmp.path(), &["eval", "--predictions", "pred.csv", "--out", "ev"])?;
    let r = read_report(&tmp.path().join("ev/report.json"))?;
    let recalls: Vec<f64> = r.recalls.iter().map(|x| x.unwrap_or(f64::NAN)).collect();
    ensure((r.accuracy - METRIC_ACC).abs() <= METRIC_ACC_TOL, || {
        format!("accuracy {}", r.accuracy)
    })?;
    ensure(format!("{:.4}", r.accuracy) == "0.9733", || {
        format!("accuracy {} does not round to 0.9733", r.accuracy)
    })?;
    ensure(
        recalls
            .iter()
            .zip(METRIC_RECALLS)
            .all(|(a, e)| (a - e).abs() <= METRIC_RECALL_TOL),
        || format!("recalls {recalls:?}"),
    )?;
    ensure(r.matrix.get(1, 2) == 2 && r.matrix.trace() == 73, || {
        format!("matrix {:?}", r.matrix)
    })?;
    Ok(format!(
        "accuracy {:.6} ({}/{}), recalls {recalls:.4?}",
        r.accuracy,
        r.matrix.trace(),
        r.matrix.total()
    ))
}

fn rgb_texture(label: usize, side: usize, seed: u64) -> Tensor {
    let g = synth::texture(label, side, &mut ChaCha8Rng::seed_from_u64(seed));
    let rgb = image::DynamicImage::ImageLuma8(g).to_rgb8();
    preprocess_rgb(&rgb, side, Normalization::Imagenet).expect("valid image")
}

fn overfit_sanity() -> Check {
    let spec = build_vgg16(3).map_err(|e| e.to_string())?;
    let backbone = init_backbone(&spec, 0);
    let distinct: Vec<Tensor> = (0..3).map(|l| rgb_texture(l, 237, 10 + l as u64)).collect();
    let mut train = MemorySource::default();
    for (label, img) in distinct.iter().enumerate() {
        for _ in 0..15 {
            train.images.push(img.clone());
            train.labels.push(label);
        }
    }
    let val = MemorySource {
        images: distinct,
        labels: vec![0, 1, 2],
    };
    let config = TrainConfig::default();
    let out = train_head(&spec, &backbone, &train, &val, &config).map_err(|e| e.to_string())?;
    let fin = out.history.final_record();
    let first = out
        .history
        .epochs
        .iter()
        .find(|r| r.train_accuracy == 1.0)
        .map(|r| r.epoch);
    ensure(fin.train_accuracy == 1.0, || {
        format!("final train accuracy {}", fin.train_accuracy)
    })?;
    Ok(format!(
        "VGG-16, 45 images, {} epochs, lr {}, batch {}: train acc 1.0 first at epoch {}, final loss {:.2e}",
        config.epochs,
        config.learning_rate,
        config.batch_size,
        first.unwrap_or(0),
        fin.train_loss
    ))
}

fn synthetic_end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    bin(d, &["synth", "--out", "data", "--counts", E2E_COUNTS, "--seed", "11"])?;
    bin(d, &["init-backbone", "--arch", "small", "--seed", "3", "--out", "bb"])?;
    bin(
        d,
        &[
            "split",
            "--data",
            "data",
            "--ratios",
            "0.8,0.1,0.1",
            "--seed",
            "5",
            "--out",
            "split.json",
        ],
    )?;
    let epochs = E2E_EPOCHS.to_string();
    bin(
        d,
        &[
            "train",
            "--data",
            "data",
            "--split",
            "split.json",
            "--backbone",
            "bb",
            "--out",
            "run",
            "--epochs",
            &epochs,
        ],
    )?;
    bin(
        d,
        &[
            "eval",
            "--data",
            "data",
            "--split",
            "split.json",
            "--backbone",
            "bb",
            "--head",
            "run/head",
            "--out",
            "ev",
        ],
    )?;

    let manifest = SplitManifest::load(d.join("split.json")).map_err(|e| e.to_string())?;
    let r = read_report(&d.join("ev/report.json"))?;
    let history = fs::read_to_string(d.join("run/history.csv")).map_err(|e| e.to_string())?;
    let records = cxrnet_core::train::parse_history_csv(&history).map_err(|e| e.to_string())?;
    let expected_rows: Vec<u64> = ["covid/", "normal/", "infection/"]
        .iter()
        .map(|p| manifest.test.iter().filter(|t| t.starts_with(p)).count() as u64)
        .collect();
    let rows: Vec<u64> = (0..3).map(|i| r.matrix.row_sum(i)).collect();
    ensure(rows == expected_rows, || {
        format!("row sums {rows:?} vs test counts {expected_rows:?}")
    })?;
    ensure(records.len() == E2E_EPOCHS, || {
        format!("history has {} rows", records.len())
    })?;
    ensure(r.accuracy >= E2E_MIN_ACC, || {
        format!("test accuracy {:.4} < {E2E_MIN_ACC}", r.accuracy)
    })?;
    Ok(format!(
        "split {}/{}/{}, test accuracy {:.4}, row sums {rows:?}, {} history rows, final train loss {:.2e}",
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        r.accuracy,
        records.len(),
        records.last().map_or(f64::NAN, |x| x.train_loss)
    ))
}

fn scale_row(w: &WeightSet, class: usize, factor: f32) -> WeightSet {
    let mut out = w.clone();
    let mut t = w.get("head.dense2.weight").expect("head").clone();
    let n = t.shape()[1];
    t.data_mut()[class * n..(class + 1) * n]
        .iter_mut()
        .for_each(|v| *v *= factor);
    out.insert("head.dense2.weight", t).expect("finite");
    out
}

fn gradcam_properties() -> Check {
    let err = |e: cxrnet_core::Error| e.to_string();
    // Zero target row on a real forward pass through the small backbone.
    let small = VggConfig::small(3).build().map_err(err)?;
    let mut weights = init_backbone(&small, 1);
    weights.extend(random_head(&small, 2));
    let zeroed = scale_row(&weights, 1, 0.0);
    let mut zero_maps = 0;
    for seed in 0..3 {
        let cam = grad_cam(&small, &zeroed, &rgb_texture(seed as usize, 237, seed), Some(1)).map_err(err)?;
        ensure(cam.heatmap.data().iter().all(|&v| v == 0.0), || {
            "zero-row heatmap is not all zero".into()
        })?;
        zero_maps += 1;
    }

    let spec = cam_spec();
    let cam_shape = spec.cam_shape().to_vec();
    let mut r = rng(31);
    let mut other_worst = 0.0f32;
    for seed in 0..20 {
        let head = random_head(&spec, 500 + seed);
        let act = random_activation(&mut r, &cam_shape);
        let target = (seed % 3) as usize;
        let base = grad_cam_from_activation(&spec, &head, &act, Some(target)).map_err(err)?;
        for f in CAM_EXACT_FACTORS {
            let cam = grad_cam_from_activation(&spec, &scale_row(&head, target, f), &act, Some(target)).map_err(err)?;
            ensure(cam.heatmap == base.heatmap, || format!("factor {f}: heatmap changed"))?;
            ensure(cam.alpha.iter().zip(&base.alpha).all(|(a, b)| *a == b * f), || {
                format!("factor {f}: alpha not scaled")
            })?;
        }
        for f in CAM_OTHER_FACTORS {
            let cam = grad_cam_from_activation(&spec, &scale_row(&head, target, f), &act, Some(target)).map_err(err)?;
            for (a, b) in cam.heatmap.data().iter().zip(base.heatmap.data()) {
                other_worst = other_worst.max((a - b).abs());
            }
        }
    }
    ensure(other_worst <= CAM_OTHER_TOL, || {
        format!("non-power-of-two rescaling moved the heatmap by {other_worst:e}")
    })?;

    let h = FD_STEP;
    let (c, plane) = (cam_shape[0], cam_shape[1] * cam_shape[2]);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for case in 0..CAM_CASES {
        let head = random_head(&spec, 900 + case);
        let act = random_activation(&mut r, &cam_shape);
        let target = (case % 3) as usize;
        let cam = grad_cam_from_activation(&spec, &head, &act, Some(target)).map_err(err)?;
        let base: Vec<f64> = act.data().iter().map(|&v| v as f64).collect();
        let (_, pattern) = logits_from_activation(&spec, &head, &base);
        for k in 0..c {
            let shifted = |d: f64| {
                let mut a = base.clone();
                a[k * plane..(k + 1) * plane].iter_mut().for_each(|v| *v += d);
                logits_from_activation(&spec, &head, &a)
            };
            let ((up, pu), (down, pd)) = (shifted(h), shifted(-h));
            if pu != pattern || pd != pattern {
                continue;
            }
            let fd = (up[target] - down[target]) / (2.0 * h) / plane as f64;
            worst = worst.max(rel_err(cam.alpha[k] as f64, fd, GRAD_FLOOR / plane as f64));
            checked += 1;
        }
    }
    ensure(worst < GRAD_REL, || format!("alpha max rel err {worst:e}"))?;
    ensure(checked >= CAM_CASES as usize * c / 2, || {
        format!("only {checked} alphas checked")
    })?;
    Ok(format!(
        "zero row -> zero heatmap on {zero_maps} images; c in {CAM_EXACT_FACTORS:?} bit-identical on 20 heads \
         (c in {CAM_OTHER_FACTORS:?}: max diff {other_worst:.1e}); alpha FD max rel err {worst:.1e} over {checked} channels"
    ))
}

fn determinism_and_persistence() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let read = |p: &str| fs::read(d.join(p)).map_err(|e| format!("{p}: {e}"));
    bin(
        d,
        &[
            "synth", "--out", "data", "--counts", "12,10,10", "--side", "96", "--seed", "8",
        ],
    )?;
    bin(d, &["init-backbone", "--arch", "small", "--seed", "2", "--out", "bb"])?;
    bin(d, &["split", "--data", "data", "--seed", "13", "--out", "s1.json"])?;
    bin(d, &["split", "--data", "data", "--seed", "13", "--out", "s2.json"])?;
    ensure(read("s1.json")? == read("s2.json")?, || "split manifests differ".into())?;
    for out in ["r1", "r2"] {
        bin(
            d,
            &[
                "train",
                "--data",
                "data",
                "--split",
                "s1.json",
                "--backbone",
                "bb",
                "--out",
                out,
                "--epochs",
                "8",
                "--seed",
                "4",
            ],
        )?;
    }
    ensure(read("r1/history.csv")? == read("r2/history.csv")?, || {
        "histories differ".into()
    })?;
    ensure(read("r1/head/weights.bin")? == read("r2/head/weights.bin")?, || {
        "trained heads differ".into()
    })?;

    let head = load_container(d.join("r1/head")).map_err(|e| e.to_string())?;
    save_container(&head.weights, &head.metadata, d.join("copy")).map_err(|e| e.to_string())?;
    let back = load_container(d.join("copy")).map_err(|e| e.to_string())?;
    let bits = |w: &WeightSet| {
        w.iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                )
            })
            .collect::<Vec<_>>()
    };
    ensure(bits(&back.weights) == bits(&head.weights), || {
        "head container round trip changed bits".into()
    })?;

    let mut r = rng(99);
    let mut random = WeightSet::new();
    for i in 0..20 {
        let rank = r.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..=6)).collect();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| f32::from_bits(r.random::<u32>() & 0xbf7f_ffff))
            .collect();
        random
            .insert(format!("t{i}"), Tensor::new(shape, data).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    }
    save_container(&random, &BTreeMap::new(), d.join("random")).map_err(|e| e.to_string())?;
    let loaded = load_container(d.join("random")).map_err(|e| e.to_string())?;
    ensure(bits(&loaded.weights) == bits(&random), || {
        "random container round trip changed bits".into()
    })?;
    Ok(format!(
        "split, history and head bytes identical across reruns; {} + {} tensors round-trip bit-exact",
        head.weights.len(),
        random.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("conv oracle equivalence", Some(CONV_BUDGET), conv_oracle),
        ("gradient checks", Some(GRAD_BUDGET), gradient_checks),
        ("adam fixture", None, adam_fixture),
        ("metrics fixture", None, metrics_fixture),
        ("overfit sanity", Some(OVERFIT_BUDGET), overfit_sanity),
        ("synthetic end-to-end", Some(E2E_BUDGET), synthetic_end_to_end),
        ("grad-cam properties", Some(CAM_BUDGET), gradcam_properties),
        ("determinism and persistence", None, determinism_and_persistence),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let over = budget.is_some_and(|b| took > b);
        let budget_text = budget.map_or(String::new(), |b| format!(" / {} s budget", b.as_secs()));
        let (ok, detail) = match result {
            Ok(d) if over => (false, format!("{d}; over time budget")),
            Ok(d) => (true, d),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} [{}] {name}: {detail} ({:.1} s{budget_text})",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
