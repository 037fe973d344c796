//! Labeled sample inventory, stratified splitting and batching.
//!
//! Shuffles use ChaCha8 seeded through `SeedableRng::seed_from_u64` and the
//! Fisher-Yates `SliceRandom::shuffle` from `rand` 0.9. Both are stable for
//! a fixed crate version, so splits and batch orders replay exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sample {
    pub path: String,
    pub label: usize,
    /// Which origin collection the image came from.
    pub source: String,
}

/// Samples sorted by path, with per-class counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    samples: Vec<Sample>,
    counts: Vec<usize>,
}

impl DatasetIndex {
    pub fn new(mut samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        samples.sort_by(|a, b| a.path.cmp(&b.path));
        if let Some(w) = samples.windows(2).find(|w| w[0].path == w[1].path) {
            return Err(invalid("DatasetIndex", format!("duplicate path `{}`", w[0].path)));
        }
        let mut counts = vec![0; num_classes];
        for s in &samples {
            *counts.get_mut(s.label).ok_or_else(|| {
                invalid(
                    "DatasetIndex",
                    format!("label {} out of range for `{}`", s.label, s.path),
                )
            })? += 1;
        }
        Ok(Self { samples, counts })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const DEFAULT: SplitRatios = SplitRatios {
        train: 0.8,
        val: 0.1,
        test: 0.1,
    };

    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid(
                "split",
                format!("ratios {parts:?} must be finite and non-negative"),
            ));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid("split", format!("ratios {parts:?} sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Number of samples a fraction claims out of `n` (floored).
fn share(n: usize, ratio: f64) -> usize {
    // The epsilon keeps products like 100 × 0.1 from flooring to 9.
    libm::floor(n as f64 * ratio + 1e-9) as usize
}

/// Stratified split. Each class (in label order) is shuffled with one shared
/// seeded generator; the first `floor(n·val)` samples go to validation, the
/// next `floor(n·test)` to test, the rest to training. Each subset is then
/// ordered by path.
pub fn split(index: &DatasetIndex, ratios: SplitRatios, seed: u64) -> Result<SplitAssignment> {
    ratios.validate()?;
    for (label, &n) in index.counts().iter().enumerate() {
        if n < 3 {
            return Err(invalid(
                "split",
                format!("class {label} has {n} samples, need at least 3"),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for label in 0..index.num_classes() {
        let mut members: Vec<&Sample> = index.samples().iter().filter(|s| s.label == label).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_val = share(n, ratios.val);
        let n_test = share(n, ratios.test).min(n - n_val);
        val.extend(members[..n_val].iter().map(|s| (*s).clone()));
        test.extend(members[n_val..n_val + n_test].iter().map(|s| (*s).clone()));
        train.extend(members[n_val + n_test..].iter().map(|s| (*s).clone()));
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_by(|a, b| a.path.cmp(&b.path));
    }
    Ok(SplitAssignment {
        seed,
        ratios,
        train,
        val,
        test,
    })
}

/// One-hot row for `label` among `num_classes`.
pub fn one_hot(label: usize, num_classes: usize) -> Result<Tensor> {
    if label >= num_classes {
        return Err(invalid(
            "one_hot",
            format!("label {label} out of range for {num_classes} classes"),
        ));
    }
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    Tensor::new(vec![num_classes], v)
}

/// A batch: positions into the sample list plus stacked one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub members: Vec<usize>,
    /// `[members.len(), num_classes]`
    pub onehot: Tensor,
}

/// Derives the shuffle seed of one epoch from the run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Shuffled batches over samples with the given labels. The last batch keeps
/// the remainder.
pub fn batches(labels: &[usize], num_classes: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(invalid("batches", "batch size must be positive"));
    }
    if labels.is_empty() {
        return Err(invalid("batches", "no samples to batch"));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order
        .chunks(batch_size)
        .map(|members| {
            let mut onehot = Vec::with_capacity(members.len() * num_classes);
            for &m in members {
                onehot.extend_from_slice(one_hot(labels[m], num_classes)?.data());
            }
            Ok(Batch {
                members: members.to_vec(),
                onehot: Tensor::new(vec![members.len(), num_classes], onehot)?,
            })
        })
        .collect()
}
