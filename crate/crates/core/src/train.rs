//! Head-only training: categorical cross-entropy, Adam, and the epoch loop.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{batches, epoch_seed};
use crate::error::{invalid, mismatch, Error, Result};
use crate::eval::argmax;
use crate::model::{backbone_forward, head_backward_batch, head_forward_batch, init_head, ModelSpec};
use crate::tensor::Tensor;
use crate::weights::{validate_against, WeightSet};

/// Probability floor inside the logarithm of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
    pub cache_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            learning_rate: 0.001,
            batch_size: 15,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            cache_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "TrainConfig";
        if self.epochs == 0 {
            return Err(invalid(OP, "epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid(OP, "batch size must be at least 1"));
        }
        // Zero is allowed: it freezes the head, which is useful as a control.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(
                OP,
                format!("learning rate {} must be finite and >= 0", self.learning_rate),
            ));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(OP, format!("{name} = {b} outside [0, 1)")));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(invalid(OP, "epsilon must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

// ---------------------------------------------------------------------------
// Loss

/// `-Σ y_i · ln(max(p_i, 1e-12))`, accumulated in `f64`.
pub fn cross_entropy(probs: &Tensor, onehot: &Tensor) -> f64 {
    probs
        .data()
        .iter()
        .zip(onehot.data())
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| -(y as f64) * libm::log((p as f64).max(PROB_FLOOR)))
        .sum()
}

/// Gradient of cross-entropy-after-softmax with respect to the logits.
pub fn ce_softmax_grad(probs: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    if probs.len() != onehot.len() {
        return Err(mismatch("ce_softmax_grad", "classes", probs.len(), onehot.len()));
    }
    let g = probs.data().iter().zip(onehot.data()).map(|(p, y)| p - y).collect();
    Tensor::new(probs.shape().to_vec(), g)
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::InvalidShape(format!(
            "adam_step: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    grad.ensure_finite("adam_step gradient")?;
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let bc1 = (1.0 - libm::pow(b1 as f64, t)) as f32;
    let bc2 = (1.0 - libm::pow(b2 as f64, t)) as f32;
    let lr = hyper.learning_rate;
    let eps = hyper.epsilon;
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (libm::sqrtf(v_hat) + eps);
    }
    // Squared gradients can overflow even when the gradient itself is finite.
    if !(state.v.all_finite() && param.all_finite()) {
        return Err(Error::NonFinite("adam_step: moment estimate overflowed".into()));
    }
    Ok(())
}

/// Adam over a named parameter set; one [`AdamState`] per tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    hyper: AdamHyper,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    pub fn step(&mut self, params: &mut WeightSet, grads: &[(String, Tensor)]) -> Result<()> {
        for (name, g) in grads {
            let p = params.require_mut(name)?;
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(p.shape()));
            adam_step(p, g, state, &self.hyper)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop

/// Labeled images addressed by position.
pub trait ImageSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize;

    /// The preprocessed `[3, h, w]` network input.
    fn image(&self, index: usize) -> Result<Tensor>;

    /// Human-readable name used in diagnostics.
    fn describe(&self, index: usize) -> String {
        format!("sample #{index}")
    }
}

/// In-memory [`ImageSource`].
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ImageSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn image(&self, index: usize) -> Result<Tensor> {
        Ok(self.images[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Metrics of the freshly initialized head (epoch 0).
    pub initial: EpochRecord,
    /// One record per completed epoch, starting at epoch 1.
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: WeightSet,
    pub history: TrainHistory,
}

/// Backbone features, either computed once or recomputed on every access.
enum Features<'a> {
    Cached {
        rows: Vec<f32>,
        width: usize,
    },
    Live {
        source: &'a dyn ImageSource,
        spec: &'a ModelSpec,
        backbone: &'a WeightSet,
    },
}

impl<'a> Features<'a> {
    fn new(source: &'a dyn ImageSource, spec: &'a ModelSpec, backbone: &'a WeightSet, cache: bool) -> Result<Self> {
        if !cache {
            return Ok(Self::Live { source, spec, backbone });
        }
        let width = spec.feature_len();
        let mut rows = Vec::with_capacity(source.len() * width);
        for i in 0..source.len() {
            rows.extend_from_slice(&compute_features(source, spec, backbone, i)?);
        }
        Ok(Self::Cached { rows, width })
    }

    fn row(&self, i: usize) -> Result<Cow<'_, [f32]>> {
        match self {
            Self::Cached { rows, width } => Ok(Cow::Borrowed(&rows[i * width..(i + 1) * width])),
            Self::Live { source, spec, backbone } => Ok(Cow::Owned(compute_features(*source, spec, backbone, i)?)),
        }
    }

    fn gather(&self, members: &[usize], width: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(members.len() * width);
        for &m in members {
            data.extend_from_slice(&self.row(m)?);
        }
        Tensor::new(vec![members.len(), width], data)
    }
}

fn compute_features(source: &dyn ImageSource, spec: &ModelSpec, backbone: &WeightSet, i: usize) -> Result<Vec<f32>> {
    let image = source
        .image(i)
        .map_err(|e| Error::Source(format!("{}: {e}", source.describe(i))))?;
    Ok(backbone_forward(spec, backbone, &image)?.features.into_data())
}

/// Rows per forward chunk when recomputing full-set metrics.
const METRIC_CHUNK: usize = 64;

/// Mean loss and accuracy of `head` over every sample in `features`.
fn evaluate(spec: &ModelSpec, head: &WeightSet, features: &Features<'_>, labels: &[usize]) -> Result<(f64, f64)> {
    let k = spec.num_classes();
    let width = spec.feature_len();
    let (mut loss, mut correct) = (0.0f64, 0usize);
    let all: Vec<usize> = (0..labels.len()).collect();
    for chunk in all.chunks(METRIC_CHUNK) {
        let x = features.gather(chunk, width)?;
        let trace = head_forward_batch(spec, head, &x)?;
        for (row, &m) in trace.probs.data().chunks_exact(k).zip(chunk) {
            let p = (row[labels[m]] as f64).max(PROB_FLOOR);
            loss -= libm::log(p);
            if argmax(row) == labels[m] {
                correct += 1;
            }
        }
    }
    let n = labels.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains the dense head on top of a frozen backbone.
///
/// The head starts from [`init_head`] with `config.seed`; each epoch shuffles
/// the training set, takes one Adam step per batch on the batch-mean loss,
/// and then recomputes loss and accuracy over the full training and
/// validation sets.
pub fn train_head(
    spec: &ModelSpec,
    backbone: &WeightSet,
    train: &dyn ImageSource,
    val: &dyn ImageSource,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_head_observed(spec, backbone, train, val, config, &mut |_| {})
}

/// [`train_head`] with a callback after every epoch record (including epoch 0).
pub fn train_head_observed(
    spec: &ModelSpec,
    backbone: &WeightSet,
    train: &dyn ImageSource,
    val: &dyn ImageSource,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(invalid("train_head", "training set is empty"));
    }
    if val.is_empty() {
        return Err(invalid("train_head", "validation set is empty"));
    }
    validate_against(spec, backbone).into_backbone_result()?;

    let k = spec.num_classes();
    let width = spec.feature_len();
    let train_labels: Vec<usize> = (0..train.len()).map(|i| train.label(i)).collect();
    let val_labels: Vec<usize> = (0..val.len()).map(|i| val.label(i)).collect();
    if let Some(&bad) = train_labels.iter().chain(&val_labels).find(|&&l| l >= k) {
        return Err(invalid(
            "train_head",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let train_feats = Features::new(train, spec, backbone, config.cache_features)?;
    let val_feats = Features::new(val, spec, backbone, config.cache_features)?;

    let mut head = init_head(spec, config.seed);
    let mut adam = Adam::new(config.adam());
    let record = |epoch, head: &WeightSet| -> Result<EpochRecord> {
        let (train_loss, train_accuracy) = evaluate(spec, head, &train_feats, &train_labels)?;
        let (val_loss, val_accuracy) = evaluate(spec, head, &val_feats, &val_labels)?;
        let r = EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        };
        if !(r.train_loss.is_finite() && r.val_loss.is_finite()) {
            return Err(Error::NonFinite(format!("epoch {epoch}: metric loss is not finite")));
        }
        Ok(r)
    };

    let initial = record(0, &head)?;
    observer(&initial);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let plan = batches(&train_labels, k, config.batch_size, epoch_seed(config.seed, epoch))?;
        for (b, batch) in plan.iter().enumerate() {
            let x = train_feats.gather(&batch.members, width)?;
            let trace = head_forward_batch(spec, &head, &x)?;
            let n = batch.members.len();
            let mut loss = 0.0f64;
            for (row, y) in trace
                .probs
                .data()
                .chunks_exact(k)
                .zip(batch.onehot.data().chunks_exact(k))
            {
                let label = y.iter().position(|&v| v == 1.0).expect("one-hot row");
                loss -= libm::log((row[label] as f64).max(PROB_FLOOR));
            }
            if !loss.is_finite() || !trace.logits.all_finite() {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {b}: loss is {}",
                    loss / n as f64
                )));
            }
            let scale = 1.0 / n as f32;
            let dlogits: Vec<f32> = trace
                .probs
                .data()
                .iter()
                .zip(batch.onehot.data())
                .map(|(p, y)| (p - y) * scale)
                .collect();
            let dlogits = Tensor::new(vec![n, k], dlogits)?;
            let grads = head_backward_batch(spec, &head, &trace, &dlogits)?;
            adam.step(&mut head, &grads).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} batch {b}: {msg}")),
                other => other,
            })?;
        }
        let r = record(epoch, &head)?;
        observer(&r);
        epochs.push(r);
    }
    Ok(TrainOutcome {
        head,
        history: TrainHistory { initial, epochs },
    })
}

impl TrainHistory {
    /// CSV with header `epoch,train_loss,train_acc,val_loss,val_acc`, one
    /// row per completed epoch, values with nine significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.8e},{:.8e},{:.8e},{:.8e}\n",
                r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
            ));
        }
        out
    }

    pub fn final_record(&self) -> &EpochRecord {
        self.epochs.last().unwrap_or(&self.initial)
    }
}

impl core::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "epoch {:>3}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            self.epoch, self.train_loss, self.train_accuracy, self.val_loss, self.val_accuracy
        )
    }
}

/// Parses a history CSV written by [`TrainHistory::to_csv`] back into records.
pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,train_loss,train_acc,val_loss,val_acc") {
        return Err(invalid("history", "unexpected header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| invalid("history", format!("bad field {i} in `{line}`")))
            };
            if f.len() != 5 {
                return Err(invalid("history", format!("expected 5 fields in `{line}`")));
            }
            Ok(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|_| invalid("history", format!("bad epoch in `{line}`")))?,
                train_loss: num(1)?,
                train_accuracy: num(2)?,
                val_loss: num(3)?,
                val_accuracy: num(4)?,
            })
        })
        .collect()
}
