//! Independent `f64` reference implementations used as test oracles.
//!
//! Nothing here calls into the crate's numeric kernels; the model structure
//! is read from a `ModelSpec` but every product, pool and softmax is redone
//! with plain loops.

#![allow(dead_code)]

use cxrnet_core::model::{LayerKind, ModelSpec};
use cxrnet_core::weights::WeightSet;
use cxrnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Straight quadruple-loop cross-correlation with zero padding.
pub fn conv2d_direct(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [cin, h, w] = input.shape().try_into().unwrap();
    let [cout, _, kh, kw] = kernel.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(cout * oh * ow);
    for o in 0..cout {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias.data()[o] as f64;
                for c in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (x * stride + j) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = input.at(&[c, iy as usize, ix as usize]) as f64;
                            acc += v * kernel.at(&[o, c, i, j]) as f64;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (vec![cout, oh, ow], out)
}

pub fn dense_f64(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(i, &bi)| bi + (0..n).map(|j| w[i * n + j] * x[j]).sum::<f64>())
        .collect()
}

pub fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn cross_entropy_f64(z: &[f64], label: usize) -> f64 {
    -softmax_f64(z)[label].ln()
}

/// 2×2/2 max pool over `[c, h, w]`, returning values and the gap between
/// the winner and the runner-up of every window.
pub fn maxpool_f64(a: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::new();
    let mut gaps = Vec::new();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut vals: Vec<f64> = (0..4)
                    .map(|k| a[ch * h * w + (2 * y + k / 2) * w + 2 * x + k % 2])
                    .collect();
                vals.sort_by(|p, q| q.partial_cmp(p).unwrap());
                out.push(vals[0]);
                gaps.push(vals[0] - vals[1]);
            }
        }
    }
    (out, gaps)
}

/// Head of `spec` evaluated in `f64` on flat features. Returns the logits and
/// the sign pattern of every ReLU input.
pub fn head_f64(spec: &ModelSpec, weights: &WeightSet, features: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mut x = features.to_vec();
    let mut pattern = Vec::new();
    for layer in spec.head_layers() {
        match layer.kind {
            LayerKind::Dense { .. } => {
                let w: Vec<f64> = weights
                    .get(&layer.weight_name())
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let b: Vec<f64> = weights
                    .get(&layer.bias_name())
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                x = dense_f64(&x, &w, &b);
            }
            LayerKind::Relu => {
                pattern.extend(x.iter().map(|&v| v > 0.0));
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            _ => unreachable!(),
        }
    }
    (x, pattern)
}

/// Logits of the head applied to the pooled last-conv activation.
pub fn logits_from_activation(spec: &ModelSpec, weights: &WeightSet, act: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let [c, h, w] = spec.cam_shape().try_into().unwrap();
    let (pooled, _) = maxpool_f64(act, c, h, w);
    head_f64(spec, weights, &pooled)
}

/// Adam recurrence in `f64` for a scalar parameter and a gradient sequence.
pub fn adam_f64(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
        out.push(p);
    }
    out
}
