//! Grad-CAM over the last convolutional activation, and heatmap colouring.
//!
//! The class score is the pre-softmax logit. Its gradient is carried back
//! through the head and the final max pool to the post-ReLU activation of the
//! last convolution; channel weights are the spatial means of that gradient.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::argmax;
use crate::model::{backbone_forward, head_backward, head_forward, ModelSpec};
use crate::tensor::{self, Tensor};
use crate::weights::{validate_against, WeightSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamResult {
    pub class_index: usize,
    /// One weight per channel of the last convolution.
    pub alpha: Vec<f32>,
    /// `ReLU(Σ_k alpha_k · A_k)` at activation resolution, `[h, w]`.
    pub raw_map: Tensor,
    /// `raw_map` upsampled to the input size and divided by its maximum
    /// (left at zero when the map is all zero), `[H, W]`.
    pub heatmap: Tensor,
    pub predicted_probs: Vec<f32>,
}

/// Grad-CAM for `image`. `target` defaults to the predicted class.
pub fn grad_cam(spec: &ModelSpec, weights: &WeightSet, image: &Tensor, target: Option<usize>) -> Result<CamResult> {
    validate_against(spec, weights).into_result()?;
    let bb = backbone_forward(spec, weights, image)?;
    grad_cam_from_activation(spec, weights, &bb.last_conv_activation, target)
}

/// Grad-CAM starting from a last-conv activation `[C, h, w]` (post-ReLU,
/// before the final pool).
pub fn grad_cam_from_activation(
    spec: &ModelSpec,
    weights: &WeightSet,
    activation: &Tensor,
    target: Option<usize>,
) -> Result<CamResult> {
    if activation.shape() != spec.cam_shape() {
        return Err(Error::InvalidShape(alloc::format!(
            "activation {:?} does not match {:?}",
            activation.shape(),
            spec.cam_shape()
        )));
    }
    let (channels, h, w) = activation.dims3("grad_cam")?;
    let (features, indices) = tensor::maxpool2d(activation, 2, 2)?;
    let trace = head_forward(spec, weights, &features)?;
    let k = spec.num_classes();
    let class_index = target.unwrap_or_else(|| argmax(trace.probs.data()));
    if class_index >= k {
        return Err(invalid(
            "grad_cam",
            alloc::format!("class {class_index} out of range for {k} classes"),
        ));
    }
    let mut dscore = Tensor::zeros(&[k]);
    dscore.data_mut()[class_index] = 1.0;
    let grads = head_backward(spec, weights, &trace, &dscore, false)?;
    let dact = tensor::maxpool2d_backward(&grads.features, &indices, activation.shape())?;

    let plane = h * w;
    let alpha: Vec<f32> = dact
        .data()
        .chunks_exact(plane)
        .map(|g| (g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();

    let a = activation.data();
    let mut raw = Vec::with_capacity(plane);
    for px in 0..plane {
        let mut acc = 0.0f64;
        for (c, &alpha_c) in alpha.iter().enumerate().take(channels) {
            acc += alpha_c as f64 * a[c * plane + px] as f64;
        }
        raw.push((acc as f32).max(0.0));
    }
    let raw_map = Tensor::new(alloc::vec![h, w], raw)?;

    let [_, out_h, out_w] = spec.input_shape();
    let mut heatmap =
        tensor::bilinear_resize(&raw_map.clone().reshape(&[1, h, w])?, out_h, out_w)?.reshape(&[out_h, out_w])?;
    let max = heatmap.data().iter().fold(0.0f32, |m, &v| m.max(v));
    if max > 0.0 {
        heatmap.data_mut().iter_mut().for_each(|v| *v /= max);
    }

    Ok(CamResult {
        class_index,
        alpha,
        raw_map,
        heatmap,
        predicted_probs: trace.probs.into_data(),
    })
}

/// Colormap anchors: value → RGB.
pub const COLORMAP: [(f32, [f32; 3]); 5] = [
    (0.0, [0.0, 0.0, 64.0]),
    (0.25, [0.0, 0.0, 255.0]),
    (0.5, [0.0, 255.0, 0.0]),
    (0.75, [255.0, 255.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

/// Heatmap weight of the colour layer in an overlay.
pub const OVERLAY_ALPHA: f32 = 0.4;

/// Piecewise-linear colour for a heatmap value, clamped to `[0, 1]`.
pub fn colormap(value: f32) -> [f32; 3] {
    let v = value.clamp(0.0, 1.0);
    for pair in COLORMAP.windows(2) {
        let ((x0, c0), (x1, c1)) = (pair[0], pair[1]);
        if v <= x1 {
            let t = (v - x0) / (x1 - x0);
            return [0, 1, 2].map(|i| c0[i] + (c1[i] - c0[i]) * t);
        }
    }
    COLORMAP[COLORMAP.len() - 1].1
}

/// Blends the coloured heatmap over an interleaved RGB8 image of the same
/// size: `(1 - alpha)·image + alpha·colour`, rounded to 8 bits.
pub fn blend_overlay(heatmap: &Tensor, rgb: &[u8], alpha: f32) -> Result<Vec<u8>> {
    if rgb.len() != heatmap.len() * 3 {
        return Err(invalid(
            "blend_overlay",
            alloc::format!("{} RGB bytes for {} heatmap cells", rgb.len(), heatmap.len()),
        ));
    }
    let mut out = Vec::with_capacity(rgb.len());
    for (&v, px) in heatmap.data().iter().zip(rgb.chunks_exact(3)) {
        let color = colormap(v);
        for (c, &orig) in color.iter().zip(px) {
            let mixed = (1.0 - alpha) * orig as f32 + alpha * c;
            out.push(libm::roundf(mixed).clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_anchors() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 64.0]);
        assert_eq!(colormap(0.25), [0.0, 0.0, 255.0]);
        assert_eq!(colormap(0.5), [0.0, 255.0, 0.0]);
        assert_eq!(colormap(0.75), [255.0, 255.0, 0.0]);
        assert_eq!(colormap(1.0), [255.0, 0.0, 0.0]);
        assert_eq!(colormap(0.125), [0.0, 0.0, 159.5]);
        assert_eq!(colormap(-3.0), colormap(0.0));
    }

    #[test]
    fn zero_heatmap_blend() {
        let heat = Tensor::zeros(&[1, 2]);
        let rgb = [100u8, 50, 0, 255, 255, 255];
        let out = blend_overlay(&heat, &rgb, OVERLAY_ALPHA).unwrap();
        let expected: Vec<u8> = rgb
            .chunks_exact(3)
            .flat_map(|p| {
                [0.0f32, 0.0, 64.0]
                    .iter()
                    .zip(p)
                    .map(|(c, &o)| libm::roundf(0.6 * o as f32 + 0.4 * c) as u8)
                    .collect::<Vec<_>>()
            })
            .collect();
        assert_eq!(out, expected);
        assert!(blend_overlay(&heat, &rgb[..3], 0.4).is_err());
    }
}
