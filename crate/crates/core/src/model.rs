//! Declarative VGG-style network: frozen convolutional backbone followed by a
//! trainable dense head.
//!
//! Tensor names are derived from layer names: a layer `block1.conv1` owns
//! `block1.conv1.weight` (`[out, in, 3, 3]`) and `block1.conv1.bias`
//! (`[out]`); a dense layer `head.dense1` owns `head.dense1.weight`
//! (`[out, in]`) and `head.dense1.bias`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::tensor::{self, PoolIndices, Tensor};
use crate::weights::{validate_against, WeightSet};
use crate::CLASS_NAMES;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// 3×3 convolution, stride 1, padding 1.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    /// 2×2 max pooling, stride 2.
    MaxPool2,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub name: String,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn conv3x3(name: &str, in_channels: usize, out_channels: usize) -> Self {
        Self::frozen(
            name,
            LayerKind::Conv3x3 {
                in_channels,
                out_channels,
            },
        )
    }

    pub fn relu(name: &str) -> Self {
        Self::frozen(name, LayerKind::Relu)
    }

    pub fn maxpool2(name: &str) -> Self {
        Self::frozen(name, LayerKind::MaxPool2)
    }

    pub fn flatten(name: &str) -> Self {
        Self::frozen(name, LayerKind::Flatten)
    }

    pub fn dense(name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            kind: LayerKind::Dense {
                in_features,
                out_features,
            },
            name: name.to_string(),
            trainable: true,
        }
    }

    pub fn softmax(name: &str) -> Self {
        Self::frozen(name, LayerKind::Softmax)
    }

    fn frozen(name: &str, kind: LayerKind) -> Self {
        Self {
            kind,
            name: name.to_string(),
            trainable: false,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
}

/// One tensor a model needs from its weight set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub layer: String,
    pub tensor: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// A validated layer list.
///
/// Construction checks that shapes chain, that the backbone ends in
/// conv → relu → maxpool → flatten (the Grad-CAM target), that the head holds
/// only dense and relu layers, and that a single softmax closes the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    class_names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    flatten_at: usize,
}

impl ModelSpec {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, class_names: Vec<String>) -> Result<Self> {
        const OP: &str = "ModelSpec";
        if input_shape.contains(&0) {
            return Err(invalid(OP, format!("input shape {input_shape:?} has a zero extent")));
        }
        let mut shape = input_shape.to_vec();
        let mut shapes = Vec::with_capacity(layers.len());
        let mut flatten_at = None;
        for (i, layer) in layers.iter().enumerate() {
            let fail = |why: String| invalid(OP, format!("layer {i} `{}`: {why}", layer.name));
            let in_head = flatten_at.is_some();
            match layer.kind {
                LayerKind::Conv3x3 {
                    in_channels,
                    out_channels,
                } => {
                    if in_head {
                        return Err(fail("convolution after flatten".into()));
                    }
                    if layer.trainable {
                        return Err(fail("convolutions belong to the frozen backbone".into()));
                    }
                    if shape[0] != in_channels {
                        return Err(fail(format!("expects {in_channels} channels, receives {}", shape[0])));
                    }
                    if out_channels == 0 {
                        return Err(fail("zero output channels".into()));
                    }
                    shape[0] = out_channels;
                }
                LayerKind::Relu => {}
                LayerKind::MaxPool2 => {
                    if in_head {
                        return Err(fail("pooling after flatten".into()));
                    }
                    if layer.trainable {
                        return Err(fail("pooling belongs to the frozen backbone".into()));
                    }
                    if shape[1] < 2 || shape[2] < 2 {
                        return Err(fail(format!("input {shape:?} smaller than the 2x2 window")));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerKind::Flatten => {
                    if in_head {
                        return Err(fail("second flatten".into()));
                    }
                    flatten_at = Some(i);
                    shape = vec![shape.iter().product()];
                }
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    if !in_head {
                        return Err(fail("dense layer before flatten".into()));
                    }
                    if !layer.trainable {
                        return Err(fail("dense layers are trainable".into()));
                    }
                    if shape[0] != in_features {
                        return Err(fail(format!("expects {in_features} features, receives {}", shape[0])));
                    }
                    if out_features == 0 {
                        return Err(fail("zero output features".into()));
                    }
                    shape = vec![out_features];
                }
                LayerKind::Softmax => {
                    if i + 1 != layers.len() {
                        return Err(fail("softmax must be the last layer".into()));
                    }
                    if !in_head {
                        return Err(fail("softmax before flatten".into()));
                    }
                }
            }
            shapes.push(shape.clone());
        }

        let flatten_at = flatten_at.ok_or_else(|| invalid(OP, "no flatten layer"))?;
        let kinds: Vec<&LayerKind> = layers.iter().map(|l| &l.kind).collect();
        if !matches!(kinds.last(), Some(LayerKind::Softmax)) {
            return Err(invalid(OP, "network must end in softmax"));
        }
        let logits_layer = layers.len().checked_sub(2).map(|i| &layers[i].kind);
        let Some(&LayerKind::Dense { out_features, .. }) = logits_layer else {
            return Err(invalid(OP, "softmax must follow a dense layer"));
        };
        if out_features != class_names.len() {
            return Err(mismatch(OP, "classes", class_names.len(), out_features));
        }
        if flatten_at < 3
            || !matches!(kinds[flatten_at - 1], LayerKind::MaxPool2)
            || !matches!(kinds[flatten_at - 2], LayerKind::Relu)
            || !matches!(kinds[flatten_at - 3], LayerKind::Conv3x3 { .. })
        {
            return Err(invalid(OP, "backbone must end with conv, relu, maxpool"));
        }
        if let Some(l) = layers[flatten_at + 1..layers.len() - 1]
            .iter()
            .find(|l| !matches!(l.kind, LayerKind::Dense { .. } | LayerKind::Relu))
        {
            return Err(invalid(OP, format!("layer `{}` not allowed in the head", l.name)));
        }
        let mut seen = alloc::collections::BTreeSet::new();
        if let Some(l) = layers.iter().find(|l| !seen.insert(l.name.as_str())) {
            return Err(invalid(OP, format!("duplicate layer name `{}`", l.name)));
        }

        Ok(Self {
            input_shape,
            layers,
            class_names,
            shapes,
            flatten_at,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Layers up to (not including) the flatten.
    pub fn backbone_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.flatten_at]
    }

    /// Dense/relu layers between the flatten and the softmax.
    pub fn head_layers(&self) -> &[LayerSpec] {
        &self.layers[self.flatten_at + 1..self.layers.len() - 1]
    }

    /// Shape of the backbone output, e.g. `[512, 7, 7]` for VGG-16.
    pub fn feature_shape(&self) -> &[usize] {
        &self.shapes[self.flatten_at - 1]
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    /// Shape of the last convolutional activation, e.g. `[512, 14, 14]`.
    pub fn cam_shape(&self) -> &[usize] {
        &self.shapes[self.flatten_at - 2]
    }

    pub fn count(&self, pred: impl Fn(&LayerKind) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(&l.kind)).count()
    }

    /// Every tensor the model reads, in layer order.
    pub fn parameters(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let (w, b) = match layer.kind {
                LayerKind::Conv3x3 {
                    in_channels,
                    out_channels,
                } => (vec![out_channels, in_channels, 3, 3], vec![out_channels]),
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => (vec![out_features, in_features], vec![out_features]),
                _ => continue,
            };
            for (tensor, shape) in [(layer.weight_name(), w), (layer.bias_name(), b)] {
                out.push(ParamSpec {
                    layer: layer.name.clone(),
                    tensor,
                    shape,
                    trainable: layer.trainable,
                });
            }
        }
        out
    }

    pub fn trainable_parameters(&self) -> Vec<ParamSpec> {
        self.parameters().into_iter().filter(|p| p.trainable).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VggBlock {
    pub convs: usize,
    pub channels: usize,
}

/// Parameters of a VGG-style network: conv blocks each closed by a 2×2
/// max pool, then `features → hidden → relu → classes → softmax`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VggConfig {
    pub input_side: usize,
    pub blocks: Vec<VggBlock>,
    pub hidden: usize,
    pub num_classes: usize,
}

const fn block(convs: usize, channels: usize) -> VggBlock {
    VggBlock { convs, channels }
}

impl VggConfig {
    /// VGG-16 (configuration D) on 237×237 RGB with a 256-unit head.
    pub fn vgg16(num_classes: usize) -> Self {
        Self {
            input_side: crate::INPUT_SIDE,
            blocks: vec![block(2, 64), block(2, 128), block(3, 256), block(3, 512), block(3, 512)],
            hidden: 256,
            num_classes,
        }
    }

    /// Reduced backbone for desk-scale experiments with random weights:
    /// one conv per block with 8/16/16/32/32 channels, 64 hidden units.
    /// Keeps the 237 → 7 spatial chain of VGG-16.
    pub fn small(num_classes: usize) -> Self {
        Self {
            input_side: crate::INPUT_SIDE,
            blocks: vec![block(1, 8), block(1, 16), block(1, 16), block(1, 32), block(1, 32)],
            hidden: 64,
            num_classes,
        }
    }

    /// Resolves a preset name (`vgg16` or `small`).
    pub fn preset(name: &str, num_classes: usize) -> Option<Self> {
        match name {
            "vgg16" => Some(Self::vgg16(num_classes)),
            "small" => Some(Self::small(num_classes)),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<ModelSpec> {
        if self.num_classes < 2 {
            return Err(invalid("VggConfig", "at least two classes are required"));
        }
        if self.blocks.is_empty() || self.blocks.iter().any(|b| b.convs == 0) {
            return Err(invalid("VggConfig", "every block needs at least one convolution"));
        }
        let mut layers = Vec::new();
        let mut channels = 3;
        let mut side = self.input_side;
        for (b, blk) in self.blocks.iter().enumerate() {
            let b = b + 1;
            for i in 1..=blk.convs {
                layers.push(LayerSpec::conv3x3(&format!("block{b}.conv{i}"), channels, blk.channels));
                layers.push(LayerSpec::relu(&format!("block{b}.relu{i}")));
                channels = blk.channels;
            }
            layers.push(LayerSpec::maxpool2(&format!("block{b}.pool")));
            side /= 2;
        }
        let features = channels * side * side;
        layers.push(LayerSpec::flatten("flatten"));
        layers.push(LayerSpec::dense("head.dense1", features, self.hidden));
        layers.push(LayerSpec::relu("head.relu1"));
        layers.push(LayerSpec::dense("head.dense2", self.hidden, self.num_classes));
        layers.push(LayerSpec::softmax("head.softmax"));
        let class_names = if self.num_classes == CLASS_NAMES.len() {
            CLASS_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.num_classes).map(|i| format!("class{i}")).collect()
        };
        ModelSpec::new([3, self.input_side, self.input_side], layers, class_names)
    }
}

/// VGG-16 backbone with a `25088 → 256 → num_classes` head.
pub fn build_vgg16(num_classes: usize) -> Result<ModelSpec> {
    VggConfig::vgg16(num_classes).build()
}

// ---------------------------------------------------------------------------
// Initialization

fn fill_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from a validated spec")
}

/// Random frozen backbone: He-uniform kernels `±√(6/fan_in)`, zero biases.
pub fn init_backbone(spec: &ModelSpec, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = WeightSet::new();
    for p in spec.parameters().into_iter().filter(|p| !p.trainable) {
        let t = if p.shape.len() == 1 {
            Tensor::zeros(&p.shape)
        } else {
            let fan_in: usize = p.shape[1..].iter().product();
            fill_uniform(&mut rng, &p.shape, libm::sqrtf(6.0 / fan_in as f32))
        };
        set.insert(p.tensor, t).expect("finite init");
    }
    set
}

/// Fresh head: uniform `±√(6/(fan_in+fan_out))` weights, zero biases.
pub fn init_head(spec: &ModelSpec, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = WeightSet::new();
    for p in spec.trainable_parameters() {
        let t = if p.shape.len() == 1 {
            Tensor::zeros(&p.shape)
        } else {
            let bound = libm::sqrtf(6.0 / (p.shape[0] + p.shape[1]) as f32);
            fill_uniform(&mut rng, &p.shape, bound)
        };
        set.insert(p.tensor, t).expect("finite init");
    }
    set
}

// ---------------------------------------------------------------------------
// Forward

/// Backbone output plus what Grad-CAM needs from inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    /// Output of the final max pool, e.g. `[512, 7, 7]`.
    pub features: Tensor,
    /// Post-ReLU activation of the last convolution, e.g. `[512, 14, 14]`.
    pub last_conv_activation: Tensor,
    pub pool_indices: PoolIndices,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub probs: Tensor,
    pub last_conv_activation: Option<Tensor>,
    pub backbone_features: Option<Tensor>,
    pub pool_indices: Option<PoolIndices>,
}

fn check_image(spec: &ModelSpec, image: &Tensor) -> Result<()> {
    if image.shape() != spec.input_shape() {
        return Err(Error::InvalidShape(format!(
            "image {:?} does not match model input {:?}",
            image.shape(),
            spec.input_shape()
        )));
    }
    image.ensure_finite("input image")
}

/// Runs the frozen layers. Only backbone tensors are required in `weights`.
pub fn backbone_forward(spec: &ModelSpec, weights: &WeightSet, image: &Tensor) -> Result<BackboneOutput> {
    validate_against(spec, weights).into_backbone_result()?;
    check_image(spec, image)?;
    let layers = spec.backbone_layers();
    let mut x = image.clone();
    let last = layers.len() - 1;
    for layer in &layers[..last] {
        x = match layer.kind {
            LayerKind::Conv3x3 { .. } => tensor::conv2d(
                &x,
                weights.require(&layer.weight_name())?,
                weights.require(&layer.bias_name())?,
                1,
                1,
            )?,
            LayerKind::Relu => {
                tensor::relu_inplace(&mut x);
                x
            }
            LayerKind::MaxPool2 => tensor::maxpool2d(&x, 2, 2)?.0,
            _ => unreachable!("validated backbone"),
        };
    }
    let (features, pool_indices) = tensor::maxpool2d(&x, 2, 2)?;
    Ok(BackboneOutput {
        features,
        last_conv_activation: x,
        pool_indices,
    })
}

/// Full forward pass. Activations are kept only when `capture` is set.
pub fn forward(spec: &ModelSpec, weights: &WeightSet, image: &Tensor, capture: bool) -> Result<ForwardTrace> {
    validate_against(spec, weights).into_result()?;
    let bb = backbone_forward(spec, weights, image)?;
    let head = head_forward(spec, weights, &bb.features)?;
    let (act, feats, idx) = if capture {
        (Some(bb.last_conv_activation), Some(bb.features), Some(bb.pool_indices))
    } else {
        (None, None, None)
    };
    Ok(ForwardTrace {
        logits: head.logits,
        probs: head.probs,
        last_conv_activation: act,
        backbone_features: feats,
        pool_indices: idx,
    })
}

/// Single-sample head activations, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub logits: Tensor,
    pub probs: Tensor,
    /// Input of the final dense layer (the post-ReLU hidden vector).
    pub hidden: Tensor,
    /// Input of each head layer, in order.
    inputs: Vec<Tensor>,
}

/// flatten → dense → relu → … → dense → softmax over backbone features.
pub fn head_forward(spec: &ModelSpec, weights: &WeightSet, features: &Tensor) -> Result<HeadTrace> {
    if features.shape() != spec.feature_shape() {
        return Err(Error::InvalidShape(format!(
            "features {:?} do not match {:?}",
            features.shape(),
            spec.feature_shape()
        )));
    }
    let mut x = features.flatten();
    let mut inputs = Vec::with_capacity(spec.head_layers().len());
    let mut hidden = x.clone();
    for layer in spec.head_layers() {
        let next = match layer.kind {
            LayerKind::Dense { .. } => {
                hidden = x.clone();
                tensor::dense(
                    &x,
                    weights.require(&layer.weight_name())?,
                    weights.require(&layer.bias_name())?,
                )?
            }
            LayerKind::Relu => tensor::relu(&x),
            _ => unreachable!("validated head"),
        };
        inputs.push(core::mem::replace(&mut x, next));
    }
    x.ensure_finite("logits")?;
    let probs = tensor::softmax(&x);
    Ok(HeadTrace {
        logits: x,
        probs,
        hidden,
        inputs,
    })
}

/// Gradients from [`head_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    /// `(tensor name, gradient)` for each trainable tensor; empty when not
    /// requested.
    pub params: Vec<(String, Tensor)>,
    /// Gradient with respect to the backbone features, shaped like them.
    pub features: Tensor,
}

/// Backpropagates `dlogits` through the head recorded in `trace`.
pub fn head_backward(
    spec: &ModelSpec,
    weights: &WeightSet,
    trace: &HeadTrace,
    dlogits: &Tensor,
    want_params: bool,
) -> Result<HeadGradients> {
    if dlogits.len() != spec.num_classes() {
        return Err(mismatch("head_backward", "classes", spec.num_classes(), dlogits.len()));
    }
    let mut g = dlogits.clone();
    let mut params = Vec::new();
    for (layer, input) in spec.head_layers().iter().zip(&trace.inputs).rev() {
        match layer.kind {
            LayerKind::Dense { .. } => {
                let w = weights.require(&layer.weight_name())?;
                let grads = tensor::dense_vjp(input, w, &g)?;
                if want_params {
                    params.push((layer.bias_name(), grads.bias));
                    params.push((layer.weight_name(), grads.weight));
                }
                g = grads.input;
            }
            LayerKind::Relu => {
                for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            _ => unreachable!("validated head"),
        }
    }
    params.reverse();
    Ok(HeadGradients {
        params,
        features: g.reshape(spec.feature_shape())?,
    })
}

/// Row-batched head activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTrace {
    /// `[batch, classes]`
    pub logits: Tensor,
    /// Row-wise softmax of `logits`.
    pub probs: Tensor,
    inputs: Vec<Tensor>,
}

/// Head forward over `features` shaped `[batch, feature_len]`.
pub fn head_forward_batch(spec: &ModelSpec, weights: &WeightSet, features: &Tensor) -> Result<BatchTrace> {
    let [b, f] = *features.shape() else {
        return Err(mismatch("head_forward_batch", "rank", 2, features.rank()));
    };
    if f != spec.feature_len() {
        return Err(mismatch("head_forward_batch", "features", spec.feature_len(), f));
    }
    let mut x = features.clone();
    let mut inputs = Vec::with_capacity(spec.head_layers().len());
    for layer in spec.head_layers() {
        let next = match layer.kind {
            LayerKind::Dense { .. } => tensor::dense_batch(
                &x,
                weights.require(&layer.weight_name())?,
                weights.require(&layer.bias_name())?,
            )?,
            LayerKind::Relu => tensor::relu(&x),
            _ => unreachable!("validated head"),
        };
        inputs.push(core::mem::replace(&mut x, next));
    }
    let k = spec.num_classes();
    let mut probs = Vec::with_capacity(b * k);
    for row in x.data().chunks_exact(k) {
        probs.extend(tensor::softmax(&Tensor::vector(row.to_vec())).into_data());
    }
    Ok(BatchTrace {
        probs: Tensor::new(vec![b, k], probs)?,
        logits: x,
        inputs,
    })
}

/// Parameter gradients summed over the batch rows of `dlogits` (`[batch, classes]`).
pub fn head_backward_batch(
    spec: &ModelSpec,
    weights: &WeightSet,
    trace: &BatchTrace,
    dlogits: &Tensor,
) -> Result<Vec<(String, Tensor)>> {
    if dlogits.shape() != trace.logits.shape() {
        return Err(Error::InvalidShape(format!(
            "dlogits {:?} vs logits {:?}",
            dlogits.shape(),
            trace.logits.shape()
        )));
    }
    let mut g = dlogits.clone();
    let mut params = Vec::new();
    let layers = spec.head_layers();
    for (i, (layer, input)) in layers.iter().zip(&trace.inputs).enumerate().rev() {
        match layer.kind {
            LayerKind::Dense { .. } => {
                let w = weights.require(&layer.weight_name())?;
                let (gw, gb, gin) = tensor::dense_batch_vjp(input, w, &g, i > 0)?;
                params.push((layer.bias_name(), gb));
                params.push((layer.weight_name(), gw));
                if let Some(gin) = gin {
                    g = gin;
                }
            }
            LayerKind::Relu => {
                for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            _ => unreachable!("validated head"),
        }
    }
    params.reverse();
    Ok(params)
}
