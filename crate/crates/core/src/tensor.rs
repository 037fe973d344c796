//! Dense `f32` tensors and the fixed set of kernels the pipeline needs.
//!
//! Every function here is pure. Convolution and batched dense products go
//! through a GEMM; everything else is a plain loop with a fixed reduction
//! order, so repeated calls are bit-identical.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};

/// Largest supported rank.
pub const MAX_RANK: usize = 4;

/// Dense row-major array of `f32` with up to four axes.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape(alloc::format!(
            "rank {} outside 1..={MAX_RANK}",
            shape.len()
        )));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::InvalidShape(alloc::format!(
            "axis {axis} has zero extent in {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(alloc::format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Zero-filled tensor.
    ///
    /// Panics on a shape with zero extents or an unsupported rank; use
    /// [`Tensor::new`] for shapes that come from untrusted input.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor over `data`. Panics if `data` is empty.
    pub fn vector(data: Vec<f32>) -> Self {
        assert!(!data.is_empty(), "vector must hold at least one value");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false; tensors hold at least one value.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::InvalidShape(alloc::format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Flattened copy as a rank-1 tensor.
    pub fn flatten(&self) -> Self {
        Self {
            shape: vec![self.data.len()],
            data: self.data.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(alloc::format!(
                "{context}: element {i} is {}",
                self.data[i]
            ))),
        }
    }

    /// Element at a multi-index. Panics if out of range.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of range for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    /// Returns `(channels, height, width)` for a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(mismatch(op, "rank", 3, self.shape.len())),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| invalid("stack", "no tensors to stack"))?;
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::InvalidShape(alloc::format!(
                    "stack: {:?} does not match {:?}",
                    t.shape,
                    first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(shape, data)
    }

    /// Multiplies every element by `factor` in place.
    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ... ({} more)", self.data.len() - PREVIEW)?;
        }
        f.write_str("]")
    }
}

/// Winning input offsets recorded by [`maxpool2d`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolIndices {
    shape: Vec<usize>,
    offsets: Vec<usize>,
}

impl PoolIndices {
    pub fn new(shape: Vec<usize>, offsets: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != offsets.len() {
            return Err(Error::InvalidShape(alloc::format!(
                "pool indices shape {shape:?} needs {n} offsets, got {}",
                offsets.len()
            )));
        }
        Ok(Self { shape, offsets })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Flat offsets into the pooling input, one per output element.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// Upper bound, in floats, on the im2col scratch tile.
const COL_TILE_FLOATS: usize = 1 << 22;

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[cin, h, w]`, `kernel` is `[cout, cin, kh, kw]`, `bias` is
/// `[cout]`. The kernel is not flipped. Output extents are
/// `floor((h + 2p - kh) / stride) + 1` and likewise for width.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    const OP: &str = "conv2d";
    if stride == 0 {
        return Err(invalid(OP, "stride must be positive"));
    }
    let (cin, h, w) = input.dims3(OP)?;
    let [cout, kcin, kh, kw] = *kernel.shape() else {
        return Err(mismatch(OP, "kernel rank", 4, kernel.rank()));
    };
    if kcin != cin {
        return Err(mismatch(OP, "in_channels", cin, kcin));
    }
    if bias.shape() != [cout] {
        return Err(mismatch(OP, "bias", cout, bias.len()));
    }
    if h + 2 * padding < kh {
        return Err(mismatch(OP, "height", kh, h + 2 * padding));
    }
    if w + 2 * padding < kw {
        return Err(mismatch(OP, "width", kw, w + 2 * padding));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let plane = oh * ow;
    let depth = cin * kh * kw;

    let mut out = Vec::with_capacity(cout * plane);
    for &b in bias.data() {
        out.extend(core::iter::repeat_n(b, plane));
    }

    let x = input.data();
    if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        // Pointwise: the input already is the column matrix.
        unsafe {
            gemm_accumulate(
                cout,
                depth,
                plane,
                kernel.data().as_ptr(),
                depth as isize,
                x.as_ptr(),
                plane as isize,
                out.as_mut_ptr(),
                plane as isize,
            );
        }
        return Tensor::new(vec![cout, oh, ow], out);
    }

    let rows_per_tile = (COL_TILE_FLOATS / (depth * ow)).clamp(1, oh);
    let mut col = vec![0.0f32; depth * rows_per_tile * ow];
    let mut row0 = 0;
    while row0 < oh {
        let rows = rows_per_tile.min(oh - row0);
        let tile = rows * ow;
        im2col_rows(
            x,
            (cin, h, w),
            (kh, kw),
            stride,
            padding,
            row0,
            rows,
            ow,
            &mut col[..depth * tile],
        );
        unsafe {
            gemm_accumulate(
                cout,
                depth,
                tile,
                kernel.data().as_ptr(),
                depth as isize,
                col.as_ptr(),
                tile as isize,
                out.as_mut_ptr().add(row0 * ow),
                plane as isize,
            );
        }
        row0 += rows;
    }
    Tensor::new(vec![cout, oh, ow], out)
}

/// Fills `col` (`[cin*kh*kw, rows*ow]`) with the receptive fields of output
/// rows `row0..row0+rows`.
#[allow(clippy::too_many_arguments)]
fn im2col_rows(
    x: &[f32],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    row0: usize,
    rows: usize,
    ow: usize,
    col: &mut [f32],
) {
    let tile = rows * ow;
    for c in 0..cin {
        let src = &x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let r = (c * kh + i) * kw + j;
                let dst = &mut col[r * tile..(r + 1) * tile];
                // Output columns whose input column lands inside the image.
                let ox_lo = (padding.saturating_sub(j)).div_ceil(stride);
                let ox_hi = if w + padding > j {
                    ((w + padding - j - 1) / stride + 1).min(ow)
                } else {
                    0
                };
                for ry in 0..rows {
                    let oy = row0 + ry;
                    let line = &mut dst[ry * ow..(ry + 1) * ow];
                    let iy = (oy * stride + i) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    line[..ox_lo].fill(0.0);
                    line[ox_hi..].fill(0.0);
                    let ix0 = ox_lo * stride + j - padding;
                    if stride == 1 {
                        line[ox_lo..ox_hi].copy_from_slice(&srow[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (k, v) in line[ox_lo..ox_hi].iter_mut().enumerate() {
                            *v = srow[ix0 + k * stride];
                        }
                    }
                }
            }
        }
    }
}

/// `C[m,n] += A[m,k] · B[k,n]` for row-major operands with unit column
/// stride and the given row strides.
///
/// # Safety
/// Pointers must address the full strided extents described.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_accumulate(
    m: usize,
    k: usize,
    n: usize,
    a: *const f32,
    rsa: isize,
    b: *const f32,
    rsb: isize,
    c: *mut f32,
    rsc: isize,
) {
    matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, 1, b, rsb, 1, 1.0, c, rsc, 1);
}

// ---------------------------------------------------------------------------
// Pooling

/// Max pooling over `window`×`window` patches. Trailing rows and columns
/// that do not fill a window are dropped; ties go to the first element in
/// row-major window order.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    const OP: &str = "maxpool2d";
    if window == 0 || stride == 0 {
        return Err(invalid(OP, "window and stride must be positive"));
    }
    let (c, h, w) = input.dims3(OP)?;
    if h < window {
        return Err(mismatch(OP, "height", window, h));
    }
    if w < window {
        return Err(mismatch(OP, "width", window, w));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut offsets = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..window {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    for off in row..row + window {
                        if x[off] > x[best] {
                            best = off;
                        }
                    }
                }
                out.push(x[best]);
                offsets.push(best);
            }
        }
    }
    let shape = vec![c, oh, ow];
    Ok((Tensor::new(shape.clone(), out)?, PoolIndices::new(shape, offsets)?))
}

/// Scatters `grad_out` back to the winning input cells recorded in `indices`.
pub fn maxpool2d_backward(grad_out: &Tensor, indices: &PoolIndices, input_shape: &[usize]) -> Result<Tensor> {
    const OP: &str = "maxpool2d_backward";
    if grad_out.shape() != indices.shape() {
        return Err(Error::InvalidShape(alloc::format!(
            "{OP}: gradient {:?} vs indices {:?}",
            grad_out.shape(),
            indices.shape()
        )));
    }
    let n = check_shape(input_shape)?;
    let mut grad = vec![0.0f32; n];
    for (&off, &g) in indices.offsets().iter().zip(grad_out.data()) {
        let slot = grad.get_mut(off).ok_or(Error::IndexOutOfRange {
            op: OP,
            offset: off,
            len: n,
        })?;
        *slot += g;
    }
    Tensor::new(input_shape.to_vec(), grad)
}

// ---------------------------------------------------------------------------
// Elementwise

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_inplace(&mut out);
    out
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// 1 where the input is strictly positive, 0 elsewhere (subgradient 0 at 0).
pub fn relu_mask(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
    }
}

/// Numerically stable softmax over all elements of `logits`.
///
/// Exponentials and the normalizer are evaluated in `f64`. Probabilities
/// below the smallest normal `f32` are flushed to zero: subnormals carry no
/// useful signal here but make every product they reach in backprop slow.
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.data.iter().map(|&z| libm::exp(z as f64 - max)).collect();
    let sum: f64 = exps.iter().sum();
    let prob = |e: f64| {
        let p = (e / sum) as f32;
        if p < f32::MIN_POSITIVE {
            0.0
        } else {
            p
        }
    };
    Tensor {
        shape: logits.shape.clone(),
        data: exps.iter().map(|&e| prob(e)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Dense

/// Dot product with eight independent partial sums, combined in a fixed order.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn dense_dims(op: &'static str, weight: &Tensor) -> Result<(usize, usize)> {
    match *weight.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(mismatch(op, "weight rank", 2, weight.rank())),
    }
}

/// `out = weight · input + bias`. `input` may have any shape; it is read
/// flat.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "dense";
    let (m, n) = dense_dims(OP, weight)?;
    if input.len() != n {
        return Err(mismatch(OP, "in_features", n, input.len()));
    }
    if bias.len() != m {
        return Err(mismatch(OP, "out_features", m, bias.len()));
    }
    let x = input.data();
    let out = weight
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, &b)| b + dot(row, x))
        .collect();
    Tensor::new(vec![m], out)
}

/// Gradients of a dense layer given the upstream gradient `grad_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

pub fn dense_vjp(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    const OP: &str = "dense_vjp";
    let (m, n) = dense_dims(OP, weight)?;
    if input.len() != n {
        return Err(mismatch(OP, "in_features", n, input.len()));
    }
    if grad_out.len() != m {
        return Err(mismatch(OP, "out_features", m, grad_out.len()));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut gw = Vec::with_capacity(m * n);
    for &gi in g {
        gw.extend(x.iter().map(|&xj| gi * xj));
    }
    let mut gin = vec![0.0f32; n];
    for (row, &gi) in weight.data().chunks_exact(n).zip(g) {
        for (acc, &wij) in gin.iter_mut().zip(row) {
            *acc += wij * gi;
        }
    }
    Ok(DenseGrads {
        weight: Tensor::new(vec![m, n], gw)?,
        bias: Tensor::new(vec![m], g.to_vec())?,
        input: Tensor::new(input.shape().to_vec(), gin)?,
    })
}

/// Row-batched dense layer: `x` is `[b, n]`, result `[b, m]`.
pub fn dense_batch(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "dense_batch";
    let (m, n) = dense_dims(OP, weight)?;
    let [b, xn] = *x.shape() else {
        return Err(mismatch(OP, "input rank", 2, x.rank()));
    };
    if xn != n {
        return Err(mismatch(OP, "in_features", n, xn));
    }
    if bias.len() != m {
        return Err(mismatch(OP, "out_features", m, bias.len()));
    }
    let mut out = Vec::with_capacity(b * m);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    // out[b,m] += x[b,n] · weightᵀ[n,m]
    unsafe {
        matrixmultiply::sgemm(
            b,
            n,
            m,
            1.0,
            x.data().as_ptr(),
            n as isize,
            1,
            weight.data().as_ptr(),
            1,
            n as isize,
            1.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
    Tensor::new(vec![b, m], out)
}

/// Batched dense gradients summed over the batch. `grad_out` is `[b, m]`.
/// The input gradient (`[b, n]`) is only formed when `want_input` is set.
pub fn dense_batch_vjp(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    const OP: &str = "dense_batch_vjp";
    let (m, n) = dense_dims(OP, weight)?;
    let [b, xn] = *x.shape() else {
        return Err(mismatch(OP, "input rank", 2, x.rank()));
    };
    if xn != n {
        return Err(mismatch(OP, "in_features", n, xn));
    }
    if grad_out.shape() != [b, m] {
        return Err(mismatch(OP, "grad rows", b * m, grad_out.len()));
    }
    let g = grad_out.data();
    let mut gw = vec![0.0f32; m * n];
    // gw[m,n] = gᵀ[m,b] · x[b,n]
    unsafe {
        matrixmultiply::sgemm(
            m,
            b,
            n,
            1.0,
            g.as_ptr(),
            1,
            m as isize,
            x.data().as_ptr(),
            n as isize,
            1,
            0.0,
            gw.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let mut gb = vec![0.0f32; m];
    for row in g.chunks_exact(m) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let gin = if want_input {
        let mut gi = vec![0.0f32; b * n];
        // gi[b,n] = g[b,m] · weight[m,n]
        unsafe {
            matrixmultiply::sgemm(
                b,
                m,
                n,
                1.0,
                g.as_ptr(),
                m as isize,
                1,
                weight.data().as_ptr(),
                n as isize,
                1,
                0.0,
                gi.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Some(Tensor::new(vec![b, n], gi)?)
    } else {
        None
    };
    Ok((Tensor::new(vec![m, n], gw)?, Tensor::new(vec![m], gb)?, gin))
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear resize of a `[c, h, w]` image using half-pixel centers
/// (`src = (dst + 0.5) * in / out - 0.5`, clamped to the valid range).
pub fn bilinear_resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    const OP: &str = "bilinear_resize";
    let (c, h, w) = image.dims3(OP)?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid(OP, "output extents must be positive"));
    }
    let ys = sample_axis(h, out_h);
    let xs = sample_axis(w, out_w);
    let x = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            let top = &src[y0 * w..(y0 + 1) * w];
            let bottom = &src[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &xs {
                let t = lerp(top[x0], top[x1], fx);
                let b = lerp(bottom[x0], bottom[x1], fx);
                out.push(lerp(t, b, fy));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // Exact when a == b, which keeps constant images constant.
    a + (b - a) * t
}

fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = libm::floor(src) as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}
