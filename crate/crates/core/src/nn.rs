//! Manually differentiated layers, the parameter store and plain SGD.
//!
//! Every layer has a forward that returns its output plus a cache, and a
//! backward that consumes the cache, accumulates parameter gradients into a
//! [`GradStore`] and returns the gradient w.r.t. its input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, View};
use crate::rng::Rng;
use crate::spectral::{apply_global_filter, global_filter_backward, GlobalFilter};
use crate::tensor::{ComplexTensor, Tensor};

pub const LAYERNORM_EPS: f64 = 1e-6;

/// `sqrt(2 / pi)`, the constant of the tanh GELU approximation.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore {
            grads: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        self.grads[id.0].add_assign(g);
    }

    fn slot(&mut self, id: ParamId) -> &mut [f64] {
        self.grads[id.0].data_mut()
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            batch_size: 48,
            epochs: 30,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("sgd.learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("sgd.weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("sgd.batch_size and sgd.epochs must be positive".into()));
        }
        Ok(())
    }
}

/// `w <- w - lr * (g + wd * w)` for every parameter that is not frozen.
pub fn sgd_step(store: &mut ParamStore, grads: &GradStore, lr: f64, weight_decay: f64) {
    for (p, g) in store.params.iter_mut().zip(&grads.grads) {
        if p.frozen {
            continue;
        }
        for (w, &gv) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (gv + weight_decay * *w);
        }
    }
}

// ---------------------------------------------------------------------------
// conv3x3

fn conv_dims(op: &'static str, x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (cin, h, wd) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(op, format!("input must be [C, H, W], got {s:?}"))),
    };
    match w.shape() {
        [cout, wc, 3, 3] if *wc == cin => Ok((cin, h, wd, *cout)),
        s => Err(Error::dim(op, x.shape(), s)),
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let p = ho * wo;
    let mut cols = vec![0.0; cin * 9 * p];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let p = ho * wo;
    let mut x = vec![0.0; cin * h * w];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3x3 cross-correlation, zero padding 1, output extent `ceil(H / stride)`.
pub fn conv3x3_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("conv3x3: stride {stride} not in {{1, 2}}")));
    }
    let (cin, h, wd, cout) = conv_dims("conv3x3_forward", x, w)?;
    if bias.shape() != [cout] {
        return Err(Error::dim("conv3x3_forward", bias.shape(), &[cout]));
    }
    let (cols, ho, wo) = im2col(x.data(), cin, h, wd, stride);
    let p = ho * wo;
    let mut out = vec![0.0; cout * p];
    for (co, chunk) in out.chunks_mut(p).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias.data()[co]);
    }
    gemm(
        1.0,
        View::row_major(w.data(), cout, cin * 9),
        View::row_major(&cols, cin * 9, p),
        1.0,
        &mut out,
    );
    Tensor::new(&[cout, ho, wo], out)
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub x: Tensor,
    pub stride: usize,
}

/// Returns `(grad_x, grad_w, grad_bias)`.
pub fn conv3x3_backward(
    cache: &ConvCache,
    w: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, h, wd, cout) = conv_dims("conv3x3_backward", &cache.x, w)?;
    let stride = cache.stride;
    let (cols, ho, wo) = im2col(cache.x.data(), cin, h, wd, stride);
    let p = ho * wo;
    if grad_out.shape() != [cout, ho, wo] {
        return Err(Error::dim("conv3x3_backward", grad_out.shape(), &[cout, ho, wo]));
    }
    let gy = View::row_major(grad_out.data(), cout, p);
    let mut gw = vec![0.0; cout * cin * 9];
    gemm(1.0, gy, View::row_major(&cols, cin * 9, p).t(), 0.0, &mut gw);
    let mut gcols = vec![0.0; cin * 9 * p];
    gemm(1.0, View::row_major(w.data(), cout, cin * 9).t(), gy, 0.0, &mut gcols);
    let gx = col2im(&gcols, cin, h, wd, stride);
    let gb: Vec<f64> = grad_out.data().chunks(p).map(|c| c.iter().sum()).collect();
    Ok((
        Tensor::new(&[cin, h, wd], gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(&[cout], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// linear

/// Rows/extent view of a linear-layer input: `(n, din, channel_major)`.
///
/// `[Din]` and `[N, Din]` are row batches; `[Din, H, W]` mixes channels at every position.
fn linear_layout(x: &Tensor, din: usize) -> Result<(usize, bool)> {
    match x.shape() {
        [d] if *d == din => Ok((1, false)),
        [n, d] if *d == din => Ok((*n, false)),
        [d, h, w] if *d == din => Ok((h * w, true)),
        s => Err(Error::dim("linear", s, &[din])),
    }
}

fn linear_out_shape(x: &Tensor, dout: usize) -> Vec<usize> {
    match x.shape() {
        [_] => vec![dout],
        [n, _] => vec![*n, dout],
        [_, h, w] => vec![dout, *h, *w],
        _ => unreachable!(),
    }
}

/// `y = x W + b` with `W: [Din, Dout]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (din, dout) = match w.shape() {
        [i, o] => (*i, *o),
        s => return Err(Error::shape("linear", format!("weight must be 2-D, got {s:?}"))),
    };
    if b.shape() != [dout] {
        return Err(Error::dim("linear", b.shape(), &[dout]));
    }
    let (n, channel_major) = linear_layout(x, din)?;
    let wv = View::row_major(w.data(), din, dout);
    let mut out = vec![0.0; n * dout];
    if channel_major {
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        gemm(1.0, wv.t(), View::row_major(x.data(), din, n), 1.0, &mut out);
    } else {
        for chunk in out.chunks_mut(dout) {
            chunk.copy_from_slice(b.data());
        }
        gemm(1.0, View::row_major(x.data(), n, din), wv, 1.0, &mut out);
    }
    Tensor::new(&linear_out_shape(x, dout), out)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let (n, channel_major) = linear_layout(x, din)?;
    if grad_out.len() != n * dout {
        return Err(Error::dim("linear_backward", grad_out.shape(), &[n, dout]));
    }
    let wv = View::row_major(w.data(), din, dout);
    let mut gw = vec![0.0; din * dout];
    let mut gx = vec![0.0; n * din];
    let mut gb = vec![0.0; dout];
    if channel_major {
        let xv = View::row_major(x.data(), din, n);
        let gy = View::row_major(grad_out.data(), dout, n);
        gemm(1.0, xv, gy.t(), 0.0, &mut gw);
        gemm(1.0, wv, gy, 0.0, &mut gx);
        for (o, chunk) in grad_out.data().chunks(n).enumerate() {
            gb[o] = chunk.iter().sum();
        }
    } else {
        let xv = View::row_major(x.data(), n, din);
        let gy = View::row_major(grad_out.data(), n, dout);
        gemm(1.0, xv.t(), gy, 0.0, &mut gw);
        gemm(1.0, gy, wv.t(), 0.0, &mut gx);
        for row in grad_out.data().chunks(dout) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(&[din, dout], gw)?,
        Tensor::new(&[dout], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// layernorm

/// Which axis a layernorm normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxis {
    /// Last axis of any tensor.
    Last,
    /// Leading channel axis of a `[C, H, W]` map, independently at every position.
    Channel,
    /// All of a `[C, H, W]` map at once, with a per-channel affine.
    Sample,
}

/// `(outer, d, inner)` such that element `j` of group `(o, i)` sits at `(o * d + j) * inner + i`.
fn norm_groups(x: &Tensor, axis: NormAxis) -> Result<(usize, usize, usize)> {
    match axis {
        NormAxis::Last => {
            let d = *x.shape().last().ok_or_else(|| Error::shape("layernorm", "scalar input"))?;
            Ok((x.len() / d.max(1), d, 1))
        }
        NormAxis::Channel | NormAxis::Sample => match x.shape() {
            [c, h, w] => Ok((1, *c, h * w)),
            s => Err(Error::shape("layernorm", format!("channel axis needs [C, H, W], got {s:?}"))),
        },
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub axis: NormAxis,
}

pub fn layernorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    axis: NormAxis,
) -> Result<(Tensor, LayerNormCache)> {
    let (outer, d, inner) = norm_groups(x, axis)?;
    if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim("layernorm", x.shape(), gamma.shape()));
    }
    let src = x.data();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(outer * inner);
    if axis == NormAxis::Sample {
        let n = src.len() as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
        inv_std.push(is);
        for (k, v) in src.iter().enumerate() {
            let j = k / inner;
            xhat[k] = (v - mean) * is;
            y[k] = gamma.data()[j] * xhat[k] + beta.data()[j];
        }
    }
    for o in 0..outer {
        if axis == NormAxis::Sample {
            break;
        }
        for i in 0..inner {
            let at = |j: usize| (o * d + j) * inner + i;
            let mean = (0..d).map(|j| src[at(j)]).sum::<f64>() / d as f64;
            let var = (0..d).map(|j| (src[at(j)] - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let xh = (src[at(j)] - mean) * is;
                xhat[at(j)] = xh;
                y[at(j)] = gamma.data()[j] * xh + beta.data()[j];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        LayerNormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
            axis,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layernorm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (outer, d, inner) = norm_groups(&cache.xhat, cache.axis)?;
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::dim("layernorm_backward", grad_out.shape(), cache.xhat.shape()));
    }
    let xhat = cache.xhat.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; g.len()];
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    if cache.axis == NormAxis::Sample {
        let is = cache.inv_std[0];
        let n = g.len() as f64;
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for k in 0..g.len() {
            let j = k / inner;
            let gh = g[k] * gamma.data()[j];
            sum_g += gh;
            sum_gx += gh * xhat[k];
            ggamma[j] += g[k] * xhat[k];
            gbeta[j] += g[k];
        }
        for k in 0..g.len() {
            let gh = g[k] * gamma.data()[k / inner];
            gx[k] = is / n * (n * gh - sum_g - xhat[k] * sum_gx);
        }
    }
    for o in 0..outer {
        if cache.axis == NormAxis::Sample {
            break;
        }
        for i in 0..inner {
            let at = |j: usize| (o * d + j) * inner + i;
            let is = cache.inv_std[o * inner + i];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for j in 0..d {
                let gh = g[at(j)] * gamma.data()[j];
                sum_g += gh;
                sum_gx += gh * xhat[at(j)];
                ggamma[j] += g[at(j)] * xhat[at(j)];
                gbeta[j] += g[at(j)];
            }
            let df = d as f64;
            for j in 0..d {
                let gh = g[at(j)] * gamma.data()[j];
                gx[at(j)] = is / df * (df * gh - sum_g - xhat[at(j)] * sum_gx);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), gx)?,
        Tensor::new(&[d], ggamma)?,
        Tensor::new(&[d], gbeta)?,
    ))
}

// ---------------------------------------------------------------------------
// elementwise and pooling

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_with(grad_out, "relu_backward", |v, g| if v > 0.0 { g } else { 0.0 })
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

pub fn gelu_forward(x: &Tensor) -> Tensor {
    x.map(gelu)
}

pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.zip_with(grad_out, "gelu_backward", |v, g| g * gelu_grad(v))
}

/// Global spatial mean per channel: `[C, H, W] -> [C]`.
pub fn avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (c, p) = match x.shape() {
        [c, h, w] => (*c, h * w),
        s => return Err(Error::shape("avg_pool", format!("expected [C, H, W], got {s:?}"))),
    };
    let out = x.data().chunks(p).map(|ch| ch.iter().sum::<f64>() / p as f64).collect();
    Tensor::new(&[c], out)
}

pub fn avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, p) = match input_shape {
        [c, h, w] => (*c, h * w),
        s => return Err(Error::shape("avg_pool_backward", format!("bad input shape {s:?}"))),
    };
    if grad_out.shape() != [c] {
        return Err(Error::dim("avg_pool_backward", grad_out.shape(), &[c]));
    }
    let mut gx = Vec::with_capacity(c * p);
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat_n(g / p as f64, p));
    }
    Tensor::new(input_shape, gx)
}

/// `z = a * (r + g) + b`.
pub fn scale_shift_forward(r: &Tensor, g: &Tensor, a: f64, b: f64) -> Result<Tensor> {
    r.zip_with(g, "scale_shift", |x, y| a * (x + y) + b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleShiftGrads {
    pub grad_r: Tensor,
    pub grad_g: Tensor,
    pub grad_a: f64,
    pub grad_b: f64,
}

pub fn scale_shift_backward(r: &Tensor, g: &Tensor, a: f64, grad_out: &Tensor) -> Result<ScaleShiftGrads> {
    if r.shape() != g.shape() || r.shape() != grad_out.shape() {
        return Err(Error::dim("scale_shift_backward", r.shape(), grad_out.shape()));
    }
    let mut grad_a = 0.0;
    let mut grad_b = 0.0;
    for ((x, y), go) in r.data().iter().zip(g.data()).zip(grad_out.data()) {
        grad_a += go * (x + y);
        grad_b += go;
    }
    let gr = grad_out.scale(a);
    Ok(ScaleShiftGrads {
        grad_g: gr.clone(),
        grad_r: gr,
        grad_a,
        grad_b,
    })
}

// ---------------------------------------------------------------------------
// Layer: parameterized single-input layers over a ParamStore

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Linear,
    Relu,
    Gelu,
    LayerNorm,
    GlobalFilter,
    ScaleShift,
    AvgPool,
    Downsample,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] = [
        LayerKind::Conv3x3,
        LayerKind::Linear,
        LayerKind::Relu,
        LayerKind::Gelu,
        LayerKind::LayerNorm,
        LayerKind::GlobalFilter,
        LayerKind::ScaleShift,
        LayerKind::AvgPool,
        LayerKind::Downsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::Gelu => "gelu",
            LayerKind::LayerNorm => "layernorm",
            LayerKind::GlobalFilter => "global_filter",
            LayerKind::ScaleShift => "scale_shift",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::Downsample => "downsample",
        }
    }

    pub fn parse(s: &str) -> Option<LayerKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv3x3 { w: ParamId, b: ParamId, stride: usize },
    /// Stride-2 3x3 convolution used at stage transitions.
    Downsample { w: ParamId, b: ParamId },
    Linear { w: ParamId, b: ParamId },
    Relu,
    Gelu,
    LayerNorm { gamma: ParamId, beta: ParamId, axis: NormAxis },
    GlobalFilter { re: ParamId, im: ParamId, height: usize, width: usize },
    /// `a * x + b` with scalar `a`, `b`: the single-input form of the fusion layer.
    ScaleShift { a: ParamId, b: ParamId },
    AvgPool,
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(Tensor),
    Conv(ConvCache),
    LayerNorm(LayerNormCache),
    Shape(Vec<usize>),
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv3x3 { .. } => LayerKind::Conv3x3,
            Layer::Downsample { .. } => LayerKind::Downsample,
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::Relu => LayerKind::Relu,
            Layer::Gelu => LayerKind::Gelu,
            Layer::LayerNorm { .. } => LayerKind::LayerNorm,
            Layer::GlobalFilter { .. } => LayerKind::GlobalFilter,
            Layer::ScaleShift { .. } => LayerKind::ScaleShift,
            Layer::AvgPool => LayerKind::AvgPool,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match *self {
            Layer::Conv3x3 { w, b, .. } | Layer::Downsample { w, b } | Layer::Linear { w, b } => {
                vec![w, b]
            }
            Layer::LayerNorm { gamma, beta, .. } => vec![gamma, beta],
            Layer::GlobalFilter { re, im, .. } => vec![re, im],
            Layer::ScaleShift { a, b } => vec![a, b],
            Layer::Relu | Layer::Gelu | Layer::AvgPool => vec![],
        }
    }

    pub fn conv(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
        let (w, b) = conv_params(store, rng, name, cin, cout);
        if stride == 2 {
            Layer::Downsample { w, b }
        } else {
            Layer::Conv3x3 { w, b, stride }
        }
    }

    pub fn linear(store: &mut ParamStore, rng: &mut Rng, name: &str, din: usize, dout: usize) -> Layer {
        let std = (1.0 / din as f64).sqrt();
        let w = store.add(format!("{name}.weight"), rng.normal(&[din, dout]).scale(std));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Layer::Linear { w, b }
    }

    pub fn layernorm(store: &mut ParamStore, name: &str, d: usize, axis: NormAxis) -> Layer {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Layer::LayerNorm { gamma, beta, axis }
    }

    /// Global filter with coefficients drawn from `N(0, std^2)`.
    pub fn global_filter(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        std: f64,
    ) -> Layer {
        let shape = [channels, height, GlobalFilter::half_width(width)];
        let re = store.add(format!("{name}.re"), rng.normal(&shape).scale(std));
        let im = store.add(format!("{name}.im"), rng.normal(&shape).scale(std));
        Layer::GlobalFilter { re, im, height, width }
    }

    pub fn scale_shift(store: &mut ParamStore, name: &str) -> Layer {
        let a = store.add(format!("{name}.a"), Tensor::full(&[1], 1.0));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1]));
        Layer::ScaleShift { a, b }
    }

    fn filter(store: &ParamStore, re: ParamId, im: ParamId, height: usize, width: usize) -> Result<GlobalFilter> {
        let kre = store.get(re);
        let k = ComplexTensor::new(kre.shape(), kre.data().to_vec(), store.get(im).data().to_vec())?;
        GlobalFilter::new(k, height, width)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        match *self {
            Layer::Conv3x3 { w, b, stride } => {
                let y = conv3x3_forward(x, store.get(w), store.get(b), stride)?;
                Ok((y, LayerCache::Conv(ConvCache { x: x.clone(), stride })))
            }
            Layer::Downsample { w, b } => {
                let y = conv3x3_forward(x, store.get(w), store.get(b), 2)?;
                Ok((y, LayerCache::Conv(ConvCache { x: x.clone(), stride: 2 })))
            }
            Layer::Linear { w, b } => {
                let y = linear_forward(x, store.get(w), store.get(b))?;
                Ok((y, LayerCache::Input(x.clone())))
            }
            Layer::Relu => Ok((relu_forward(x), LayerCache::Input(x.clone()))),
            Layer::Gelu => Ok((gelu_forward(x), LayerCache::Input(x.clone()))),
            Layer::LayerNorm { gamma, beta, axis } => {
                let (y, cache) = layernorm_forward(x, store.get(gamma), store.get(beta), axis)?;
                Ok((y, LayerCache::LayerNorm(cache)))
            }
            Layer::GlobalFilter { re, im, height, width } => {
                let k = Self::filter(store, re, im, height, width)?;
                Ok((apply_global_filter(x, &k)?, LayerCache::Input(x.clone())))
            }
            Layer::ScaleShift { a, b } => {
                let (a, b) = (store.get(a).data()[0], store.get(b).data()[0]);
                Ok((x.map(|v| a * v + b), LayerCache::Input(x.clone())))
            }
            Layer::AvgPool => Ok((avg_pool_forward(x)?, LayerCache::Shape(x.shape().to_vec()))),
        }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerCache,
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let bad = || Error::shape("Layer::backward", "cache does not match layer");
        match (self, cache) {
            (Layer::Conv3x3 { w, b, .. } | Layer::Downsample { w, b }, LayerCache::Conv(c)) => {
                let (gx, gw, gb) = conv3x3_backward(c, store.get(*w), grad_out)?;
                grads.accumulate(*w, &gw);
                grads.accumulate(*b, &gb);
                Ok(gx)
            }
            (Layer::Linear { w, b }, LayerCache::Input(x)) => {
                let (gx, gw, gb) = linear_backward(x, store.get(*w), grad_out)?;
                grads.accumulate(*w, &gw);
                grads.accumulate(*b, &gb);
                Ok(gx)
            }
            (Layer::Relu, LayerCache::Input(x)) => relu_backward(x, grad_out),
            (Layer::Gelu, LayerCache::Input(x)) => gelu_backward(x, grad_out),
            (Layer::LayerNorm { gamma, beta, .. }, LayerCache::LayerNorm(c)) => {
                let (gx, gg, gb) = layernorm_backward(c, store.get(*gamma), grad_out)?;
                grads.accumulate(*gamma, &gg);
                grads.accumulate(*beta, &gb);
                Ok(gx)
            }
            (Layer::GlobalFilter { re, im, height, width }, LayerCache::Input(x)) => {
                let k = Self::filter(store, *re, *im, *height, *width)?;
                let (gx, gk) = global_filter_backward(x, &k, grad_out)?;
                for (slot, part) in [(*re, &gk.re), (*im, &gk.im)] {
                    for (acc, v) in grads.slot(slot).iter_mut().zip(part) {
                        *acc += v;
                    }
                }
                Ok(gx)
            }
            (Layer::ScaleShift { a, b }, LayerCache::Input(x)) => {
                let av = store.get(*a).data()[0];
                let ga: f64 = x.data().iter().zip(grad_out.data()).map(|(v, g)| v * g).sum();
                grads.slot(*a)[0] += ga;
                grads.slot(*b)[0] += grad_out.sum();
                Ok(grad_out.scale(av))
            }
            (Layer::AvgPool, LayerCache::Shape(shape)) => avg_pool_backward(shape, grad_out),
            _ => Err(bad()),
        }
    }
}

fn conv_params(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> (ParamId, ParamId) {
    let std = (2.0 / (cin * 9) as f64).sqrt();
    let w = store.add(format!("{name}.weight"), rng.normal(&[cout, cin, 3, 3]).scale(std));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
    (w, b)
}

/// A chain of single-input layers.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(store, &h)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        caches: &[LayerCache],
        grad_out: &Tensor,
        grads: &mut GradStore,
    ) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            g = layer.backward(store, cache, &g, grads)?;
        }
        Ok(g)
    }
}
