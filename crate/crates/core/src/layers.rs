//! Forward and hand-written backward passes for every layer the presets use.
//!
//! All ops work on a single sample laid out as `channels x height x width`
//! (or a flat vector after global average pooling). Batching is a loop in
//! the trainer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Stride-1, zero-padded "same" 3x3 cross-correlation.
    /// `kernel` is `[out, in, 3, 3]`, `bias` is `[out]`.
    Conv3x3 {
        kernel: Tensor,
        bias: Tensor,
    },
    Relu,
    /// Non-overlapping 2x2 windows; odd trailing rows/columns are dropped.
    MaxPool2x2,
    /// `x + nested(x)`; the nested stack must preserve the input shape.
    Residual(Vec<Layer>),
    GlobalAvgPool,
    /// `weight` is `[classes, features]`, `bias` is `[classes]`.
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    SoftmaxOutput,
}

/// A layer plus its per-layer training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Multiplier on the base learning rate.
    pub lr_factor: f64,
    /// Frozen layers are skipped by the optimizer entirely.
    pub frozen: bool,
}

impl Layer {
    pub fn new(kind: LayerKind) -> Self {
        Layer {
            kind,
            lr_factor: 1.0,
            frozen: false,
        }
    }

    /// He-initialized convolution: `N(0, sqrt(2 / (in * 9)))`, zero bias.
    pub fn conv3x3(out_channels: usize, in_channels: usize, rng: &mut Rng) -> Self {
        let std = math::sqrt(2.0 / (in_channels * 9) as f64);
        let kernel = (0..out_channels * in_channels * 9)
            .map(|_| std * rng.normal())
            .collect();
        Layer::new(LayerKind::Conv3x3 {
            kernel: Tensor::from_parts(vec![out_channels, in_channels, 3, 3], kernel),
            bias: Tensor::zeros(&[out_channels]),
        })
    }

    /// He-initialized dense layer: `N(0, sqrt(2 / in))`, zero bias.
    pub fn dense(outputs: usize, inputs: usize, rng: &mut Rng) -> Self {
        let std = math::sqrt(2.0 / inputs as f64);
        let weight = (0..outputs * inputs).map(|_| std * rng.normal()).collect();
        Layer::new(LayerKind::Dense {
            weight: Tensor::from_parts(vec![outputs, inputs], weight),
            bias: Tensor::zeros(&[outputs]),
        })
    }

    pub fn relu() -> Self {
        Layer::new(LayerKind::Relu)
    }

    pub fn max_pool() -> Self {
        Layer::new(LayerKind::MaxPool2x2)
    }

    pub fn residual(nested: Vec<Layer>) -> Self {
        Layer::new(LayerKind::Residual(nested))
    }

    pub fn global_avg_pool() -> Self {
        Layer::new(LayerKind::GlobalAvgPool)
    }

    pub fn softmax() -> Self {
        Layer::new(LayerKind::SoftmaxOutput)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv3x3 { .. } => "Conv3x3",
            LayerKind::Relu => "ReLU",
            LayerKind::MaxPool2x2 => "MaxPool2x2",
            LayerKind::Residual(_) => "Residual",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::SoftmaxOutput => "SoftmaxOutput",
        }
    }

    /// Parameter tensors in depth-first order (kernel/weight before bias).
    pub fn params(&self) -> Vec<&Tensor> {
        match &self.kind {
            LayerKind::Conv3x3 { kernel, bias } => vec![kernel, bias],
            LayerKind::Dense { weight, bias } => vec![weight, bias],
            LayerKind::Residual(nested) => nested.iter().flat_map(Layer::params).collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.kind {
            LayerKind::Conv3x3 { kernel, bias } => vec![kernel, bias],
            LayerKind::Dense { weight, bias } => vec![weight, bias],
            LayerKind::Residual(nested) => nested.iter_mut().flat_map(Layer::params_mut).collect(),
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Sets `frozen` on this layer and every nested layer.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        if let LayerKind::Residual(nested) = &mut self.kind {
            for layer in nested {
                layer.set_frozen(frozen);
            }
        }
    }

    /// Output shape for a given input shape, without computing anything.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match &self.kind {
            LayerKind::Conv3x3 { kernel, .. } => {
                let [c, h, w] = expect_rank3(input, "Conv3x3 input")?;
                let ks = kernel.shape();
                if ks[1] != c {
                    return Err(Error::ShapeMismatch {
                        context: "Conv3x3 input channels",
                        expected: vec![ks[1], h, w],
                        found: input.to_vec(),
                    });
                }
                Ok(vec![ks[0], h, w])
            }
            LayerKind::Relu | LayerKind::SoftmaxOutput => Ok(input.to_vec()),
            LayerKind::MaxPool2x2 => {
                let [c, h, w] = expect_rank3(input, "MaxPool2x2 input")?;
                if h < 2 || w < 2 {
                    return Err(pool_too_small(h, w));
                }
                Ok(vec![c, h / 2, w / 2])
            }
            LayerKind::Residual(nested) => {
                let mut shape = input.to_vec();
                for layer in nested {
                    shape = layer.output_shape(&shape)?;
                }
                if shape != input {
                    return Err(Error::ShapeMismatch {
                        context: "Residual branch must preserve shape",
                        expected: input.to_vec(),
                        found: shape,
                    });
                }
                Ok(shape)
            }
            LayerKind::GlobalAvgPool => {
                let [c, _, _] = expect_rank3(input, "GlobalAvgPool input")?;
                Ok(vec![c])
            }
            LayerKind::Dense { weight, .. } => {
                let ws = weight.shape();
                if input != [ws[1]] {
                    return Err(Error::ShapeMismatch {
                        context: "Dense input",
                        expected: vec![ws[1]],
                        found: input.to_vec(),
                    });
                }
                Ok(vec![ws[0]])
            }
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, LayerCache)> {
        match &self.kind {
            LayerKind::Conv3x3 { kernel, bias } => {
                let out = conv3x3_forward(input, kernel, bias)?;
                Ok((out, LayerCache::Conv { input: input.clone() }))
            }
            LayerKind::Relu => Ok((relu_forward(input), LayerCache::Relu { input: input.clone() })),
            LayerKind::MaxPool2x2 => {
                let (out, argmax) = maxpool2x2_forward(input)?;
                Ok((
                    out,
                    LayerCache::MaxPool {
                        input_shape: input.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            LayerKind::Residual(nested) => {
                let mut caches = Vec::with_capacity(nested.len());
                let mut x = input.clone();
                for layer in nested {
                    let (y, cache) = layer.forward(&x)?;
                    caches.push(cache);
                    x = y;
                }
                let out = residual_join(input, &x)?;
                Ok((out, LayerCache::Residual(caches)))
            }
            LayerKind::GlobalAvgPool => {
                let out = gap_forward(input)?;
                Ok((
                    out,
                    LayerCache::Gap {
                        input_shape: input.shape().to_vec(),
                    },
                ))
            }
            LayerKind::Dense { weight, bias } => {
                let out = dense_forward(input, weight, bias)?;
                Ok((out, LayerCache::Dense { input: input.clone() }))
            }
            LayerKind::SoftmaxOutput => {
                let p = softmax(input);
                Ok((p.clone(), LayerCache::Softmax { probabilities: p }))
            }
        }
    }

    /// Backward pass: gradient w.r.t. the layer input plus parameter gradients.
    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor) -> Result<(Tensor, ParamGrads)> {
        match (&self.kind, cache) {
            (LayerKind::Conv3x3 { kernel, .. }, LayerCache::Conv { input }) => {
                let (gi, gk, gb) = conv3x3_backward(input, kernel, grad_out)?;
                Ok((gi, ParamGrads::Conv { kernel: gk, bias: gb }))
            }
            (LayerKind::Relu, LayerCache::Relu { input }) => Ok((relu_backward(input, grad_out)?, ParamGrads::None)),
            (LayerKind::MaxPool2x2, LayerCache::MaxPool { input_shape, argmax }) => {
                Ok((maxpool2x2_backward(input_shape, argmax, grad_out)?, ParamGrads::None))
            }
            (LayerKind::Residual(nested), LayerCache::Residual(caches)) => {
                if nested.len() != caches.len() {
                    return Err(trace_mismatch("Residual"));
                }
                let mut g = grad_out.clone();
                let mut grads = Vec::with_capacity(nested.len());
                for (layer, cache) in nested.iter().zip(caches).rev() {
                    let (gi, pg) = layer.backward(cache, &g)?;
                    grads.push(pg);
                    g = gi;
                }
                grads.reverse();
                Ok((grad_out.add(&g)?, ParamGrads::Residual(grads)))
            }
            (LayerKind::GlobalAvgPool, LayerCache::Gap { input_shape }) => {
                Ok((gap_backward(input_shape, grad_out)?, ParamGrads::None))
            }
            (LayerKind::Dense { weight, .. }, LayerCache::Dense { input }) => {
                let (gi, gw, gb) = dense_backward(input, weight, grad_out)?;
                Ok((gi, ParamGrads::Dense { weight: gw, bias: gb }))
            }
            (LayerKind::SoftmaxOutput, LayerCache::Softmax { probabilities }) => {
                Ok((softmax_backward(probabilities, grad_out)?, ParamGrads::None))
            }
            _ => Err(trace_mismatch(self.name())),
        }
    }
}

/// Values cached by a forward call for the matching backward call.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    Conv {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Residual(Vec<LayerCache>),
    Gap {
        input_shape: Vec<usize>,
    },
    Dense {
        input: Tensor,
    },
    Softmax {
        probabilities: Tensor,
    },
}

/// Parameter gradients, mirroring the layer tree.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrads {
    None,
    Conv { kernel: Tensor, bias: Tensor },
    Dense { weight: Tensor, bias: Tensor },
    Residual(Vec<ParamGrads>),
}

impl ParamGrads {
    pub fn zeros_like(layer: &Layer) -> Self {
        match &layer.kind {
            LayerKind::Conv3x3 { kernel, bias } => ParamGrads::Conv {
                kernel: Tensor::zeros(kernel.shape()),
                bias: Tensor::zeros(bias.shape()),
            },
            LayerKind::Dense { weight, bias } => ParamGrads::Dense {
                weight: Tensor::zeros(weight.shape()),
                bias: Tensor::zeros(bias.shape()),
            },
            LayerKind::Residual(nested) => ParamGrads::Residual(nested.iter().map(ParamGrads::zeros_like).collect()),
            _ => ParamGrads::None,
        }
    }

    /// Same depth-first order as [`Layer::params`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            ParamGrads::None => Vec::new(),
            ParamGrads::Conv { kernel, bias } => vec![kernel, bias],
            ParamGrads::Dense { weight, bias } => vec![weight, bias],
            ParamGrads::Residual(nested) => nested.iter().flat_map(ParamGrads::tensors).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            ParamGrads::None => Vec::new(),
            ParamGrads::Conv { kernel, bias } => vec![kernel, bias],
            ParamGrads::Dense { weight, bias } => vec![weight, bias],
            ParamGrads::Residual(nested) => nested.iter_mut().flat_map(ParamGrads::tensors_mut).collect(),
        }
    }

    /// `self += other`, elementwise over matching trees.
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        let dst = self.tensors_mut();
        let src = other.tensors();
        if dst.len() != src.len() {
            return Err(trace_mismatch("gradient accumulation"));
        }
        for (d, s) in dst.into_iter().zip(src) {
            d.expect_shape(s.shape(), "gradient accumulation")?;
            for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
                *a += b;
            }
        }
        Ok(())
    }
}

fn expect_rank3(shape: &[usize], context: &str) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::InvalidArgument(format!(
            "{context}: expected channels x height x width, got {shape:?}"
        ))),
    }
}

fn pool_too_small(h: usize, w: usize) -> Error {
    Error::InvalidArgument(format!("MaxPool2x2 needs spatial size >= 2x2, got {h}x{w}"))
}

fn trace_mismatch(what: &str) -> Error {
    Error::InvalidArgument(format!("trace does not match layer {what}"))
}

/// Valid output range along one axis for a kernel tap offset `d` in {-1,0,1}.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n.saturating_sub(1) } else { n };
    (lo, hi.max(lo))
}

pub fn conv3x3_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[1] != c_in || ks[2] != 3 || ks[3] != 3 {
        return Err(Error::ShapeMismatch {
            context: "Conv3x3 kernel",
            expected: vec![ks.first().copied().unwrap_or(0), c_in, 3, 3],
            found: ks.to_vec(),
        });
    }
    let c_out = ks[0];
    bias.expect_shape(&[c_out], "Conv3x3 bias")?;
    let plane = h * w;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; c_out * plane];
    for (co, dst) in out.chunks_exact_mut(plane).enumerate() {
        dst.fill(bias.data()[co]);
        for ci in 0..c_in {
            let src = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, w);
                    let wgt = k[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (x0 as isize + dx) as usize;
                        let srow = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
                        let drow = &mut dst[y * w + x0..y * w + x1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c_out, h, w], out))
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub fn conv3x3_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c_in, h, w) = input.dims3()?;
    let c_out = kernel.shape()[0];
    grad_out.expect_shape(&[c_out, h, w], "Conv3x3 upstream gradient")?;
    let plane = h * w;
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gi = vec![0.0; c_in * plane];
    let mut gk = vec![0.0; c_out * c_in * 9];
    let mut gb = vec![0.0; c_out];
    for co in 0..c_out {
        let gplane = &g[co * plane..(co + 1) * plane];
        gb[co] = gplane.iter().sum();
        for ci in 0..c_in {
            let src = &x[ci * plane..(ci + 1) * plane];
            let gsrc = &mut gi[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, w);
                    let idx = ((co * c_in + ci) * 3 + ky) * 3 + kx;
                    let wgt = k[idx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * w + (x0 as isize + dx) as usize;
                        let n = x1 - x0;
                        let grow = &gplane[y * w + x0..y * w + x1];
                        let srow = &src[s0..s0 + n];
                        for (gv, sv) in grow.iter().zip(srow) {
                            acc += gv * sv;
                        }
                        for (d, gv) in gsrc[s0..s0 + n].iter_mut().zip(grow) {
                            *d += wgt * gv;
                        }
                    }
                    gk[idx] = acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![c_in, h, w], gi),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
        Tensor::from_parts(vec![c_out], gb),
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.map2(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Returns the pooled map and, per output element, the flat input index of
/// the selected maximum (first in row-major window order on ties).
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    if h < 2 || w < 2 {
        return Err(pool_too_small(h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out), argmax))
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::ShapeMismatch {
            context: "MaxPool2x2 upstream gradient",
            expected: vec![argmax.len()],
            found: grad_out.shape().to_vec(),
        });
    }
    let mut gi = Tensor::zeros(input_shape);
    let d = gi.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(gi)
}

pub fn gap_forward(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let plane = h * w;
    let out = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::from_parts(vec![c], out))
}

pub fn gap_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = expect_rank3(input_shape, "GlobalAvgPool cache")?;
    grad_out.expect_shape(&[c], "GlobalAvgPool upstream gradient")?;
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for &g in grad_out.data() {
        let v = g / plane as f64;
        data.extend(core::iter::repeat_n(v, plane));
    }
    Ok(Tensor::from_parts(vec![c, h, w], data))
}

pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ws = weight.shape();
    if ws.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "Dense weight must be rank 2, got {ws:?}"
        )));
    }
    let (k, n) = (ws[0], ws[1]);
    input.expect_shape(&[n], "Dense input")?;
    bias.expect_shape(&[k], "Dense bias")?;
    let x = input.data();
    let out = weight
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    Ok(Tensor::from_parts(vec![k], out))
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (k, n) = (weight.shape()[0], weight.shape()[1]);
    input.expect_shape(&[n], "Dense cached input")?;
    grad_out.expect_shape(&[k], "Dense upstream gradient")?;
    let x = input.data();
    let g = grad_out.data();
    let mut gi = vec![0.0; n];
    let mut gw = Vec::with_capacity(k * n);
    for (row, &gv) in weight.data().chunks_exact(n).zip(g) {
        for (d, w) in gi.iter_mut().zip(row) {
            *d += w * gv;
        }
        gw.extend(x.iter().map(|v| gv * v));
    }
    Ok((
        Tensor::from_parts(vec![n], gi),
        Tensor::from_parts(vec![k, n], gw),
        grad_out.clone(),
    ))
}

/// Max-shifted softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    let m = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.data().iter().map(|&z| math::exp(z - m)).collect();
    let s: f64 = e.iter().sum();
    Tensor::from_parts(logits.shape().to_vec(), e.into_iter().map(|v| v / s).collect())
}

pub fn softmax_backward(probabilities: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let dot: f64 = probabilities
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(p, g)| p * g)
        .sum();
    probabilities.map2(grad_out, |p, g| p * (g - dot))
}

/// Softmax probabilities and cross-entropy loss `-ln p[target]`, computed
/// through log-sum-exp so large logits do not overflow.
pub fn softmax_xent(logits: &Tensor, target: usize) -> Result<(Tensor, f64)> {
    let z = logits.data();
    if target >= z.len() {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range for {} logits",
            z.len()
        )));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = math::ln(z.iter().map(|&v| math::exp(v - m)).sum::<f64>()) + m;
    Ok((softmax(logits), lse - z[target]))
}

/// Gradient of [`softmax_xent`] w.r.t. the logits: `p - onehot(target)`.
pub fn softmax_xent_grad(probabilities: &Tensor, target: usize) -> Tensor {
    let mut g = probabilities.clone();
    g.data_mut()[target] -= 1.0;
    g
}

fn residual_join(input: &Tensor, branch: &Tensor) -> Result<Tensor> {
    if input.shape() != branch.shape() {
        return Err(Error::ShapeMismatch {
            context: "Residual branch must preserve shape",
            expected: input.shape().to_vec(),
            found: branch.shape().to_vec(),
        });
    }
    input.add(branch)
}

/// Runs a residual block's forward map directly.
pub fn residual_forward(input: &Tensor, nested: &[Layer]) -> Result<Tensor> {
    let mut x = input.clone();
    for layer in nested {
        x = layer.forward(&x)?.0;
    }
    residual_join(input, &x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn direct_conv(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
        let (ci_n, h, w) = input.dims3().unwrap();
        let co_n = kernel.shape()[0];
        let mut out = vec![0.0; co_n * h * w];
        for co in 0..co_n {
            for y in 0..h {
                for x in 0..w {
                    let mut s = bias.data()[co];
                    for ci in 0..ci_n {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = x as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let v = input.data()[(ci * h + sy as usize) * w + sx as usize];
                                s += kernel.data()[((co * ci_n + ci) * 3 + ky) * 3 + kx] * v;
                            }
                        }
                    }
                    out[(co * h + y) * w + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_delta_kernel_sums_channels() {
        let mut rng = Rng::new(1);
        let input = random(&[3, 5, 4], &mut rng);
        let mut k = vec![0.0; 3 * 9];
        for ci in 0..3 {
            k[ci * 9 + 4] = 1.0;
        }
        let out = conv3x3_forward(&input, &t(&[1, 3, 3, 3], &k), &Tensor::zeros(&[1])).unwrap();
        for p in 0..20 {
            let expected: f64 = (0..3).map(|c| input.data()[c * 20 + p]).sum();
            assert!((out.data()[p] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut rng = Rng::new(2);
        let kernel = random(&[2, 1, 3, 3], &mut rng);
        let out = conv3x3_forward(&Tensor::zeros(&[1, 3, 3]), &kernel, &t(&[2], &[0.5, -1.5])).unwrap();
        assert!(out.data()[..9].iter().all(|&v| v == 0.5));
        assert!(out.data()[9..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_matches_direct_loops_exactly() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let input = random(&[1, 4, 4], &mut rng);
            let kernel = random(&[2, 1, 3, 3], &mut rng);
            let bias = random(&[2], &mut rng);
            let out = conv3x3_forward(&input, &kernel, &bias).unwrap();
            assert_eq!(out.data(), &direct_conv(&input, &kernel, &bias)[..]);
        }
        let input = random(&[3, 5, 7], &mut rng);
        let kernel = random(&[4, 3, 3, 3], &mut rng);
        let bias = random(&[4], &mut rng);
        let out = conv3x3_forward(&input, &kernel, &bias).unwrap();
        assert_eq!(out.data(), &direct_conv(&input, &kernel, &bias)[..]);
    }

    #[test]
    fn conv_rejects_bad_kernel() {
        let r = conv3x3_forward(
            &Tensor::zeros(&[2, 3, 3]),
            &Tensor::zeros(&[1, 1, 3, 3]),
            &Tensor::zeros(&[1]),
        );
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_handles_one_pixel_images() {
        let mut rng = Rng::new(4);
        let input = random(&[2, 1, 1], &mut rng);
        let kernel = random(&[1, 2, 3, 3], &mut rng);
        let out = conv3x3_forward(&input, &kernel, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.data(), &direct_conv(&input, &kernel, &Tensor::zeros(&[1]))[..]);
    }

    #[test]
    fn maxpool_cases() {
        let (out, arg) = maxpool2x2_forward(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (out, _) = maxpool2x2_forward(&Tensor::filled(&[2, 4, 6], 0.3)).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.3));
        // ties resolve to the first element in row-major order
        let (_, arg) = maxpool2x2_forward(&Tensor::filled(&[1, 2, 2], 1.0)).unwrap();
        assert_eq!(arg, vec![0]);
        assert!(maxpool2x2_forward(&Tensor::zeros(&[1, 1, 4])).is_err());
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let mut rng = Rng::new(5);
        let input = random(&[1, 7, 6], &mut rng);
        let (out, _) = maxpool2x2_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(input.data()[(2 * oy + dy) * 6 + 2 * ox + dx]);
                    }
                }
                assert_eq!(out.data()[oy * 3 + ox], m);
            }
        }
    }

    #[test]
    fn gap_cases() {
        assert_eq!(
            gap_forward(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap().data(),
            &[2.5]
        );
        assert!((gap_forward(&Tensor::filled(&[1, 3, 5], 0.7)).unwrap().data()[0] - 0.7).abs() < 1e-15);
        let mut rng = Rng::new(6);
        let a = random(&[2, 3, 3], &mut rng);
        let b = random(&[2, 3, 3], &mut rng);
        let lhs = gap_forward(&a.add(&b).unwrap()).unwrap();
        let rhs = gap_forward(&a).unwrap().add(&gap_forward(&b).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-14);
    }

    #[test]
    fn dense_cases() {
        let mut rng = Rng::new(7);
        let x = random(&[3], &mut rng);
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let w = random(&[3, 5], &mut rng);
        let b = random(&[3], &mut rng);
        assert_eq!(dense_forward(&Tensor::zeros(&[5]), &w, &b).unwrap(), b);
        let x = random(&[5], &mut rng);
        let out = dense_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..5 {
                s += w.data()[i * 5 + j] * x.data()[j];
            }
            assert!((out.data()[i] - (s + b.data()[i])).abs() < 1e-14);
        }
        assert!(dense_forward(&Tensor::zeros(&[4]), &w, &b).is_err());
    }

    #[test]
    fn residual_cases() {
        let mut rng = Rng::new(8);
        let x = random(&[2, 4, 4], &mut rng);
        let zero_conv = Layer::new(LayerKind::Conv3x3 {
            kernel: Tensor::zeros(&[2, 2, 3, 3]),
            bias: Tensor::zeros(&[2]),
        });
        assert_eq!(residual_forward(&x, &[zero_conv]).unwrap(), x);
        let pos = x.map(f64::abs);
        assert_eq!(residual_forward(&pos, &[Layer::relu()]).unwrap(), pos.map(|v| 2.0 * v));
        let conv = Layer::conv3x3(2, 2, &mut rng);
        let out = residual_forward(&x, core::slice::from_ref(&conv)).unwrap();
        let branch = conv.forward(&x).unwrap().0;
        assert!(out.map2(&x, |a, b| a - b).unwrap().max_abs_diff(&branch).unwrap() < 1e-12);
        let widening = Layer::conv3x3(3, 2, &mut rng);
        assert!(matches!(
            residual_forward(&x, &[widening]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_xent_cases() {
        let (p, loss) = softmax_xent(&t(&[2], &[0.3, 0.3]), 0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-15);
        let (p, loss) = softmax_xent(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-15 && p.data()[1] < 1e-300);
        assert!(loss.abs() < 1e-15);
        let (_, loss) = softmax_xent(&t(&[2], &[1.0, -1.0]), 1).unwrap();
        assert!((loss - 2.126_928_011_042_972_5).abs() < 1e-12);
        assert!(softmax_xent(&t(&[2], &[1.0, -1.0]), 2).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let z = random(&[5], &mut rng).map(|v| 30.0 * v);
            let s: f64 = softmax(&z).data().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gradient_propagates_zero() {
        let mut rng = Rng::new(10);
        let layers = [
            Layer::conv3x3(2, 2, &mut rng),
            Layer::relu(),
            Layer::max_pool(),
            Layer::residual(vec![Layer::conv3x3(2, 2, &mut rng)]),
        ];
        let x = random(&[2, 4, 4], &mut rng);
        for layer in &layers {
            let (y, cache) = layer.forward(&x).unwrap();
            let (gi, pg) = layer.backward(&cache, &Tensor::zeros(y.shape())).unwrap();
            assert!(gi.data().iter().all(|&v| v == 0.0));
            for g in pg.tensors() {
                assert!(g.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let (_, cache) = Layer::relu().forward(&Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(Layer::max_pool().backward(&cache, &Tensor::zeros(&[1, 1, 1])).is_err());
    }
}
