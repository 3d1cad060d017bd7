//! Double-double reference forward pass for finite-difference checks of
//! whole networks. Written independently of the engine's forward code.

use patchcam_core::{Layer, LayerKind, Network, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(Dd { hi: -o.hi, lo: -o.lo })
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi));
        Dd { hi, lo }
    }

    /// Division by a small exact integer such as a pooling area.
    pub fn div_f64(self, d: f64) -> Dd {
        let q1 = self.hi / d;
        let r = self.sub(Dd::from(q1).mul(Dd::from(d)));
        let q2 = r.hi / d;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }
    }

    pub fn gt(self, o: Dd) -> bool {
        self.hi > o.hi || (self.hi == o.hi && self.lo > o.lo)
    }
}

/// ReLU signs and pooling choices seen during one forward pass.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Pattern {
    pub relu: Vec<bool>,
    pub pool: Vec<usize>,
}

#[derive(Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<Dd>,
}

/// Parameter override: (layer path, tensor index, element, value).
pub struct Override<'a> {
    pub path: &'a [usize],
    pub tensor: usize,
    pub index: usize,
    pub value: Dd,
}

/// Parameter values of one tensor, with the override applied if it targets it.
fn values(t: &Tensor, here: &[usize], tensor: usize, ov: &Option<Override>) -> Vec<Dd> {
    let mut v: Vec<Dd> = t.data().iter().map(|&a| Dd::from(a)).collect();
    if let Some(o) = ov {
        if o.path == here && o.tensor == tensor {
            v[o.index] = o.value;
        }
    }
    v
}

fn layer_forward(layer: &Layer, x: Map, here: &mut Vec<usize>, ov: &Option<Override>, pat: &mut Pattern) -> Map {
    match &layer.kind {
        LayerKind::Conv3x3 { kernel, bias } => {
            let co_n = kernel.shape()[0];
            let kv = values(kernel, here, 0, ov);
            let bv = values(bias, here, 1, ov);
            let mut v = vec![Dd::ZERO; co_n * x.h * x.w];
            for co in 0..co_n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = bv[co];
                        for ci in 0..x.c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let k = kv[((co * x.c + ci) * 3 + ky) * 3 + kx];
                                    let s = x.v[(ci * x.h + sy as usize) * x.w + sx as usize];
                                    acc = acc.add(k.mul(s));
                                }
                            }
                        }
                        v[(co * x.h + y) * x.w + xx] = acc;
                    }
                }
            }
            Map {
                c: co_n,
                h: x.h,
                w: x.w,
                v,
            }
        }
        LayerKind::Relu => {
            let v =
                x.v.iter()
                    .map(|&a| {
                        let on = a.gt(Dd::ZERO);
                        pat.relu.push(on);
                        if on {
                            a
                        } else {
                            Dd::ZERO
                        }
                    })
                    .collect();
            Map { v, ..x }
        }
        LayerKind::MaxPool2x2 => {
            let (oh, ow) = (x.h / 2, x.w / 2);
            let mut v = Vec::with_capacity(x.c * oh * ow);
            for c in 0..x.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = 0;
                        let mut best_v = Dd::ZERO;
                        for k in 0..4 {
                            let i = (c * x.h + 2 * oy + k / 2) * x.w + 2 * ox + k % 2;
                            if k == 0 || x.v[i].gt(best_v) {
                                best = k;
                                best_v = x.v[i];
                            }
                        }
                        pat.pool.push(best);
                        v.push(best_v);
                    }
                }
            }
            Map {
                c: x.c,
                h: oh,
                w: ow,
                v,
            }
        }
        LayerKind::Residual(nested) => {
            let skip = x.v.clone();
            let mut y = x;
            for (j, inner) in nested.iter().enumerate() {
                here.push(j);
                y = layer_forward(inner, y, here, ov, pat);
                here.pop();
            }
            let v = y.v.iter().zip(&skip).map(|(a, b)| a.add(*b)).collect();
            Map { v, ..y }
        }
        LayerKind::GlobalAvgPool => {
            let area = (x.h * x.w) as f64;
            let v = (0..x.c)
                .map(|c| {
                    let mut s = Dd::ZERO;
                    for i in 0..x.h * x.w {
                        s = s.add(x.v[c * x.h * x.w + i]);
                    }
                    s.div_f64(area)
                })
                .collect();
            Map { c: x.c, h: 1, w: 1, v }
        }
        LayerKind::Dense { weight, bias } => {
            let (k, n) = (weight.shape()[0], weight.shape()[1]);
            let wv = values(weight, here, 0, ov);
            let bv = values(bias, here, 1, ov);
            let v = (0..k)
                .map(|r| {
                    let mut acc = bv[r];
                    for j in 0..n {
                        acc = acc.add(wv[r * n + j].mul(x.v[j]));
                    }
                    acc
                })
                .collect();
            Map { c: k, h: 1, w: 1, v }
        }
        LayerKind::SoftmaxOutput => x,
    }
}

/// Base forward pass: the input to every top-level layer and the switching
/// pattern of every layer.
pub struct Trace {
    inputs: Vec<Map>,
    patterns: Vec<Pattern>,
}

pub fn trace(net: &Network, image: &Tensor) -> Trace {
    let s = image.shape();
    let mut x = Map {
        c: s[0],
        h: s[1],
        w: s[2],
        v: image.data().iter().map(|&a| Dd::from(a)).collect(),
    };
    let mut inputs = Vec::new();
    let mut patterns = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        inputs.push(x.clone());
        let mut pat = Pattern::default();
        x = layer_forward(layer, x, &mut vec![l], &None, &mut pat);
        patterns.push(pat);
    }
    Trace { inputs, patterns }
}

/// Logits with one parameter replaced, resuming from the cached input of
/// the affected layer. `None` if any ReLU sign or pooling choice differs
/// from the base pass.
pub fn perturbed(net: &Network, base: &Trace, ov: Override) -> Option<Vec<Dd>> {
    let first = ov.path[0];
    let ov = Some(ov);
    let mut x = base.inputs[first].clone();
    for (l, layer) in net.layers.iter().enumerate().skip(first) {
        let mut pat = Pattern::default();
        x = layer_forward(layer, x, &mut vec![l], &ov, &mut pat);
        if pat != base.patterns[l] {
            return None;
        }
    }
    Some(x.v)
}

/// `loss(z_plus) - loss(z_minus)` for softmax cross-entropy, evaluated
/// without cancellation in the loss values themselves.
pub fn xent_difference(z_plus: &[Dd], z_minus: &[Dd], label: usize) -> f64 {
    let m = z_minus.iter().map(|z| z.hi).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z_minus.iter().map(|z| (z.hi - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let dz: Vec<f64> = z_plus
        .iter()
        .zip(z_minus)
        .map(|(a, b)| {
            let d = a.sub(*b);
            d.hi + d.lo
        })
        .collect();
    let s: f64 = e.iter().zip(&dz).map(|(p, d)| p / total * d.exp_m1()).sum();
    s.ln_1p() - dz[label]
}

/// Every parameter address of a network as (layer path, tensor, element count).
pub fn param_addresses(net: &Network) -> Vec<(Vec<usize>, usize, usize)> {
    fn walk(layer: &Layer, path: &mut Vec<usize>, out: &mut Vec<(Vec<usize>, usize, usize)>) {
        match &layer.kind {
            LayerKind::Residual(nested) => {
                for (j, inner) in nested.iter().enumerate() {
                    path.push(j);
                    walk(inner, path, out);
                    path.pop();
                }
            }
            _ => {
                for (t, p) in layer.params().iter().enumerate() {
                    out.push((path.clone(), t, p.len()));
                }
            }
        }
    }
    let mut out = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        let mut path = vec![l];
        walk(layer, &mut path, &mut out);
    }
    out
}

pub fn param_value(net: &Network, path: &[usize], tensor: usize, index: usize) -> f64 {
    let mut layer = &net.layers[path[0]];
    for &j in &path[1..] {
        match &layer.kind {
            LayerKind::Residual(nested) => layer = &nested[j],
            _ => unreachable!("path descends into a non-residual layer"),
        }
    }
    layer.params()[tensor].data()[index]
}
