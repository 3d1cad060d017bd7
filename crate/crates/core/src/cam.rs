//! Class activation maps.
//!
//! For a CAM-ready network (trunk -> GAP -> Dense -> Softmax) the map for
//! class `c` is the Dense row `w_c` applied to the pre-GAP feature maps at
//! every spatial position: `cam_c(y, x) = sum_i w_{c,i} * f_i(y, x)`. Because
//! GAP and Dense are both linear, `mean(cam_c) + b_c` equals logit `c`,
//! which [`cam_logit_residual`] checks.

use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::network::{ForwardTrace, Network};
use crate::synth::BBox;
use crate::tensor::Tensor;

/// Anything that can produce a forward trace and expose its output layer.
pub trait CamModel {
    fn forward_trace(&self, image: &Tensor) -> Result<ForwardTrace>;
    /// Output-layer `(weight [classes x features], bias [classes])`.
    fn output_layer(&self) -> Result<(&Tensor, &Tensor)>;
}

impl CamModel for Network {
    fn forward_trace(&self, image: &Tensor) -> Result<ForwardTrace> {
        self.forward(image)
    }

    fn output_layer(&self) -> Result<(&Tensor, &Tensor)> {
        self.head()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `1 x h x w`.
    pub values: Tensor,
    pub class_index: usize,
    /// `(height, width)` of the image the map was computed from.
    pub source_size: (usize, usize),
    pub normalized: bool,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Weighted sum of feature maps with one output-layer row, summed in
/// channel order. Bias is not included.
pub fn weighted_feature_sum(features: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (n, h, w) = features.dims3()?;
    if weights.len() != n {
        return Err(Error::ShapeMismatch {
            context: "CAM weights vs feature channels",
            expected: vec![n],
            found: vec![weights.len()],
        });
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (f, &wi) in features.data().chunks_exact(plane).zip(weights) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += wi * v;
        }
    }
    Ok(Tensor::from_parts(vec![1, h, w], out))
}

/// Runs exactly one forward pass and projects the output-layer row of
/// `class_index` (or of the predicted class) onto the pre-GAP features.
pub fn compute_cam<M: CamModel + ?Sized>(model: &M, image: &Tensor, class_index: Option<usize>) -> Result<Heatmap> {
    let (weight, _) = model.output_layer()?;
    let (k, n) = (weight.shape()[0], weight.shape()[1]);
    if let Some(c) = class_index {
        if c >= k {
            return Err(Error::InvalidArgument(format!(
                "class index {c} out of range for {k} classes"
            )));
        }
    }
    let (_, h, w) = image.dims3()?;
    let trace = model.forward_trace(image)?;
    let c = class_index.unwrap_or(trace.predicted);
    let row = &weight.data()[c * n..(c + 1) * n];
    Ok(Heatmap {
        values: weighted_feature_sum(&trace.features, row)?,
        class_index: c,
        source_size: (h, w),
        normalized: false,
    })
}

/// `|mean(cam_c) + b_c - logit_c|` for class `c` (predicted class when
/// `None`). Zero up to rounding for any CAM-ready network.
pub fn cam_logit_residual<M: CamModel + ?Sized>(model: &M, image: &Tensor, class_index: Option<usize>) -> Result<f64> {
    let (weight, bias) = model.output_layer()?;
    let n = weight.shape()[1];
    let trace = model.forward_trace(image)?;
    let c = class_index.unwrap_or(trace.predicted);
    if c >= bias.len() {
        return Err(Error::InvalidArgument(format!("class index {c} out of range")));
    }
    let cam = weighted_feature_sum(&trace.features, &weight.data()[c * n..(c + 1) * n])?;
    let mean = cam.data().iter().sum::<f64>() / cam.len() as f64;
    Ok((mean + bias.data()[c] - trace.logits.data()[c]).abs())
}

/// [`cam_logit_residual`] for the predicted class.
pub fn cam_logit_identity_check<M: CamModel + ?Sized>(model: &M, image: &Tensor) -> Result<f64> {
    cam_logit_residual(model, image, None)
}

/// Align-corners bilinear upsampling to `(height, width)`.
pub fn upsample_bilinear(heatmap: &Heatmap, target: (usize, usize)) -> Result<Heatmap> {
    let (h, w) = (heatmap.height(), heatmap.width());
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::InvalidArgument(format!(
            "upsample target {th}x{tw} is smaller than the {h}x{w} map"
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(heatmap.clone());
    }
    let src = heatmap.values.data();
    let scale = |n: usize, tn: usize| if tn > 1 { (n - 1) as f64 / (tn - 1) as f64 } else { 0.0 };
    let (sy, sx) = (scale(h, th), scale(w, tw));
    let mut out = vec![0.0; th * tw];
    for y in 0..th {
        let fy = y as f64 * sy;
        let y0 = (fy as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..tw {
            let fx = x as f64 * sx;
            let x0 = (fx as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * tw + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    Ok(Heatmap {
        values: Tensor::from_parts(vec![1, th, tw], out),
        class_index: heatmap.class_index,
        source_size: heatmap.source_size,
        normalized: heatmap.normalized,
    })
}

/// Min-max maps values to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_heatmap(heatmap: &Heatmap) -> Heatmap {
    let d = heatmap.values.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let values = if range > 0.0 {
        heatmap.values.map(|v| (v - lo) / range)
    } else {
        heatmap.values.map(|_| 0.0)
    };
    Heatmap {
        values,
        class_index: heatmap.class_index,
        source_size: heatmap.source_size,
        normalized: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    /// The heatmap peak lies inside the mask's bounding box.
    pub hit: bool,
    /// IoU of `{heat >= threshold}` with the mask.
    pub iou: f64,
}

/// Scores a normalized, image-sized heatmap against a binary mask.
pub fn localization_score(heatmap: &Tensor, mask: &Tensor, threshold: f64) -> Result<Localization> {
    mask.dims3()?;
    heatmap.expect_shape(mask.shape(), "heatmap vs mask")?;
    let w = mask.shape()[2];
    let bbox = BBox::of_mask(mask).ok_or_else(|| Error::EmptyData("mask has no foreground".into()))?;
    let h = heatmap.data();
    let mut peak = 0;
    for (i, &v) in h.iter().enumerate() {
        if v > h[peak] {
            peak = i;
        }
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&v, &m) in h.iter().zip(mask.data()) {
        let r = v >= threshold;
        let m = m != 0.0;
        inter += usize::from(r && m);
        union += usize::from(r || m);
    }
    Ok(Localization {
        hit: bbox.contains(peak / w, peak % w),
        iou: inter as f64 / union as f64,
    })
}
