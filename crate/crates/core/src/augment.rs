//! Training-time augmentation: random rotation in `[0, 360)` degrees and
//! independent random reflections about each axis.

use alloc::vec;

use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentPolicy {
    pub rotate: bool,
    pub reflect_x: bool,
    pub reflect_y: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotate: true,
            reflect_x: true,
            reflect_y: true,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            rotate: false,
            reflect_x: false,
            reflect_y: false,
        }
    }

    fn is_identity(&self) -> bool {
        !(self.rotate || self.reflect_x || self.reflect_y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Mirror about the vertical axis (columns reversed).
    X,
    /// Mirror about the horizontal axis (rows reversed).
    Y,
}

/// `(cos, sin)` with exact values at multiples of 90 degrees.
fn cos_sin_degrees(angle: f64) -> (f64, f64) {
    let a = math::rem_euclid(angle, 360.0);
    if a == 0.0 {
        (1.0, 0.0)
    } else if a == 90.0 {
        (0.0, 1.0)
    } else if a == 180.0 {
        (-1.0, 0.0)
    } else if a == 270.0 {
        (0.0, -1.0)
    } else {
        let r = a.to_radians();
        (math::cos(r), math::sin(r))
    }
}

/// Rotates every channel counter-clockwise by `angle_degrees` about the
/// image center `((h-1)/2, (w-1)/2)` on a fixed canvas. Each output pixel
/// samples the input bilinearly at its inverse-rotated position; samples
/// outside the image read as zero.
pub fn rotate(image: &Tensor, angle_degrees: f64) -> Tensor {
    let (c, h, w) = image.dims3().expect("rotate expects a c x h x w image");
    let (cos, sin) = cos_sin_degrees(angle_degrees);
    if cos == 1.0 {
        return image.clone();
    }
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    for r in 0..h {
        for col in 0..w {
            let dy = r as f64 - cy;
            let dx = col as f64 - cx;
            let sx = cx + cos * dx - sin * dy;
            let sy = cy + sin * dx + cos * dy;
            let x0 = math::floor(sx);
            let y0 = math::floor(sy);
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = at(ch, y0, x0) * (1.0 - fx) + at(ch, y0, x0 + 1) * fx;
                let bottom = at(ch, y0 + 1, x0) * (1.0 - fx) + at(ch, y0 + 1, x0 + 1) * fx;
                out[(ch * h + r) * w + col] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

pub fn reflect(image: &Tensor, axis: Axis) -> Tensor {
    let (c, h, w) = image.dims3().expect("reflect expects a c x h x w image");
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match axis {
                    Axis::X => (y, w - 1 - x),
                    Axis::Y => (h - 1 - y, x),
                };
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), out)
}

/// Rotation by `360 * u` (when enabled), then an X reflection if the next
/// uniform is below 0.5, then a Y reflection likewise. Draws happen in that
/// order for every enabled flag, whether or not the coin lands: three
/// uniforms with the default policy, none with [`AugmentPolicy::none`].
pub fn augment_sample(image: &Tensor, policy: &AugmentPolicy, rng: &mut Rng) -> Tensor {
    if policy.is_identity() {
        return image.clone();
    }
    let mut out = if policy.rotate {
        rotate(image, 360.0 * rng.uniform())
    } else {
        image.clone()
    };
    if policy.reflect_x && rng.uniform() < 0.5 {
        out = reflect(&out, Axis::X);
    }
    if policy.reflect_y && rng.uniform() < 0.5 {
        out = reflect(&out, Axis::Y);
    }
    out
}
