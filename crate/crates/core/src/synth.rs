//! Deterministic mammogram-like synthetic data.
//!
//! Every image is a smooth textured background (offset 0.25 plus three
//! random sinusoids of total amplitude at most 0.15) with at most one
//! abnormality added on top, clipped to `[0, 1]`:
//!
//! * mass: one smooth elliptical blob, `0.6 * exp(-r^2)` in normalized
//!   elliptical radius, radii in `[size/8, size/4]`;
//! * calcification: 5 to 15 Gaussian speckles (radius 1-3 px, peak
//!   0.7-1.0) scattered in a disk of radius `size/5`.
//!
//! The pretext set adds a bright bar and a plain background class.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use crate::math;
use crate::network::{Dataset, Sample};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BACKGROUND_OFFSET: f64 = 0.25;
/// Upper bound on the summed sinusoid amplitudes.
pub const BACKGROUND_AMPLITUDE: f64 = 0.15;
pub const MASS_PEAK: f64 = 0.6;
/// Pixels whose abnormality contribution exceeds this are in the mask.
pub const MASK_THRESHOLD: f64 = 0.05;

pub const CALCIFICATION: usize = 0;
pub const MASS: usize = 1;

/// `["calcification", "mass"]`, the sorted binary task classes.
pub fn abnormality_classes() -> Vec<String> {
    vec!["calcification".to_string(), "mass".to_string()]
}

/// `["bar", "blob", "plain", "speckle"]`, the sorted pretext classes.
pub fn pretext_classes() -> Vec<String> {
    ["bar", "blob", "plain", "speckle"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Abnormality {
    Calcification,
    Mass,
}

impl Abnormality {
    pub fn label(self) -> usize {
        match self {
            Abnormality::Calcification => CALCIFICATION,
            Abnormality::Mass => MASS,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amplitude: f64,
    fy: f64,
    fx: f64,
    phase: f64,
}

/// Draws 12 uniforms: per wave amplitude, frequency, direction, phase.
#[derive(Debug, Clone)]
struct Background {
    waves: [Wave; 3],
}

impl Background {
    fn draw(rng: &mut Rng) -> Self {
        let mut wave = || {
            let amplitude = BACKGROUND_AMPLITUDE / 3.0 * rng.uniform();
            let freq = rng.uniform_in(0.05, 0.4);
            let dir = TAU * rng.uniform();
            let phase = TAU * rng.uniform();
            Wave {
                amplitude,
                fy: freq * math::sin(dir),
                fx: freq * math::cos(dir),
                phase,
            }
        };
        Background {
            waves: [wave(), wave(), wave()],
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        BACKGROUND_OFFSET
            + self
                .waves
                .iter()
                .map(|w| w.amplitude * math::sin(w.fy * y + w.fx * x + w.phase))
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy)]
struct Speck {
    cy: f64,
    cx: f64,
    radius: f64,
    intensity: f64,
}

#[derive(Debug, Clone)]
enum Lesion {
    Plain,
    Mass {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        cos: f64,
        sin: f64,
    },
    Specks(Vec<Speck>),
    Bar {
        cy: f64,
        cx: f64,
        half_len: f64,
        width: f64,
        cos: f64,
        sin: f64,
    },
}

impl Lesion {
    /// Radii, then orientation: 3 uniforms.
    fn mass(rng: &mut Rng, cy: f64, cx: f64, size: usize) -> Self {
        let s = size as f64;
        let ry = rng.uniform_in(s / 8.0, s / 4.0);
        let rx = rng.uniform_in(s / 8.0, s / 4.0);
        let theta = TAU * rng.uniform();
        Lesion::Mass {
            cy,
            cx,
            ry,
            rx,
            cos: math::cos(theta),
            sin: math::sin(theta),
        }
    }

    /// One uniform for the count, then 4 per speck (distance, angle,
    /// radius, intensity).
    fn calcification(rng: &mut Rng, cy: f64, cx: f64, size: usize) -> Self {
        let spread = size as f64 / 5.0;
        let count = 5 + rng.below(11);
        let specks = (0..count)
            .map(|_| {
                let d = spread * math::sqrt(rng.uniform());
                let a = TAU * rng.uniform();
                Speck {
                    cy: cy + d * math::sin(a),
                    cx: cx + d * math::cos(a),
                    radius: rng.uniform_in(1.0, 3.0),
                    intensity: rng.uniform_in(0.7, 1.0),
                }
            })
            .collect();
        Lesion::Specks(specks)
    }

    /// Length, width, orientation: 3 uniforms.
    fn bar(rng: &mut Rng, cy: f64, cx: f64, size: usize) -> Self {
        let s = size as f64;
        let half_len = rng.uniform_in(s / 6.0, s / 4.0);
        let width = rng.uniform_in(1.5, 3.0);
        let theta = TAU * rng.uniform();
        Lesion::Bar {
            cy,
            cx,
            half_len,
            width,
            cos: math::cos(theta),
            sin: math::sin(theta),
        }
    }

    fn contribution(&self, y: f64, x: f64) -> f64 {
        match self {
            Lesion::Plain => 0.0,
            Lesion::Mass {
                cy,
                cx,
                ry,
                rx,
                cos,
                sin,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = (cos * dx + sin * dy) / rx;
                let v = (-sin * dx + cos * dy) / ry;
                MASS_PEAK * math::exp(-(u * u + v * v))
            }
            Lesion::Specks(specks) => specks.iter().fold(0.0, |m: f64, s| {
                let (dy, dx) = (y - s.cy, x - s.cx);
                let r2 = (dy * dy + dx * dx) / (s.radius * s.radius);
                if r2 > 30.0 {
                    m
                } else {
                    m.max(s.intensity * math::exp(-r2))
                }
            }),
            Lesion::Bar {
                cy,
                cx,
                half_len,
                width,
                cos,
                sin,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let along = (cos * dx + sin * dy).abs();
                let across = (-sin * dx + cos * dy) / width;
                let overhang = ((along - half_len).max(0.0)) / width;
                MASS_PEAK * math::exp(-(across * across + overhang * overhang))
            }
        }
    }
}

/// Renders background + lesion and the lesion-only contribution.
fn render(h: usize, w: usize, bg: &Background, lesion: &Lesion) -> (Tensor, Vec<f64>) {
    let mut img = Vec::with_capacity(h * w);
    let mut contrib = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let c = lesion.contribution(fy, fx);
            img.push((bg.at(fy, fx) + c).clamp(0.0, 1.0));
            contrib.push(c);
        }
    }
    (Tensor::from_parts(vec![1, h, w], img), contrib)
}

/// Center uniform in the middle half of a `size` square: 2 uniforms.
fn middle_half(rng: &mut Rng, size: usize) -> (f64, f64) {
    let s = size as f64;
    let cy = s / 4.0 + rng.uniform() * s / 2.0;
    let cx = s / 4.0 + rng.uniform() * s / 2.0;
    (cy, cx)
}

fn patch(rng: &mut Rng, size: usize, kind: PatchKind) -> Tensor {
    assert!(size >= 32, "patch size must be at least 32, got {size}");
    let bg = Background::draw(rng);
    let lesion = match kind {
        PatchKind::Plain => Lesion::Plain,
        _ => {
            let (cy, cx) = middle_half(rng, size);
            match kind {
                PatchKind::Mass => Lesion::mass(rng, cy, cx, size),
                PatchKind::Calcification => Lesion::calcification(rng, cy, cx, size),
                PatchKind::Bar => Lesion::bar(rng, cy, cx, size),
                PatchKind::Plain => unreachable!(),
            }
        }
    };
    render(size, size, &bg, &lesion).0
}

#[derive(Debug, Clone, Copy)]
enum PatchKind {
    Mass,
    Calcification,
    Bar,
    Plain,
}

/// Mass-like patch of `size x size` (`size >= 32`).
pub fn gen_mass_patch(rng: &mut Rng, size: usize) -> Sample {
    Sample {
        image: patch(rng, size, PatchKind::Mass),
        label: MASS,
        mask: None,
    }
}

/// Calcification-like patch of `size x size` (`size >= 32`).
pub fn gen_calcification_patch(rng: &mut Rng, size: usize) -> Sample {
    Sample {
        image: patch(rng, size, PatchKind::Calcification),
        label: CALCIFICATION,
        mask: None,
    }
}

/// Balanced calcification/mass patch set, classes interleaved.
pub fn gen_patch_dataset(rng: &mut Rng, n_per_class: usize, size: usize) -> Dataset {
    let mut data = Dataset::new(abnormality_classes());
    for _ in 0..n_per_class {
        data.samples.push(gen_calcification_patch(rng, size));
        data.samples.push(gen_mass_patch(rng, size));
    }
    data
}

/// Balanced four-class pretext set (bar, blob, plain, speckle), classes
/// interleaved.
pub fn gen_pretext_dataset(rng: &mut Rng, n_per_class: usize, size: usize) -> Dataset {
    let mut data = Dataset::new(pretext_classes());
    let kinds = [
        PatchKind::Bar,
        PatchKind::Mass,
        PatchKind::Plain,
        PatchKind::Calcification,
    ];
    for _ in 0..n_per_class {
        for (label, &kind) in kinds.iter().enumerate() {
            data.push(patch(rng, size, kind), label);
        }
    }
    data
}

/// Tight bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }

    /// Tight box around the non-zero entries of a `1 x h x w` mask.
    pub fn of_mask(mask: &Tensor) -> Option<BBox> {
        let (_, h, w) = mask.dims3().ok()?;
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..h {
            for x in 0..w {
                if mask.data()[y * w + x] != 0.0 {
                    r0 = r0.min(y);
                    r1 = r1.max(y);
                    c0 = c0.min(x);
                    c1 = c1.max(x);
                }
            }
        }
        (r0 != usize::MAX).then(|| BBox {
            row: r0,
            col: c0,
            height: r1 - r0 + 1,
            width: c1 - c0 + 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullImageCase {
    pub image: Tensor,
    /// Binary `1 x H x W` mask: 1 where the abnormality contributes more
    /// than [`MASK_THRESHOLD`].
    pub mask: Tensor,
    pub bbox: BBox,
    pub label: usize,
    /// Placement center `(row, col)` of the abnormality.
    pub center: (f64, f64),
}

/// Full `height x width` image with one abnormality built exactly like the
/// `patch_size` patch generators, centered uniformly at least
/// `patch_size / 2` pixels from every border. Requires both sides to be at
/// least `4 * patch_size`.
pub fn gen_full_image(
    rng: &mut Rng,
    height: usize,
    width: usize,
    patch_size: usize,
    abnormality: Abnormality,
) -> FullImageCase {
    assert!(
        height >= 4 * patch_size && width >= 4 * patch_size,
        "full image {height}x{width} must be at least 4x the patch size {patch_size}"
    );
    let bg = Background::draw(rng);
    let margin = (patch_size / 2) as f64;
    let cy = rng.uniform_in(margin, height as f64 - 1.0 - margin);
    let cx = rng.uniform_in(margin, width as f64 - 1.0 - margin);
    let lesion = match abnormality {
        Abnormality::Mass => Lesion::mass(rng, cy, cx, patch_size),
        Abnormality::Calcification => Lesion::calcification(rng, cy, cx, patch_size),
    };
    let (image, contrib) = render(height, width, &bg, &lesion);
    let mask = Tensor::from_parts(
        vec![1, height, width],
        contrib
            .iter()
            .map(|&c| if c > MASK_THRESHOLD { 1.0 } else { 0.0 })
            .collect(),
    );
    let bbox = BBox::of_mask(&mask).expect("abnormality peak always exceeds the mask threshold");
    FullImageCase {
        image,
        mask,
        bbox,
        label: abnormality.label(),
        center: (cy, cx),
    }
}

/// `count` full images alternating calcification and mass.
pub fn gen_full_images(rng: &mut Rng, count: usize, size: usize, patch_size: usize) -> Vec<FullImageCase> {
    (0..count)
        .map(|i| {
            let kind = if i % 2 == 0 {
                Abnormality::Calcification
            } else {
                Abnormality::Mass
            };
            gen_full_image(rng, size, size, patch_size, kind)
        })
        .collect()
}
