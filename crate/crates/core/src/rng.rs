use crate::math;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const UNIT: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 generator.
///
/// Every stochastic step in the crate (initialization, augmentation, splits,
/// data generation) takes one of these explicitly; nothing reads ambient
/// entropy. The cached second Box-Muller draw is the only state besides the
/// 64-bit counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            spare_normal: None,
        }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        unit_from_u64(self.next_u64())
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw. Pairs are generated with Box-Muller from two
    /// uniforms; the second value of each pair is cached for the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let (z0, z1) = box_muller(u1, u2);
        self.spare_normal = Some(z1);
        z0
    }

    /// Uniform integer in `0..n` by multiply-shift. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Independent streams derived from one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Weight initialization: `seed`.
    Init,
    /// Training-time augmentation: `seed + 1`.
    Augment,
    /// Dataset splits, folds and minibatch order: `seed + 2`.
    Split,
    /// Synthetic data generation: `seed + 3`.
    Data,
}

impl Rng {
    pub fn stream(seed: u64, stream: Stream) -> Self {
        Rng::new(stream_seed(seed, stream))
    }
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    let offset = match stream {
        Stream::Init => 0,
        Stream::Augment => 1,
        Stream::Split => 2,
        Stream::Data => 3,
    };
    seed.wrapping_add(offset)
}

/// Maps a raw 64-bit output to `[0, 1)`: `(v >> 11) * 2^-53`.
pub(crate) fn unit_from_u64(v: u64) -> f64 {
    (v >> 11) as f64 * UNIT
}

/// Box-Muller transform of two uniforms; `u1 == 0` is replaced by `2^-53`.
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let u1 = if u1 == 0.0 { UNIT } else { u1 };
    let r = math::sqrt(-2.0 * math::ln(u1));
    let theta = 2.0 * core::f64::consts::PI * u2;
    (r * math::cos(theta), r * math::sin(theta))
}
