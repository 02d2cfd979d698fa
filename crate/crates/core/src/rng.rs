//! Counter-based random streams.
//!
//! Every random quantity in the crate is addressed by `(seed, domain, path,
//! step)`. The ChaCha8 block function is keyed by the seed and domain, the
//! path index selects the ChaCha stream, and the `(step, coordinate)` index
//! selects the word position inside that stream. The noise of step `k` on
//! path `i` can therefore be regenerated on its own, and results do not
//! depend on the order in which paths are simulated.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent sub-streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Brownian,
    JumpSkeleton,
    JumpSizes,
    Surrogate,
    Probe,
    Custom(u64),
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Brownian => 0x0B10_0001,
            Domain::JumpSkeleton => 0x0B10_0002,
            Domain::JumpSizes => 0x0B10_0003,
            Domain::Surrogate => 0x0B10_0004,
            Domain::Probe => 0x0B10_0005,
            Domain::Custom(c) => 0x1000_0000_0000_0000 ^ c,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for check number `index` of a run with the given master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ mix64(index.wrapping_add(0x5EED)))
}

/// Uniform on the open interval (0, 1).
#[inline]
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Per-path random stream.
///
/// Normals are numbered `j = step * dim + coord` and produced by the
/// Box–Muller transform in pairs: pair `⌊j/2⌋` occupies the four ChaCha words
/// starting at `4⌊j/2⌋`. A pair may straddle two steps when `dim` is odd.
#[derive(Clone)]
pub struct PathStream {
    rng: ChaCha8Rng,
    dim: u64,
    spare: Option<f64>,
}

impl PathStream {
    pub fn new(seed: u64, domain: Domain, path: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ domain.tag()));
        rng.set_stream(path);
        PathStream {
            rng,
            dim: dim.max(1) as u64,
            spare: None,
        }
    }

    #[inline]
    fn pair(&mut self) -> (f64, f64) {
        let u1 = open_unit(self.rng.next_u64());
        let u2 = open_unit(self.rng.next_u64());
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    /// Jump to the start of step `step`.
    pub fn seek_step(&mut self, step: u64) {
        let j = step * self.dim;
        self.rng.set_word_pos(4 * (j / 2) as u128);
        self.spare = None;
        if j % 2 == 1 {
            self.spare = Some(self.pair().1);
        }
    }

    /// Fill `out` with the next independent N(0, 1) draws.
    #[inline]
    pub fn normals(&mut self, out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = match self.spare.take() {
                Some(z) => z,
                None => {
                    let (a, b) = self.pair();
                    self.spare = Some(b);
                    a
                }
            };
        }
    }

    /// Uniform draw on (0, 1), for streams that are read sequentially.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        open_unit(self.rng.next_u64())
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        let mut z = [0.0];
        self.normals(&mut z);
        z[0]
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
