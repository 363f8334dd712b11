//! Seeded, splittable random streams.
//!
//! A [`RandomSource`] is an immutable `(seed, stream)` token. Child tokens are
//! derived from an index, so per-query and per-trial randomness never depends
//! on evaluation order. Drawing happens through a [`Draws`] value that owns
//! its own ChaCha state and is never shared between threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ProbabilityVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomSource {
    pub seed: u64,
    pub stream: u64,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Same seed, stream id `stream ^ index`.
    pub fn substream(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream: self.stream ^ index,
        }
    }

    /// A child source with a freshly mixed seed; children of distinct indices are independent.
    pub fn split(&self, index: u64) -> Self {
        Self {
            seed: mix64(self.seed ^ mix64(self.stream.wrapping_add(mix64(index)))),
            stream: 0,
        }
    }

    /// Child source keyed by a label, for named sub-experiments.
    pub fn split_named(&self, label: &str) -> Self {
        // FNV-1a; stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.split(h)
    }

    pub fn draws(&self) -> Draws {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        Draws { rng }
    }
}

/// A live random stream created from a [`RandomSource`].
#[derive(Debug, Clone)]
pub struct Draws {
    rng: ChaCha8Rng,
}

impl Draws {
    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.standard_normal();
        }
    }
}

/// `mean + ε` with `ε ~ N(0, I)`.
pub fn gaussian_draw(mean: &[f64], draws: &mut Draws) -> Result<Vec<f64>> {
    if let Some(m) = mean.iter().find(|m| !m.is_finite()) {
        return Err(Error::invalid(format!("non-finite Gaussian mean {m}")));
    }
    Ok(mean.iter().map(|m| m + draws.standard_normal()).collect())
}

/// Inverse-CDF categorical draw: the first index whose cumulative mass strictly exceeds `u`.
pub fn categorical_draw(weights: &ProbabilityVector, draws: &mut Draws) -> usize {
    categorical_from_uniform(weights.as_slice(), draws.uniform())
}

pub(crate) fn categorical_from_uniform(weights: &[f64], u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cumulative += w;
            last_positive = i;
            if u < cumulative {
                return i;
            }
        }
    }
    // Rounding left the total just below u.
    last_positive
}
