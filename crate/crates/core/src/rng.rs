//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream derived from a `u64` seed
//! and a list of stream labels, so parallel jobs stay bitwise reproducible no
//! matter how they are scheduled.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a sequence of stream labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(seed), |acc, &l| mix(acc ^ mix(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

/// Distribution of iid matrix entries, each with mean 0 and variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EntryLaw {
    Gaussian,
    /// ±1 with equal probability.
    Bernoulli,
    /// Uniform on `[-√3, √3]`.
    Uniform,
}

impl EntryLaw {
    /// Fourth cumulant of one entry.
    pub fn kappa4(self) -> f64 {
        match self {
            EntryLaw::Gaussian => 0.0,
            EntryLaw::Bernoulli => -2.0,
            EntryLaw::Uniform => -1.2,
        }
    }

    pub fn sample(self, r: &mut impl Rng) -> f64 {
        match self {
            EntryLaw::Gaussian => r.sample(StandardNormal),
            EntryLaw::Bernoulli => {
                if r.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            EntryLaw::Uniform => 3f64.sqrt() * r.random_range(-1.0..1.0),
        }
    }

    /// `n × t` matrix of iid entries, filled row by row.
    pub fn matrix(self, n: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut r = stream(seed, &[]);
        let rows: Vec<f64> = (0..n * t).map(|_| self.sample(&mut r)).collect();
        DMatrix::from_row_slice(n, t, &rows)
    }
}
