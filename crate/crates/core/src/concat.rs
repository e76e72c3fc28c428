//! Concatenated matrices: a state block stacked over a duplicated,
//! noise-dressed copy of one factor series.
//!
//! Duplicating the factor `K` times gives it enough weight in the spectrum to
//! shift the LES when it becomes correlated with the state. The added noise
//! keeps the copies from being perfectly collinear.

use nalgebra::{DMatrix, DMatrixView};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{standardize_into, Jitter, TimeSeriesWindow};
use crate::rng;

/// Reference scale for an SNR-based noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SnrReference {
    /// Sample standard deviation of the factor window.
    SampleStd,
    /// Robust estimate of the factor's own measurement noise, see
    /// [`robust_noise_scale`].
    RobustNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "mode")]
pub enum Eta {
    Raw { eta: f64 },
    Snr { db: f64, reference: SnrReference },
}

impl Eta {
    /// Noise magnitude for a particular factor window.
    pub fn resolve(&self, c: &[f64]) -> f64 {
        match *self {
            Eta::Raw { eta } => eta,
            Eta::Snr { db, reference } => {
                let scale = match reference {
                    SnrReference::SampleStd => sample_std(c),
                    SnrReference::RobustNoise => robust_noise_scale(c),
                };
                scale * 10f64.powf(-db / 20.0)
            }
        }
    }
}

impl Default for Eta {
    fn default() -> Self {
        Eta::Snr {
            db: -10.0,
            reference: SnrReference::RobustNoise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcatSpec {
    pub k: usize,
    pub eta: Eta,
    pub seed: u64,
}

impl ConcatSpec {
    /// Default duplication count for a state block of `n` rows.
    pub fn default_k(n: usize) -> usize {
        ((0.3 * n as f64).round() as usize).max(1)
    }

    pub fn for_state_rows(n: usize, seed: u64) -> Self {
        Self {
            k: Self::default_k(n),
            eta: Eta::default(),
            seed,
        }
    }
}

/// `(N + K) x T` stacked matrix, state rows first.
#[derive(Debug, Clone)]
pub struct ConcatMatrix {
    pub data: DMatrix<f64>,
    pub n_state: usize,
    pub factor_node: String,
}

impl ConcatMatrix {
    pub fn state_rows(&self) -> std::ops::Range<usize> {
        0..self.n_state
    }

    pub fn factor_rows(&self) -> std::ops::Range<usize> {
        self.n_state..self.data.nrows()
    }

    /// Row-standardized copy, ready for spectral analysis.
    pub fn standardized(&self, start_index: usize, jitter: Jitter) -> Result<TimeSeriesWindow> {
        TimeSeriesWindow::from_raw(self.data.as_view(), start_index, jitter)
    }
}

/// `D = C + eta * R`, where `C` holds `K` copies of `c` and `R` is standard
/// Gaussian noise drawn from `spec.seed`.
pub fn build_factor_matrix(c: &[f64], spec: &ConcatSpec) -> Result<DMatrix<f64>> {
    if c.is_empty() {
        return Err(Error::Shape("factor vector is empty".into()));
    }
    if spec.k == 0 {
        return Err(Error::Config("duplication count K must be at least 1".into()));
    }
    let eta = spec.eta.resolve(c);
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("noise magnitude must be finite and >= 0, got {eta}")));
    }
    let t = c.len();
    let mut d = DMatrix::zeros(spec.k, t);
    let mut r = rng::stream(spec.seed, &[]);
    // Fill time-major so the noise sequence is independent of K's layout.
    for j in 0..t {
        for i in 0..spec.k {
            let z: f64 = StandardNormal.sample(&mut r);
            d[(i, j)] = c[j] + eta * z;
        }
    }
    Ok(d)
}

pub fn concatenate(
    state: DMatrixView<'_, f64>,
    factor: &DMatrix<f64>,
    factor_node: impl Into<String>,
) -> Result<ConcatMatrix> {
    let (n, t) = state.shape();
    let k = factor.nrows();
    if n == 0 {
        return Err(Error::Shape("state matrix has no rows".into()));
    }
    if k == 0 {
        return Err(Error::Shape("factor matrix has no rows".into()));
    }
    if factor.ncols() != t {
        return Err(Error::Shape(format!(
            "state has {t} columns, factor has {}",
            factor.ncols()
        )));
    }
    if n + k > t {
        return Err(Error::AspectRatio { rows: n + k, cols: t });
    }
    let mut data = DMatrix::zeros(n + k, t);
    data.rows_mut(0, n).copy_from(&state);
    data.rows_mut(n, k).copy_from(factor);
    Ok(ConcatMatrix {
        data,
        n_state: n,
        factor_node: factor_node.into(),
    })
}

/// Builds the standardized concatenated window in one pass without keeping
/// the raw stacked matrix around.
pub(crate) fn standardized_concat(
    state: DMatrixView<'_, f64>,
    factor: &DMatrix<f64>,
    start_index: usize,
    jitter: Jitter,
) -> Result<TimeSeriesWindow> {
    let (n, t) = state.shape();
    let k = factor.nrows();
    if factor.ncols() != t {
        return Err(Error::Shape(format!(
            "state has {t} columns, factor has {}",
            factor.ncols()
        )));
    }
    if n + k > t {
        return Err(Error::AspectRatio { rows: n + k, cols: t });
    }
    let mut out = DMatrix::zeros(n + k, t);
    standardize_into(state, &mut out, 0, None, jitter)?;
    standardize_into(factor.as_view(), &mut out, n, None, jitter)?;
    TimeSeriesWindow::new(out, start_index)
}

pub fn sample_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    v.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scale of white measurement noise in `x`, estimated from the median
/// absolute deviation of first differences. Steps and slow trends barely
/// move it, unlike the sample standard deviation.
pub fn robust_noise_scale(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let mut d: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let med = median(&mut d);
    let mut dev: Vec<f64> = d.iter().map(|v| (v - med).abs()).collect();
    1.4826 * median(&mut dev) / std::f64::consts::SQRT_2
}
