//! Covariance spectra, the Marchenko-Pastur law and the single-ring transform.
//!
//! Two scalings of the sample covariance are in use. `OverT` (`XXᵀ/T`) has
//! its bulk on `[(1-√c)², (1+√c)²]`; `OverN` (`XXᵀ/N`) is the same spectrum
//! multiplied by `1/c`. LES statistics are pinned to `OverN`.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TimeSeriesWindow;
use crate::quadrature::GaussLegendre;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Convention {
    OverT,
    OverN,
}

impl Convention {
    fn scale(self, n: usize, t: usize) -> f64 {
        match self {
            Convention::OverT => 1.0 / t as f64,
            Convention::OverN => 1.0 / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpectrum {
    /// Ascending, non-negative.
    pub eigenvalues: Vec<f64>,
    pub convention: Convention,
    pub c: f64,
}

impl CovarianceSpectrum {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Same spectrum under the other scaling.
    pub fn rescaled(&self, convention: Convention) -> Self {
        let factor = match (self.convention, convention) {
            (a, b) if a == b => 1.0,
            (Convention::OverT, Convention::OverN) => 1.0 / self.c,
            _ => self.c,
        };
        Self {
            eigenvalues: self.eigenvalues.iter().map(|l| l * factor).collect(),
            convention,
            c: self.c,
        }
    }
}

/// `S · XXᵀ` for the given convention.
pub fn covariance_matrix(x: &TimeSeriesWindow, convention: Convention) -> Result<DMatrix<f64>> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("window entries"));
    }
    let s = convention.scale(x.n(), x.t());
    let mut m = &x.data * x.data.transpose();
    m *= s;
    Ok(m)
}

const CLAMP: f64 = 1e-10;

pub fn covariance_spectrum(x: &TimeSeriesWindow, convention: Convention) -> Result<CovarianceSpectrum> {
    let m = covariance_matrix(x, convention)?;
    let eig = m.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    if ev.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigen-decomposition produced non-finite values".into()));
    }
    ev.sort_by(f64::total_cmp);
    if let Some(&min) = ev.first() {
        let tol = CLAMP * ev.last().copied().unwrap_or(1.0).max(1.0);
        if min < -tol {
            return Err(Error::Numeric(format!("covariance eigenvalue {min} is negative")));
        }
    }
    for v in &mut ev {
        *v = v.max(0.0);
    }
    Ok(CovarianceSpectrum {
        eigenvalues: ev,
        convention,
        c: x.c(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpLaw {
    pub c: f64,
    pub a: f64,
    pub b: f64,
    pub convention: Convention,
}

impl MpLaw {
    pub fn new(c: f64, convention: Convention) -> Result<Self> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::Domain(format!("aspect ratio c={c} outside (0, 1]")));
        }
        let (a, b) = match convention {
            Convention::OverT => ((1.0 - c.sqrt()).powi(2), (1.0 + c.sqrt()).powi(2)),
            Convention::OverN => ((1.0 / c.sqrt() - 1.0).powi(2), (1.0 / c.sqrt() + 1.0).powi(2)),
        };
        Ok(Self { c, a, b, convention })
    }

    /// Factor mapping an eigenvalue in this convention to `OverT`.
    fn to_over_t(self) -> f64 {
        match self.convention {
            Convention::OverT => 1.0,
            Convention::OverN => self.c,
        }
    }
}

pub fn mp_density(law: &MpLaw, x: f64) -> f64 {
    let s = law.to_over_t();
    let y = x * s;
    let c = law.c;
    let (a, b) = ((1.0 - c.sqrt()).powi(2), (1.0 + c.sqrt()).powi(2));
    if y <= a || y >= b || y <= 0.0 {
        return 0.0;
    }
    s * ((y - a) * (b - y)).sqrt() / (2.0 * PI * c * y)
}

/// M-P distribution function.
///
/// With `x(θ) = 1 + c - 2√c cos θ` the density element becomes
/// `2 sin²θ / (π x(θ)) dθ`, which is smooth on `[0, π]` even at `c = 1`.
pub fn mp_cdf(law: &MpLaw, x: f64) -> f64 {
    let y = x * law.to_over_t();
    let c = law.c;
    let (a, b) = ((1.0 - c.sqrt()).powi(2), (1.0 + c.sqrt()).powi(2));
    if y <= a {
        return 0.0;
    }
    if y >= b {
        return 1.0;
    }
    let theta = ((1.0 + c - y) / (2.0 * c.sqrt())).clamp(-1.0, 1.0).acos();
    let f = |t: f64| 2.0 * t.sin().powi(2) / (PI * (1.0 + c - 2.0 * c.sqrt() * t.cos()));
    match crate::quadrature::integrate_converged(0.0, theta, 1e-12, f) {
        Ok(v) | Err((v, _)) => v.clamp(0.0, 1.0),
    }
}

/// Inverse of [`mp_cdf`] by bisection.
pub fn mp_quantile(law: &MpLaw, p: f64) -> f64 {
    let (mut lo, mut hi) = (law.a, law.b);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mp_cdf(law, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * law.b {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Kolmogorov-Smirnov distance between the empirical spectral distribution
/// and the M-P law.
pub fn ks_distance(spectrum: &CovarianceSpectrum, law: &MpLaw) -> Result<f64> {
    if spectrum.convention != law.convention {
        return Err(Error::Config("spectrum and law use different covariance conventions".into()));
    }
    let n = spectrum.n() as f64;
    let mut d: f64 = 0.0;
    for (i, &l) in spectrum.eigenvalues.iter().enumerate() {
        let f = mp_cdf(law, l);
        d = d.max((f - i as f64 / n).abs()).max((f - (i + 1) as f64 / n).abs());
    }
    Ok(d.min(1.0))
}

/// Integral of the density over its support, useful as a sanity check.
pub fn mp_mass(law: &MpLaw, nodes: usize) -> f64 {
    GaussLegendre::new(nodes).integrate(law.a, law.b, |x| mp_density(law, x))
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
/// of `R`'s diagonal folded into `Q`.
pub fn haar_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, &[0x4841_4152]);
    let g = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..n {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Single-ring transform of a standardized window.
///
/// With `X = UΣVᵀ`, the square matrix `Z = UΣQᵀ` (`Q` Haar orthogonal) has the
/// same singular values as `X`. Rows of `Z` are rescaled to unit Euclidean
/// norm, which for a standardized window is division by `√T`. The eigenvalues
/// then fill the annulus `√(1-c) ≤ |z| ≤ 1` as N grows.
pub fn ring_transform(x: &TimeSeriesWindow, seed: u64) -> Result<Vec<Complex<f64>>> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("window entries"));
    }
    let n = x.n();
    let svd = x.data.clone().svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Numeric("SVD did not return left singular vectors".into()))?;
    let q = haar_orthogonal(n, seed);
    let mut z = u * DMatrix::from_diagonal(&svd.singular_values) * q.transpose();
    for mut row in z.row_iter_mut() {
        let norm = row.norm();
        if norm == 0.0 {
            return Err(Error::Numeric("zero row in ring transform".into()));
        }
        row /= norm;
    }
    let eig = z
        .complex_eigenvalues()
        .iter()
        .copied()
        .collect::<Vec<Complex<f64>>>();
    if eig.iter().any(|e| !e.re.is_finite() || !e.im.is_finite()) {
        return Err(Error::Numeric("ring eigenvalues are not finite".into()));
    }
    Ok(eig)
}

/// Inner and outer radius of the single ring for aspect ratio `c`.
pub fn ring_radii(c: f64) -> (f64, f64) {
    ((1.0 - c).max(0.0).sqrt(), 1.0)
}

/// Fraction of eigenvalues with modulus in `[inner - margin, outer + margin]`.
pub fn ring_fraction_inside(eigs: &[Complex<f64>], c: f64, margin: f64) -> f64 {
    if eigs.is_empty() {
        return 0.0;
    }
    let (inner, outer) = ring_radii(c);
    let inside = eigs
        .iter()
        .filter(|e| {
            let r = e.norm();
            r >= inner - margin && r <= outer + margin
        })
        .count();
    inside as f64 / eigs.len() as f64
}

/// JSON payload for plotting a spectrum against its law.
#[derive(Debug, Serialize, Deserialize)]
pub struct SpectrumDump {
    pub eigenvalues: Vec<f64>,
    pub a: f64,
    pub b: f64,
}

impl SpectrumDump {
    pub fn new(spectrum: &CovarianceSpectrum, law: &MpLaw) -> Self {
        Self {
            eigenvalues: spectrum.eigenvalues.clone(),
            a: law.a,
            b: law.b,
        }
    }
}
