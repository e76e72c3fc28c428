//! Linear eigenvalue statistics `τ = Σ φ(λᵢ)` and their Gaussian fluctuation
//! theory.
//!
//! All theory here uses the `OverN` covariance convention, where the bulk is
//! parametrized as `ζ(θ) = 1 + 1/c + (2/√c) sin θ` for `θ ∈ [-π/2, π/2]`.
//!
//! Both the variance and the finite-size mean correction are affine in the
//! fourth cumulant κ₄, so [`LesMoments`] stores the two coefficients once and
//! evaluates any κ₄ cheaply. That is what makes per-window κ̂₄ affordable in
//! sliding-window traces.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ingest::TimeSeriesWindow;
use crate::quadrature::GaussLegendre;
use crate::spectral::{covariance_matrix, covariance_spectrum, Convention, CovarianceSpectrum};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct CustomFunction {
    pub name: String,
    pub eval: ScalarFn,
    pub deriv: ScalarFn,
    pub domain_min: f64,
}

#[derive(Clone)]
pub enum TestFunction {
    /// `2x² - 1`
    ChebyshevT2,
    /// `x - ln x - 1`
    LikelihoodRatio,
    Custom(CustomFunction),
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chebyshevT2" | "t2" | "T2" => Ok(Self::ChebyshevT2),
            "likelihoodRatio" | "lr" | "LR" => Ok(Self::LikelihoodRatio),
            other => Err(Error::Config(format!(
                "unknown test function `{other}` (expected chebyshevT2 or likelihoodRatio)"
            ))),
        }
    }
}

impl TestFunction {
    pub fn custom(
        name: impl Into<String>,
        domain_min: f64,
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::Custom(CustomFunction {
            name: name.into(),
            eval: Arc::new(eval),
            deriv: Arc::new(deriv),
            domain_min,
        })
    }

    pub fn name(&self) -> &str {
        match self {
            Self::ChebyshevT2 => "chebyshevT2",
            Self::LikelihoodRatio => "likelihoodRatio",
            Self::Custom(c) => &c.name,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::ChebyshevT2 => 2.0 * x * x - 1.0,
            Self::LikelihoodRatio => x - x.ln() - 1.0,
            Self::Custom(c) => (c.eval)(x),
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match self {
            Self::ChebyshevT2 => 4.0 * x,
            Self::LikelihoodRatio => 1.0 - 1.0 / x,
            Self::Custom(c) => (c.deriv)(x),
        }
    }

    /// Eigenvalues must lie strictly above this.
    pub fn domain_min(&self) -> f64 {
        match self {
            Self::ChebyshevT2 => f64::NEG_INFINITY,
            Self::LikelihoodRatio => 0.0,
            Self::Custom(c) => c.domain_min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CltParameters {
    pub c: f64,
    pub kappa4: f64,
    pub quad_nodes: usize,
}

pub const DEFAULT_QUAD_NODES: usize = 128;

impl CltParameters {
    pub fn new(c: f64, kappa4: f64) -> Result<Self> {
        Self::with_nodes(c, kappa4, DEFAULT_QUAD_NODES)
    }

    pub fn with_nodes(c: f64, kappa4: f64, quad_nodes: usize) -> Result<Self> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::Domain(format!("aspect ratio c={c} outside (0, 1]")));
        }
        if quad_nodes < 32 {
            return Err(Error::Config(format!("quad_nodes={quad_nodes} below the minimum of 32")));
        }
        if !kappa4.is_finite() {
            return Err(Error::NonFinite("kappa4"));
        }
        Ok(Self { c, kappa4, quad_nodes })
    }

    fn zeta(&self, theta: f64) -> f64 {
        1.0 + 1.0 / self.c + 2.0 / self.c.sqrt() * theta.sin()
    }
}

/// `τ` together with its theoretical mean, standard deviation and z-score.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LesValue {
    pub tau: f64,
    pub mean_theory: f64,
    pub sigma_theory: f64,
    pub z: f64,
}

impl LesValue {
    pub fn new(tau: f64, mean_theory: f64, sigma_theory: f64) -> Result<Self> {
        if !(sigma_theory > 0.0 && sigma_theory.is_finite()) {
            return Err(Error::Numeric(format!("theoretical sigma {sigma_theory} is not positive")));
        }
        Ok(Self {
            tau,
            mean_theory,
            sigma_theory,
            z: (tau - mean_theory) / sigma_theory,
        })
    }
}

fn check_domain(phi: &TestFunction, values: &[f64]) -> Result<()> {
    let lo = phi.domain_min();
    if let Some(&bad) = values.iter().find(|&&l| l <= lo) {
        return Err(Error::Domain(format!(
            "{phi} is undefined at eigenvalue {bad} (requires λ > {lo})"
        )));
    }
    Ok(())
}

/// `Σ φ(λᵢ)` over a spectrum.
pub fn les(spectrum: &CovarianceSpectrum, phi: &TestFunction) -> Result<f64> {
    check_domain(phi, &spectrum.eigenvalues)?;
    Ok(spectrum.eigenvalues.iter().map(|&l| phi.eval(l)).sum())
}

/// LES of a window under the `OverN` convention.
///
/// For `ChebyshevT2` this skips the eigen-decomposition and uses
/// `tr(2M² - I) = 2‖M‖²_F - N`, which is exact for symmetric `M`.
pub fn les_of_window(x: &TimeSeriesWindow, phi: &TestFunction) -> Result<f64> {
    match phi {
        TestFunction::ChebyshevT2 => {
            let m = covariance_matrix(x, Convention::OverN)?;
            Ok(2.0 * m.norm_squared() - x.n() as f64)
        }
        _ => les(&covariance_spectrum(x, Convention::OverN)?, phi),
    }
}

/// Closed-form `tr(2M² - I)` on a covariance matrix, the trace oracle.
pub fn t2_trace(m: &DMatrix<f64>) -> f64 {
    let m2 = m * m;
    2.0 * m2.trace() - m.nrows() as f64
}

fn lln_domain_check(c: f64, phi: &TestFunction) -> Result<()> {
    let lower_edge = (1.0 / c.sqrt() - 1.0).powi(2);
    if lower_edge <= phi.domain_min() {
        return Err(Error::Domain(format!(
            "{phi} is undefined at the lower spectral edge {lower_edge} for c={c}"
        )));
    }
    Ok(())
}

/// `∫ φ dρ` for the `OverN` M-P law.
///
/// Uses `x(θ) = 1 + c - 2√c cos θ` on `[0, π]`, where the M-P element is
/// `2 sin²θ / (π x) dθ` and the `OverN` eigenvalue is `x / c`.
fn lln_integral(c: f64, phi: &TestFunction, nodes: usize) -> f64 {
    let f = |t: f64| {
        let x = 1.0 + c - 2.0 * c.sqrt() * t.cos();
        phi.eval(x / c) * 2.0 * t.sin().powi(2) / (PI * x)
    };
    GaussLegendre::new(nodes).integrate(0.0, PI, f)
}

/// Limiting mean `N ∫ φ dρ`. Polynomials use closed-form moments
/// (`E λ = 1/c`, `E λ² = (1+c)/c²`).
pub fn les_mean_limit(n: usize, params: &CltParameters, phi: &TestFunction) -> Result<f64> {
    lln_domain_check(params.c, phi)?;
    let c = params.c;
    let per_eig = match phi {
        TestFunction::ChebyshevT2 => 2.0 * (1.0 + c) / (c * c) - 1.0,
        _ => {
            let a = lln_integral(c, phi, params.quad_nodes);
            let b = lln_integral(c, phi, 2 * params.quad_nodes);
            converged(a, b, params.quad_nodes)?;
            b
        }
    };
    Ok(n as f64 * per_eig)
}

/// Expected LES at finite `N`: the limit plus the O(1) real-case correction
///
/// `(φ(ζ₋)+φ(ζ₊))/4 - (1/2π)∫φ(ζ(θ))dθ - (κ₄/π)∫φ(ζ(θ)) cos 2θ dθ`.
///
/// The correction does not vanish as N grows, so calibrating z-scores against
/// the bare limit biases them (by about 4 standard errors over 1000 Gaussian
/// windows at N=100, T=400).
pub fn les_mean(n: usize, params: &CltParameters, phi: &TestFunction) -> Result<f64> {
    let m = LesMoments::compute(n, params.c, phi, params.quad_nodes)?;
    Ok(m.mean(params.kappa4))
}

/// CLT variance of the LES by tensor Gauss-Legendre quadrature. Fails with an
/// accuracy error if doubling the node count moves the result by more than
/// 1e-6 relative.
pub fn les_variance(params: &CltParameters, phi: &TestFunction) -> Result<f64> {
    lln_domain_check(params.c, phi)?;
    let (v0, v4) = variance_terms(params, phi, params.quad_nodes);
    let (w0, w4) = variance_terms(params, phi, 2 * params.quad_nodes);
    let a = v0 + params.kappa4 * v4;
    let b = w0 + params.kappa4 * w4;
    converged(a, b, params.quad_nodes)?;
    Ok(a)
}

fn converged(a: f64, b: f64, nodes: usize) -> Result<()> {
    let scale = a.abs().max(b.abs());
    let change = if scale < 1e-12 { 0.0 } else { (a - b).abs() / scale };
    if change > 1e-6 {
        return Err(Error::Accuracy { change, nodes });
    }
    Ok(())
}

/// Returns the κ₄-free and κ₄-coefficient parts of the variance.
fn variance_terms(params: &CltParameters, phi: &TestFunction, nodes: usize) -> (f64, f64) {
    let c = params.c;
    let g = GaussLegendre::new(nodes);
    let pts: Vec<(f64, f64)> = g.mapped(-PI / 2.0, PI / 2.0).collect();
    let zeta: Vec<f64> = pts.iter().map(|&(t, _)| params.zeta(t)).collect();
    let val: Vec<f64> = zeta.iter().map(|&z| phi.eval(z)).collect();
    let sin: Vec<f64> = pts.iter().map(|&(t, _)| t.sin()).collect();

    let mut double = 0.0;
    for i in 0..nodes {
        let (_, wi) = pts[i];
        for j in 0..nodes {
            let (_, wj) = pts[j];
            let dz = zeta[i] - zeta[j];
            let psi = if dz.abs() < 1e-10 {
                phi.deriv(0.5 * (zeta[i] + zeta[j]))
            } else {
                (val[i] - val[j]) / dz
            };
            double += wi * wj * psi * psi * (1.0 - sin[i] * sin[j]);
        }
    }
    let single: f64 = pts.iter().zip(&val).zip(&sin).map(|((&(_, w), v), s)| w * v * s).sum();
    (2.0 / (c * PI * PI) * double, single * single / (PI * PI))
}

/// Returns the κ₄-free and κ₄-coefficient parts of the finite-size mean shift.
fn mean_shift_terms(params: &CltParameters, phi: &TestFunction, nodes: usize) -> (f64, f64) {
    let c = params.c;
    let edges = phi.eval((1.0 / c.sqrt() - 1.0).powi(2)) + phi.eval((1.0 / c.sqrt() + 1.0).powi(2));
    let g = GaussLegendre::new(nodes);
    let mut flat = 0.0;
    let mut cos2 = 0.0;
    for (t, w) in g.mapped(-PI / 2.0, PI / 2.0) {
        let v = phi.eval(params.zeta(t));
        flat += w * v;
        cos2 += w * v * (2.0 * t).cos();
    }
    (edges / 4.0 - flat / (2.0 * PI), -cos2 / PI)
}

/// Theory for one `(N, c, φ)` combination, affine in κ₄.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesMoments {
    pub n: usize,
    pub c: f64,
    pub mean_limit: f64,
    pub shift0: f64,
    pub shift4: f64,
    pub var0: f64,
    pub var4: f64,
}

/// Smallest possible κ₄ of standardized real entries (`E x⁴ ≥ (E x²)²`).
pub const KAPPA4_MIN: f64 = -2.0;

impl LesMoments {
    pub fn compute(n: usize, c: f64, phi: &TestFunction, quad_nodes: usize) -> Result<Self> {
        let params = CltParameters::with_nodes(c, 0.0, quad_nodes)?;
        let mean_limit = les_mean_limit(n, &params, phi)?;
        let (var0, var4) = variance_terms(&params, phi, quad_nodes);
        let (w0, w4) = variance_terms(&params, phi, 2 * quad_nodes);
        converged(var0, w0, quad_nodes)?;
        converged(var0 + KAPPA4_MIN * var4, w0 + KAPPA4_MIN * w4, quad_nodes)?;
        let (shift0, shift4) = mean_shift_terms(&params, phi, quad_nodes);
        let (s0, s4) = mean_shift_terms(&params, phi, 2 * quad_nodes);
        converged(shift0 + shift4, s0 + s4, quad_nodes)?;
        Ok(Self {
            n,
            c,
            mean_limit,
            shift0,
            shift4,
            var0,
            var4,
        })
    }

    pub fn mean(&self, kappa4: f64) -> f64 {
        self.mean_limit + self.shift0 + kappa4 * self.shift4
    }

    pub fn variance(&self, kappa4: f64) -> f64 {
        self.var0 + kappa4 * self.var4
    }

    /// Scores an observed LES. κ₄ is floored at its attainable minimum.
    pub fn score(&self, tau: f64, kappa4: f64) -> Result<LesValue> {
        let k = kappa4.max(KAPPA4_MIN);
        let var = self.variance(k);
        if !(var > 0.0) {
            return Err(Error::Numeric(format!(
                "non-positive LES variance {var} at kappa4={k}"
            )));
        }
        LesValue::new(tau, self.mean(k), var.sqrt())
    }
}

/// Sample excess kurtosis over all entries of a standardized window.
pub fn estimate_kappa4(x: &TimeSeriesWindow) -> f64 {
    let m4 = x.data.iter().map(|v| v.powi(4)).sum::<f64>() / x.data.len() as f64;
    m4 - 3.0
}

/// Closed-form T2 variance, used as an oracle.
pub fn t2_variance_closed_form(c: f64, kappa4: f64) -> f64 {
    let m = 1.0 + 1.0 / c;
    32.0 * m * m / c + 16.0 / (c * c) + 16.0 * kappa4 * m * m / c
}
