//! Sliding-window LES traces, the per-window hypothesis test, change-point
//! localization and fraud/invisible classification.
//!
//! A change point at sample `t₀` disturbs every window that straddles it, so
//! with window length `T` a trace indexed by window end shows a spike of width
//! about `T` whose extreme sits near `t₀ + T/2`.
//!
//! Classification is a declared heuristic. For each node the observed power
//! step at every candidate time is regressed (robustly) on the steps of the
//! typical-pattern library. Steps the library explains are pattern
//! transitions. The rest are anomalies, paired into intervals by sign. An
//! interval whose two ends both show a chain reaction (the voltage trace moves
//! together with unexplained steps elsewhere, or with no routine transition at
//! all) is invisible usage; otherwise it is fraud.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concat::{build_factor_matrix, median, robust_noise_scale, standardized_concat, ConcatSpec, Eta};
use crate::error::{Error, Result};
use crate::estimate::{LoadPattern, PatternKind};
use crate::ingest::{standardize_rows, window_count, Jitter, RawSeriesSet, TimeSeriesWindow};
use crate::les::{estimate_kappa4, les_of_window, LesMoments, LesValue, TestFunction, DEFAULT_QUAD_NODES};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowParams {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "dT")]
    pub dt: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self { t: 100, dt: 1 }
    }
}

impl WindowParams {
    /// Samples within which a change point matches a pattern transition.
    pub fn tol_match(&self) -> usize {
        2 * self.dt * self.t.div_ceil(20)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "type", content = "node")]
pub enum TraceLabel {
    StateOnly,
    NodeConcat(String),
}

/// LES over sliding windows, indexed by exclusive window end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesTrace {
    pub label: TraceLabel,
    pub window: WindowParams,
    /// Matrix rows per window (state rows plus factor rows).
    pub rows: usize,
    pub times: Vec<usize>,
    pub tau: Vec<f64>,
    pub mean_theory: Vec<f64>,
    pub sigma_theory: Vec<f64>,
    pub kappa4: Vec<f64>,
}

impl LesTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value(&self, i: usize) -> LesValue {
        LesValue {
            tau: self.tau[i],
            mean_theory: self.mean_theory[i],
            sigma_theory: self.sigma_theory[i],
            z: self.z(i),
        }
    }

    pub fn z(&self, i: usize) -> f64 {
        (self.tau[i] - self.mean_theory[i]) / self.sigma_theory[i]
    }

    pub fn z_scores(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.z(i)).collect()
    }

    /// Fraction of windows that pass the test.
    pub fn in_band_fraction(&self, th: &DetectionThreshold) -> f64 {
        if self.is_empty() {
            return 1.0;
        }
        let h0 = (0..self.len())
            .filter(|&i| hypothesis_test(&self.value(i), th) == Hypothesis::H0)
            .count();
        h0 as f64 / self.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |s: String| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
        put("time,tau,mean,sigma,z,kappa4\n".into())?;
        for i in 0..self.len() {
            put(format!(
                "{},{:?},{:?},{:?},{:?},{:?}\n",
                self.times[i],
                self.tau[i],
                self.mean_theory[i],
                self.sigma_theory[i],
                self.z(i),
                self.kappa4[i]
            ))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionThreshold {
    pub epsilon: f64,
}

impl Default for DetectionThreshold {
    fn default() -> Self {
        Self { epsilon: 1.96 }
    }
}

impl DetectionThreshold {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hypothesis {
    H0,
    H1,
}

/// Two-sided test: abnormal iff `|z| ≥ ε`.
pub fn hypothesis_test(v: &LesValue, th: &DetectionThreshold) -> Hypothesis {
    if v.z.abs() >= th.epsilon {
        Hypothesis::H1
    } else {
        Hypothesis::H0
    }
}

/// A power series concatenated under the state matrix.
#[derive(Debug, Clone, Copy)]
pub struct Factor<'a> {
    pub node: &'a str,
    pub series: &'a [f64],
    pub spec: ConcatSpec,
}

/// Computes τ and its theoretical band for every window.
///
/// With a factor, each window stacks the state rows over `K` noisy copies of
/// the factor window; the copy noise is drawn from a stream derived from the
/// spec seed and the window start, so traces are reproducible window by window.
pub fn build_trace(
    state: &RawSeriesSet,
    window: WindowParams,
    phi: &TestFunction,
    factor: Option<Factor<'_>>,
    jitter: Jitter,
) -> Result<LesTrace> {
    build_trace_with_nodes(state, window, phi, factor, jitter, DEFAULT_QUAD_NODES)
}

pub fn build_trace_with_nodes(
    state: &RawSeriesSet,
    window: WindowParams,
    phi: &TestFunction,
    factor: Option<Factor<'_>>,
    jitter: Jitter,
    quad_nodes: usize,
) -> Result<LesTrace> {
    let total = state.len();
    let count = window_count(total, window.t, window.dt)?;
    if let Some(f) = &factor {
        if f.series.len() != total {
            return Err(Error::Shape(format!(
                "factor `{}` has {} samples, state has {total}",
                f.node,
                f.series.len()
            )));
        }
    }
    let rows = state.n() + factor.as_ref().map_or(0, |f| f.spec.k);
    if rows > window.t {
        return Err(Error::AspectRatio { rows, cols: window.t });
    }
    let moments = LesMoments::compute(rows, rows as f64 / window.t as f64, phi, quad_nodes)?;
    let label = match &factor {
        Some(f) => TraceLabel::NodeConcat(f.node.to_string()),
        None => TraceLabel::StateOnly,
    };
    let mut tr = LesTrace {
        label,
        window,
        rows,
        times: Vec::with_capacity(count),
        tau: Vec::with_capacity(count),
        mean_theory: Vec::with_capacity(count),
        sigma_theory: Vec::with_capacity(count),
        kappa4: Vec::with_capacity(count),
    };
    for w in 0..count {
        let start = w * window.dt;
        let wj = match jitter {
            Jitter::Off => Jitter::Off,
            Jitter::Seeded(s) => Jitter::Seeded(rng::derive_seed(s, &[start as u64])),
        };
        let raw = state.values.columns(start, window.t);
        let x = match &factor {
            None => TimeSeriesWindow::new(standardize_rows(raw, Some(&state.node_ids), wj)?, start)?,
            Some(f) => {
                let spec = ConcatSpec {
                    seed: rng::derive_seed(f.spec.seed, &[start as u64]),
                    ..f.spec
                };
                let d = build_factor_matrix(&f.series[start..start + window.t], &spec)?;
                standardized_concat(raw, &d, start, wj)?
            }
        };
        let tau = les_of_window(&x, phi)?;
        let k4 = estimate_kappa4(&x);
        let v = moments.score(tau, k4)?;
        tr.times.push(x.end_index());
        tr.tau.push(tau);
        tr.mean_theory.push(v.mean_theory);
        tr.sigma_theory.push(v.sigma_theory);
        tr.kappa4.push(k4);
    }
    Ok(tr)
}

/// Classification of a change point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EventKind {
    Fraud,
    Invisible,
    TlpTransition,
    Unclassified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePointEvent {
    /// Node id, or `systemwide` for events of the state-only trace.
    pub node: String,
    pub t_cp: usize,
    pub t_extreme: f64,
    /// First and last out-of-band window index of the spike.
    pub spike_span: [usize; 2],
    /// Spike width in samples.
    pub span_samples: usize,
    pub z_peak: f64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pattern: Option<String>,
    /// Observed power step at `t_cp` (after minus before), when estimated.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<f64>,
    /// Part of the step the pattern library does not explain.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual: Option<f64>,
}

pub const SYSTEMWIDE: &str = "systemwide";

fn trace_node(trace: &LesTrace) -> String {
    match &trace.label {
        TraceLabel::StateOnly => SYSTEMWIDE.to_string(),
        TraceLabel::NodeConcat(n) => n.clone(),
    }
}

/// Vertex of a least-squares parabola through `(x, y)`, if it is a maximum
/// inside the data range.
fn parabola_peak(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 5 {
        return None;
    }
    let x0 = xs[0];
    let a = DMatrix::from_fn(xs.len(), 3, |i, j| (xs[i] - x0).powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let coef = a.svd(true, true).solve(&b, 1e-12).ok()?;
    if coef[2] >= 0.0 {
        return None;
    }
    let v = x0 - coef[1] / (2.0 * coef[2]);
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    Some(v.clamp(lo, hi))
}

/// A spike's extent is followed outward from its out-of-band run down to this
/// fraction of the threshold.
const EXTENT_FRACTION: f64 = 0.5;

/// Groups runs of out-of-band windows into spikes and maps each spike to a
/// change point `T/2` before its extreme.
///
/// Runs separated by at most `T/4` samples are merged. Each run is widened
/// while `|z|` stays above half the threshold. Spikes with fewer than `T/2`
/// samples' worth of out-of-band windows are dropped as noise: a genuine step
/// disturbs every window that contains it, so its spike is about `T` wide. The extreme is the
/// vertex of a parabola fitted to `|z|` over the run, which is steadier than
/// the raw argmax on the flat top a step produces; short or convex runs fall
/// back to the argmax.
pub fn localize_changepoints(trace: &LesTrace, th: &DetectionThreshold, t: usize) -> Vec<ChangePointEvent> {
    let z = trace.z_scores();
    let h1: Vec<usize> = (0..trace.len()).filter(|&i| z[i].abs() >= th.epsilon).collect();
    let Some(&first) = h1.first() else {
        return Vec::new();
    };
    let merge = t / 4;
    let mut runs = Vec::new();
    let (mut start, mut prev) = (first, first);
    for &i in &h1[1..] {
        if trace.times[i] - trace.times[prev] > merge {
            runs.push((start, prev));
            start = i;
        }
        prev = i;
    }
    runs.push((start, prev));

    let node = trace_node(trace);
    let floor = th.epsilon * EXTENT_FRACTION;
    let last = trace.len() - 1;
    runs.into_iter()
        .filter_map(|(a, b)| {
            let (mut lo, mut hi) = (a, b);
            while lo > 0 && z[lo - 1].abs() >= floor {
                lo -= 1;
            }
            while hi < last && z[hi + 1].abs() >= floor {
                hi += 1;
            }
            let span_samples = trace.times[hi] - trace.times[lo] + trace.window.dt;
            let out_of_band = (a..=b).filter(|&i| z[i].abs() >= th.epsilon).count() * trace.window.dt;
            if out_of_band * 2 < t {
                return None;
            }
            let xs: Vec<f64> = (a..=b).map(|i| trace.times[i] as f64).collect();
            let ys: Vec<f64> = (a..=b).map(|i| z[i].abs()).collect();
            let (imax, zmax) = ys
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            let t_extreme = parabola_peak(&xs, &ys).unwrap_or(xs[imax]);
            let t_cp = (t_extreme - t as f64 / 2.0).round().max(0.0) as usize;
            Some(ChangePointEvent {
                node: node.clone(),
                t_cp,
                t_extreme,
                spike_span: [lo, hi],
                span_samples,
                z_peak: zmax,
                kind: EventKind::Unclassified,
                pattern: None,
                step: None,
                residual: None,
            })
        })
        .collect()
}

/// Tuning of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    /// Samples skipped on each side of a change point when measuring a step.
    pub guard: usize,
    /// Samples averaged on each side.
    pub width: usize,
    /// A step is significant above this many standard errors.
    pub significance: f64,
    /// A residual below this fraction of the observed step counts as explained.
    pub explain_fraction: f64,
    pub tol_match: usize,
}

impl ClassifyOptions {
    pub fn for_window(window: &WindowParams) -> Self {
        Self {
            guard: 8,
            width: 150,
            significance: 6.0,
            explain_fraction: 0.25,
            tol_match: window.tol_match(),
        }
    }
}

/// Mean over `[t+g, t+g+w)` minus mean over `[t-g-w, t-g)`, or `None` near
/// the series edges.
pub fn step_at(x: &[f64], t: usize, guard: usize, width: usize) -> Option<f64> {
    let reach = guard + width;
    if t < reach || t + reach > x.len() {
        return None;
    }
    let after = x[t + guard..t + reach].iter().sum::<f64>() / width as f64;
    let before = x[t - reach..t - guard].iter().sum::<f64>() / width as f64;
    Some(after - before)
}

/// Iteratively reweighted least squares: a few L1 passes to get away from
/// outliers, then Tukey's bisquare with a MAD scale.
fn robust_fit(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let (n, m) = a.shape();
    if m == 0 || n == 0 {
        return DVector::zeros(m);
    }
    let ymax = y.amax().max(1.0);
    let mut w = DVector::from_element(n, 1.0);
    let mut coef = DVector::zeros(m);
    for it in 0..50 {
        let sw = w.map(f64::sqrt);
        let aw = DMatrix::from_fn(n, m, |i, j| a[(i, j)] * sw[i]);
        let yw = y.component_mul(&sw);
        match aw.svd(true, true).solve(&yw, 1e-10) {
            Ok(c) => coef = c,
            Err(_) => break,
        }
        let r = y - a * &coef;
        if it < 10 {
            w = r.map(|v| 1.0 / v.abs().max(1e-6 * ymax));
        } else {
            let mut abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
            let s = (1.4826 * median(&mut abs)).max(1e-9 * ymax);
            w = r.map(|v| {
                let u = v / (4.685 * s);
                if u.abs() < 1.0 {
                    (1.0 - u * u).powi(2)
                } else {
                    0.0
                }
            });
            if w.iter().filter(|&&v| v > 0.0).count() < m {
                break;
            }
        }
    }
    coef
}

/// Out-of-band windows of the state-only trace.
struct StateActivity {
    /// Window ends, sorted.
    h1_ends: Vec<usize>,
    t: usize,
}

impl StateActivity {
    fn new(trace: &LesTrace, th: &DetectionThreshold) -> Self {
        Self {
            h1_ends: (0..trace.len())
                .filter(|&i| hypothesis_test(&trace.value(i), th) == Hypothesis::H1)
                .map(|i| trace.times[i])
                .collect(),
            t: trace.window.t,
        }
    }

    /// Whether some window containing sample `t` is out of band.
    fn active(&self, t: usize) -> bool {
        let i = self.h1_ends.partition_point(|&e| e <= t);
        self.h1_ends.get(i).is_some_and(|&e| e <= t + self.t)
    }
}

/// Per-node result of the step analysis, before interval pairing.
#[derive(Debug, Clone)]
struct NodeSteps {
    node: String,
    events: Vec<ChangePointEvent>,
    /// Indices into `events` of significant but unexplained steps.
    anomalies: Vec<usize>,
    /// Times of significant steps the library explains.
    explained: Vec<usize>,
}

fn analyse_node(
    trace: &LesTrace,
    x: &[f64],
    library: &[LoadPattern],
    state: &StateActivity,
    th: &DetectionThreshold,
    opts: &ClassifyOptions,
) -> NodeSteps {
    let node = trace_node(trace);
    let spikes = localize_changepoints(trace, th, trace.window.t);
    let mut lib_cps: Vec<usize> = library.iter().flat_map(|p| p.cps.iter().copied()).collect();
    let mut cands: Vec<usize> = lib_cps.iter().copied().chain(spikes.iter().map(|e| e.t_cp)).collect();
    cands.sort_unstable();
    cands.dedup();
    lib_cps.sort_unstable();
    lib_cps.dedup();
    let cands: Vec<usize> = cands
        .into_iter()
        .filter(|&t| step_at(x, t, opts.guard, opts.width).is_some())
        .collect();

    // Library patterns that never step carry no information here.
    let lib_steps = |t: usize| -> Vec<f64> {
        library
            .iter()
            .map(|p| step_at(&p.profile, t, opts.guard, opts.width).unwrap_or(0.0))
            .collect()
    };
    let cols: Vec<usize> = (0..library.len())
        .filter(|&j| cands.iter().any(|&t| lib_steps(t)[j].abs() > 1e-12))
        .collect();
    let a = DMatrix::from_fn(cands.len(), cols.len(), |i, j| lib_steps(cands[i])[cols[j]]);
    let y = DVector::from_iterator(cands.len(), cands.iter().map(|&t| step_at(x, t, opts.guard, opts.width).unwrap()));
    let coef = robust_fit(&a, &y);

    let se = robust_noise_scale(x) * (2.0 / opts.width as f64).sqrt();
    let mut out = NodeSteps {
        node: node.clone(),
        events: Vec::new(),
        anomalies: Vec::new(),
        explained: Vec::new(),
    };
    for mut e in spikes {
        let Some(obs) = step_at(x, e.t_cp, opts.guard, opts.width) else {
            out.events.push(e);
            continue;
        };
        e.step = Some(obs);
        if obs.abs() <= opts.significance * se {
            // No step of its own: the spike belongs to the state block.
            if !state.active(e.t_cp) {
                out.events.push(e);
            }
            continue;
        }
        let ls = lib_steps(e.t_cp);
        let contrib: Vec<(usize, f64)> = cols.iter().enumerate().map(|(j, &c)| (c, coef[j] * ls[c])).collect();
        let pred: f64 = contrib.iter().map(|(_, v)| v).sum();
        let res = obs - pred;
        e.residual = Some(res);
        let explained = res.abs() <= (opts.explain_fraction * obs.abs()).max(opts.significance * se);
        if explained {
            let matched = contrib
                .iter()
                .filter(|(c, _)| library[*c].cps.iter().any(|&cp| cp.abs_diff(e.t_cp) <= opts.tol_match))
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
            if let Some(&(c, _)) = matched {
                e.kind = EventKind::TlpTransition;
                e.pattern = Some(library[c].id.clone());
            }
            out.explained.push(e.t_cp);
            out.events.push(e);
        } else {
            out.anomalies.push(out.events.len());
            out.events.push(e);
        }
    }
    out
}

/// Anomalous interval on one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInterval {
    pub node: String,
    pub start: usize,
    /// `None` for an orphan change point with no partner.
    pub end: Option<usize>,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcatInfo {
    pub k: usize,
    pub eta: Eta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowInfo {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "dT")]
    pub dt: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UlpRecord {
    pub node: String,
    pub intervals: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub schema: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scenario: Option<String>,
    pub window: WindowInfo,
    pub epsilon: f64,
    pub phi: String,
    pub concat: ConcatInfo,
    pub samples: usize,
    pub state_in_band_fraction: f64,
    /// Events sorted by time then node.
    pub events: Vec<ChangePointEvent>,
    pub intervals: Vec<AnomalyInterval>,
    /// Step profiles of detected invisible usage, ready for estimation.
    pub ulps: Vec<UlpRecord>,
    #[serde(default)]
    pub traces_ref: Vec<String>,
}

impl DetectionReport {
    pub fn events_for<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a ChangePointEvent> + 'a {
        self.events.iter().filter(move |e| e.node == node)
    }

    /// Step profiles for `node`, one pattern covering all its invisible
    /// intervals.
    pub fn ulp_patterns(&self, node: &str) -> Vec<LoadPattern> {
        self.ulps
            .iter()
            .filter(|u| u.node == node)
            .map(|u| {
                let iv: Vec<(usize, usize)> = u.intervals.iter().map(|&[a, b]| (a, b)).collect();
                LoadPattern::step(format!("ulp{}", u.node), self.samples, &iv, PatternKind::Ulp)
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text)?;
        if r.schema != 1 {
            return Err(Error::Format(format!("unsupported report schema {}", r.schema)));
        }
        Ok(r)
    }
}

fn pair_by_sign(times_signs: &[(usize, f64)]) -> (Vec<(usize, usize)>, Vec<usize>) {
    let mut pairs = Vec::new();
    let mut orphans = Vec::new();
    let mut open: Option<(usize, f64)> = None;
    for &(t, s) in times_signs {
        match open {
            Some((t0, s0)) if s0.signum() != s.signum() => {
                pairs.push((t0, t));
                open = None;
            }
            Some((t0, _)) => {
                orphans.push(t0);
                open = Some((t, s));
            }
            None => open = Some((t, s)),
        }
    }
    if let Some((t0, _)) = open {
        orphans.push(t0);
    }
    (pairs, orphans)
}

/// Turns detected invisible change points of one node into a 0/1 profile of
/// length `samples`. Change points must pair up as opposite-signed steps.
pub fn build_ulp_step(events: &[ChangePointEvent], samples: usize) -> Result<LoadPattern> {
    let mut ts: Vec<(usize, f64)> = events
        .iter()
        .map(|e| (e.t_cp, e.residual.or(e.step).unwrap_or(e.z_peak)))
        .collect();
    ts.sort_by_key(|p| p.0);
    let node = events.first().map_or("ulp".to_string(), |e| format!("ulp{}", e.node));
    if let Some(e) = events.iter().find(|e| e.node != events[0].node) {
        return Err(Error::Config(format!(
            "ULP change points span nodes `{}` and `{}`",
            events[0].node, e.node
        )));
    }
    let (pairs, orphans) = pair_by_sign(&ts);
    if !orphans.is_empty() {
        return Err(Error::Pairing(orphans));
    }
    Ok(LoadPattern::step(node, samples, &pairs, PatternKind::Ulp))
}

/// Classifies change points on all node traces.
///
/// `power` supplies the per-node series the node traces were built from;
/// they are needed to measure the steps behind each spike.
pub fn attribute_and_classify(
    state_trace: &LesTrace,
    node_traces: &[LesTrace],
    power: &RawSeriesSet,
    tlp_library: &[LoadPattern],
    th: &DetectionThreshold,
    opts: &ClassifyOptions,
) -> Result<DetectionReport> {
    for tr in node_traces {
        if tr.window != state_trace.window || tr.times != state_trace.times {
            return Err(Error::Config(format!(
                "trace {:?} does not share the state trace's windows",
                tr.label
            )));
        }
    }
    if let Some(p) = tlp_library.iter().find(|p| p.len() != power.len()) {
        return Err(Error::Shape(format!(
            "pattern `{}` has {} samples, series has {}",
            p.id,
            p.len(),
            power.len()
        )));
    }
    let window = state_trace.window;
    let mut state_events = localize_changepoints(state_trace, th, window.t);
    let state = StateActivity::new(state_trace, th);

    let nodes: Vec<NodeSteps> = node_traces
        .iter()
        .map(|tr| {
            let id = trace_node(tr);
            let idx = power
                .index_of(&id)
                .ok_or_else(|| Error::Config(format!("no power series for node `{id}`")))?;
            Ok(analyse_node(tr, &power.row(idx), tlp_library, &state, th, opts))
        })
        .collect::<Result<_>>()?;

    let tol = opts.tol_match;
    let near = |a: usize, b: usize| a.abs_diff(b) <= tol;
    let explained_any = |t: usize| nodes.iter().any(|n| n.explained.iter().any(|&u| near(u, t)));
    let other_anomaly = |node: &str, t: usize| {
        nodes
            .iter()
            .filter(|n| n.node != node)
            .any(|n| n.anomalies.iter().any(|&i| near(n.events[i].t_cp, t)))
    };
    // A chain reaction: the physical state moved, and either another node
    // shows an unexplained step too, or no routine transition accounts for it.
    let chain = |node: &str, t: usize| state.active(t) && (other_anomaly(node, t) || !explained_any(t));

    let mut events = Vec::new();
    let mut intervals = Vec::new();
    let mut ulps = Vec::new();
    for n in &nodes {
        let mut evs = n.events.clone();
        let signed: Vec<(usize, f64)> = n
            .anomalies
            .iter()
            .map(|&i| (evs[i].t_cp, evs[i].residual.unwrap_or(0.0)))
            .collect();
        let (pairs, orphans) = pair_by_sign(&signed);
        let mut invisible = Vec::new();
        let mut set_kind = |t: usize, kind: EventKind| {
            for &i in &n.anomalies {
                if evs[i].t_cp == t {
                    evs[i].kind = kind;
                }
            }
        };
        for &(a, b) in &pairs {
            let kind = if chain(&n.node, a) && chain(&n.node, b) {
                invisible.push([a, b]);
                EventKind::Invisible
            } else {
                EventKind::Fraud
            };
            set_kind(a, kind);
            set_kind(b, kind);
            intervals.push(AnomalyInterval {
                node: n.node.clone(),
                start: a,
                end: Some(b),
                kind,
            });
        }
        for &t in &orphans {
            let kind = if chain(&n.node, t) {
                EventKind::Invisible
            } else {
                EventKind::Fraud
            };
            set_kind(t, kind);
            intervals.push(AnomalyInterval {
                node: n.node.clone(),
                start: t,
                end: None,
                kind,
            });
        }
        if !invisible.is_empty() {
            ulps.push(UlpRecord {
                node: n.node.clone(),
                intervals: invisible,
            });
        }
        events.extend(evs);
    }

    // Label state-trace events by what happened on the nodes at that time.
    for s in &mut state_events {
        let lib = tlp_library
            .iter()
            .filter_map(|p| p.cps.iter().map(|&c| c.abs_diff(s.t_cp)).min().map(|d| (d, &p.id)))
            .filter(|(d, _)| *d <= tol)
            .min_by_key(|(d, _)| *d);
        let inv = intervals
            .iter()
            .any(|iv| iv.kind == EventKind::Invisible && (near(iv.start, s.t_cp) || iv.end.is_some_and(|e| near(e, s.t_cp))));
        if inv {
            s.kind = EventKind::Invisible;
        } else if let Some((_, id)) = lib {
            s.kind = EventKind::TlpTransition;
            s.pattern = Some(id.clone());
        }
    }
    events.extend(state_events);
    events.sort_by(|a, b| (a.t_cp, &a.node).cmp(&(b.t_cp, &b.node)));
    intervals.sort_by(|a, b| (a.start, &a.node).cmp(&(b.start, &b.node)));

    let k = node_traces.first().map_or(0, |t| t.rows - state_trace.rows);
    Ok(DetectionReport {
        schema: 1,
        scenario: None,
        window: WindowInfo {
            n: state_trace.rows,
            t: window.t,
            dt: window.dt,
        },
        epsilon: th.epsilon,
        phi: String::new(),
        concat: ConcatInfo { k, eta: Eta::default() },
        samples: power.len(),
        state_in_band_fraction: state_trace.in_band_fraction(th),
        events,
        intervals,
        ulps,
        traces_ref: Vec::new(),
    })
}

/// Everything needed to run detection end to end.
#[derive(Debug, Clone)]
pub struct DetectConfig {
    pub window: WindowParams,
    pub phi: TestFunction,
    pub threshold: DetectionThreshold,
    /// Factor copies per concatenated matrix; `None` means `round(0.3 N)`.
    pub k: Option<usize>,
    pub eta: Eta,
    pub seed: u64,
    pub jitter: Jitter,
    pub quad_nodes: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            window: WindowParams::default(),
            phi: TestFunction::ChebyshevT2,
            threshold: DetectionThreshold::default(),
            k: None,
            eta: Eta::default(),
            seed: 0,
            jitter: Jitter::Off,
            quad_nodes: DEFAULT_QUAD_NODES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectionOutcome {
    pub report: DetectionReport,
    pub state_trace: LesTrace,
    pub node_traces: Vec<LesTrace>,
}

/// State trace from voltages, one concatenated trace per power series, then
/// classification. Traces run in parallel on the current rayon pool.
pub fn detect(
    power: &RawSeriesSet,
    voltage: &RawSeriesSet,
    tlp_library: &[LoadPattern],
    cfg: &DetectConfig,
) -> Result<DetectionOutcome> {
    if power.len() != voltage.len() {
        return Err(Error::Shape(format!(
            "power has {} samples, voltage has {}",
            power.len(),
            voltage.len()
        )));
    }
    let k = cfg.k.unwrap_or_else(|| ConcatSpec::default_k(voltage.n()));
    let jobs: Vec<Option<usize>> = std::iter::once(None).chain((0..power.n()).map(Some)).collect();
    let rows: Vec<Vec<f64>> = (0..power.n()).map(|i| power.row(i)).collect();
    let mut traces = jobs
        .par_iter()
        .map(|job| {
            let factor = job.map(|i| Factor {
                node: &power.node_ids[i],
                series: &rows[i],
                spec: ConcatSpec {
                    k,
                    eta: cfg.eta,
                    seed: rng::derive_seed(cfg.seed, &[i as u64]),
                },
            });
            build_trace_with_nodes(voltage, cfg.window, &cfg.phi, factor, cfg.jitter, cfg.quad_nodes)
        })
        .collect::<Result<Vec<_>>>()?;
    let state_trace = traces.remove(0);
    let opts = ClassifyOptions::for_window(&cfg.window);
    let mut report = attribute_and_classify(&state_trace, &traces, power, tlp_library, &cfg.threshold, &opts)?;
    report.phi = cfg.phi.name().to_string();
    report.concat = ConcatInfo { k, eta: cfg.eta };
    Ok(DetectionOutcome {
        report,
        state_trace,
        node_traces: traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn synthetic_trace(z: &[f64], t: usize) -> LesTrace {
        LesTrace {
            label: TraceLabel::NodeConcat("7".into()),
            window: WindowParams { t, dt: 1 },
            rows: 10,
            times: (0..z.len()).map(|i| i + t).collect(),
            tau: z.to_vec(),
            mean_theory: vec![0.0; z.len()],
            sigma_theory: vec![1.0; z.len()],
            kappa4: vec![0.0; z.len()],
        }
    }

    #[test]
    fn hypothesis_boundaries() {
        let th = DetectionThreshold::default();
        let v = |z: f64| LesValue { tau: z, mean_theory: 0.0, sigma_theory: 1.0, z };
        assert_eq!(hypothesis_test(&v(0.0), &th), Hypothesis::H0);
        assert_eq!(hypothesis_test(&v(1.96), &th), Hypothesis::H1);
        assert_eq!(hypothesis_test(&v(-2.5), &th), Hypothesis::H1);
        assert!(DetectionThreshold::new(0.0).is_err());
    }

    #[test]
    fn tol_match_is_ten_at_default_window() {
        assert_eq!(WindowParams::default().tol_match(), 10);
    }

    #[test]
    fn triangular_spike_localizes_half_a_window_back() {
        // A change at sample 600 with T=100 gives a tent over window ends
        // (600, 700) peaking at 650.
        let t = 100;
        let z: Vec<f64> = (0..1000)
            .map(|i| {
                let end = (i + t) as f64;
                (30.0 - (end - 650.0).abs() * 0.6).max(0.0)
            })
            .collect();
        let ev = localize_changepoints(&synthetic_trace(&z, t), &DetectionThreshold::default(), t);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].t_cp, 600);
        // Followed down to half the threshold: |end - 650| <= 48.
        assert_eq!(ev[0].span_samples, 97);
    }

    #[test]
    fn flat_trace_has_no_events_and_close_runs_merge() {
        let th = DetectionThreshold::default();
        let z = vec![0.5; 300];
        assert!(localize_changepoints(&synthetic_trace(&z, 100), &th, 100).is_empty());
        let mut z = vec![0.0; 300];
        for v in &mut z[20..50] {
            *v = 5.0;
        }
        for v in &mut z[60..90] {
            *v = 5.0;
        }
        assert_eq!(localize_changepoints(&synthetic_trace(&z, 100), &th, 100).len(), 1);
        for v in &mut z[150..210] {
            *v = 5.0;
        }
        assert_eq!(localize_changepoints(&synthetic_trace(&z, 100), &th, 100).len(), 2);
        // Short blips are noise.
        let mut z = vec![0.0; 300];
        for v in &mut z[100..120] {
            *v = 3.0;
        }
        assert!(localize_changepoints(&synthetic_trace(&z, 100), &th, 100).is_empty());
    }

    fn ev(node: &str, t: usize, step: f64) -> ChangePointEvent {
        ChangePointEvent {
            node: node.into(),
            t_cp: t,
            t_extreme: t as f64 + 50.0,
            spike_span: [0, 0],
            span_samples: 100,
            z_peak: 10.0,
            kind: EventKind::Invisible,
            pattern: None,
            step: Some(step),
            residual: Some(step),
        }
    }

    #[test]
    fn ulp_steps_from_paired_change_points() {
        let p = build_ulp_step(&[ev("20", 400, 27.0), ev("20", 2000, -27.0)], 9600).unwrap();
        assert_eq!(p.cps, vec![400, 2000]);
        assert_eq!(p.profile[399], 0.0);
        assert_eq!(p.profile[400], 1.0);
        assert_eq!(p.profile[1999], 1.0);
        assert_eq!(p.profile[2000], 0.0);
        let none = build_ulp_step(&[], 24).unwrap();
        assert!(none.profile.iter().all(|&v| v == 0.0));
        let p = build_ulp_step(&[ev("31", 5600, 1.0), ev("31", 8000, -1.0)], 9600).unwrap();
        assert_eq!(p.cps, vec![5600, 8000]);
        match build_ulp_step(&[ev("31", 5600, 1.0), ev("31", 8000, -1.0), ev("31", 9000, 1.0)], 9600) {
            Err(Error::Pairing(orphans)) => assert_eq!(orphans, vec![9000]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_measurement() {
        let x: Vec<f64> = (0..1000).map(|k| if k >= 500 { 3.0 } else { 1.0 }).collect();
        assert_eq!(step_at(&x, 500, 8, 150), Some(2.0));
        assert_eq!(step_at(&x, 100, 8, 150), None);
        assert_eq!(step_at(&x, 300, 8, 150), Some(0.0));
    }

    #[test]
    fn robust_fit_ignores_outliers() {
        let a = DMatrix::from_fn(12, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 + if j == 0 { 1.0 } else { 0.0 });
        let truth = DVector::from_vec(vec![2.0, -1.0]);
        let mut y = &a * &truth;
        y[3] += 50.0;
        y[8] -= 40.0;
        let c = robust_fit(&a, &y);
        assert!((c - truth).amax() < 1e-4);
    }

    proptest! {
        #[test]
        fn step_spike_localizes(cp in 200usize..700, peak in 3.0f64..200.0, t in prop::sample::select(vec![50usize, 100, 200])) {
            // Response of a step at `cp`: zero until the window reaches it,
            // then a dome over the T windows that contain it.
            let len = 1000;
            let z: Vec<f64> = (0..len)
                .map(|i| {
                    let end = (i + t) as f64;
                    let f = (end - cp as f64) / t as f64;
                    if f > 0.0 && f < 1.0 { peak * 4.0 * f * (1.0 - f) } else { 0.0 }
                })
                .collect();
            let ev = localize_changepoints(&synthetic_trace(&z, t), &DetectionThreshold::default(), t);
            prop_assert_eq!(ev.len(), 1);
            prop_assert!(ev[0].t_cp.abs_diff(cp) <= 1, "t_cp {} cp {}", ev[0].t_cp, cp);
            prop_assert!(((ev[0].t_extreme - ev[0].t_cp as f64) - t as f64 / 2.0).abs() <= 1.0);
            prop_assert!(ev[0].span_samples <= t);
        }

        #[test]
        fn pairing_covers_every_change_point(signs in proptest::collection::vec(any::<bool>(), 0..12)) {
            let ts: Vec<(usize, f64)> = signs.iter().enumerate().map(|(i, &s)| (i * 10, if s { 1.0 } else { -1.0 })).collect();
            let (pairs, orphans) = pair_by_sign(&ts);
            prop_assert_eq!(pairs.len() * 2 + orphans.len(), ts.len());
            for (a, b) in pairs {
                prop_assert!(a < b);
            }
        }
    }
}
