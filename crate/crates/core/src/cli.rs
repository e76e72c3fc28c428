//! The `rmt-grid` command line: `simulate`, `detect`, `estimate` and
//! `rmt-check`.
//!
//! Every command writes its outputs and a `manifest.json` into `--out`.
//! `RMT_SEED` in the environment overrides any seed flag.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::concat::{Eta, SnrReference};
use crate::detect::{detect, DetectConfig, DetectionReport, DetectionThreshold, WindowParams};
use crate::error::{Error, Result};
use crate::estimate::{solve_ls, LoadPattern, PatternLibrary};
use crate::ingest::{load_csv, sliding_windows, Quantity, RawSeriesSet, TimeSeriesWindow};
use crate::les::{les_of_window, LesMoments, TestFunction, DEFAULT_QUAD_NODES};
use crate::manifest::{ConfigHasher, RunManifest};
use crate::rng::{self, EntryLaw};
use crate::simulate::{self, ScenarioConfig, DEFAULT_SEED};
use crate::spectral::{covariance_spectrum, ks_distance, ring_fraction_inside, ring_transform, Convention, MpLaw};

pub const SEED_ENV: &str = "RMT_SEED";

#[derive(Debug, Parser)]
#[command(name = "rmt-grid", version, about = "Random-matrix detection and estimation of hidden load units")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate feeder telemetry with ground truth.
    Simulate(SimulateArgs),
    /// Build LES traces and classify change points.
    Detect(DetectArgs),
    /// Least-squares pattern coefficients per node.
    Estimate(EstimateArgs),
    /// Random-matrix diagnostics on synthetic or measured data.
    RmtCheck(RmtCheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Builtin scenario: `simple` or `complex`.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    pub builtin: Option<String>,
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Active power CSV.
    #[arg(long)]
    pub p: PathBuf,
    /// Voltage magnitude CSV.
    #[arg(long)]
    pub u: PathBuf,
    #[arg(long = "T", default_value_t = 100)]
    pub t: usize,
    #[arg(long = "dT", default_value_t = 1)]
    pub dt: usize,
    #[arg(long, default_value = "chebyshevT2")]
    pub phi: String,
    #[arg(long, default_value_t = 1.96)]
    pub epsilon: f64,
    /// Typical load pattern library (JSON) used to explain transitions.
    #[arg(long)]
    pub tlp: Option<PathBuf>,
    /// Factor copies per concatenated matrix (default: 0.3 N).
    #[arg(long)]
    pub k: Option<usize>,
    /// Signal-to-noise ratio of the factor copies in dB.
    #[arg(long, default_value_t = -10.0)]
    pub snr_db: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for trace construction (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Skip writing per-trace CSVs.
    #[arg(long)]
    pub no_traces: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub p: PathBuf,
    #[arg(long)]
    pub tlp: PathBuf,
    /// Detection report whose invisible-usage steps augment the library.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Fit typical patterns only, ignoring detected unknown patterns.
    #[arg(long)]
    pub no_ulp: bool,
    /// Restrict to these node ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub nodes: Vec<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Law {
    Mp,
    Ring,
    Clt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Entries {
    Gaussian,
    Bernoulli,
    Uniform,
}

impl From<Entries> for EntryLaw {
    fn from(e: Entries) -> Self {
        match e {
            Entries::Gaussian => EntryLaw::Gaussian,
            Entries::Bernoulli => EntryLaw::Bernoulli,
            Entries::Uniform => EntryLaw::Uniform,
        }
    }
}

#[derive(Debug, Args)]
pub struct RmtCheckArgs {
    /// Measured series (rows are nodes), checked window by window.
    #[arg(long, conflicts_with = "gaussian", required_unless_present = "gaussian")]
    pub csv: Option<PathBuf>,
    /// Synthetic iid matrices of size N x T.
    #[arg(long, num_args = 2, value_names = ["N", "T"])]
    pub gaussian: Option<Vec<usize>>,
    /// Entry distribution for synthetic matrices.
    #[arg(long, value_enum, default_value = "gaussian")]
    pub entries: Entries,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, value_enum, default_value = "mp")]
    pub law: Law,
    #[arg(long, default_value = "chebyshevT2")]
    pub phi: String,
    /// Window length for `--csv`.
    #[arg(long = "T", default_value_t = 100)]
    pub t: usize,
    /// Window step for `--csv` (default: T).
    #[arg(long = "dT")]
    pub dt: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Seed precedence: `RMT_SEED`, then the flag, then the default.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(flag.unwrap_or(DEFAULT_SEED)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a).map(|_| ()),
        Command::Detect(a) => cmd_detect(&a).map(|_| ()),
        Command::Estimate(a) => cmd_estimate(&a).map(|_| ()),
        Command::RmtCheck(a) => {
            let d = cmd_rmt_check(&a)?;
            println!("{}", serde_json::to_string_pretty(&d)?);
            Ok(())
        }
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<RunManifest> {
    let seed = resolve_seed(a.seed)?;
    let mut hasher = ConfigHasher::new("simulate");
    let cfg = match (&a.builtin, &a.scenario) {
        (Some(name), _) => simulate::builtin(name, seed)?,
        (None, Some(path)) => {
            let mut cfg = ScenarioConfig::load(path)?;
            if a.seed.is_some() || std::env::var(SEED_ENV).is_ok() {
                cfg.noise.seed = seed;
            }
            cfg
        }
        (None, None) => return Err(Error::Config("need --builtin or --scenario".into())),
    };
    hasher.settings(&cfg)?;
    let sim = simulate::run(&cfg)?;
    create_dir(&a.out)?;
    sim.telemetry.p.write_csv(&a.out.join("P.csv"))?;
    sim.telemetry.u.write_csv(&a.out.join("U.csv"))?;
    write_json(&a.out.join("truth.json"), &sim.truth)?;
    write_json(&a.out.join("tlp.json"), &cfg.tlp_library_file())?;
    write_json(&a.out.join("scenario.json"), &cfg)?;
    let outputs: Vec<String> = ["P.csv", "U.csv", "truth.json", "tlp.json", "scenario.json"]
        .map(String::from)
        .into();
    let m = RunManifest::new("simulate", hasher.finish(), cfg.noise.seed, &a.out, &outputs)?;
    m.write(&a.out)?;
    Ok(m)
}

fn load_library(path: &Path, samples: usize) -> Result<Vec<LoadPattern>> {
    let lib = PatternLibrary::load(path)?;
    let pats = lib.expand()?;
    if let Some(p) = pats.iter().find(|p| p.len() != samples) {
        return Err(Error::Shape(format!(
            "pattern `{}` has {} samples, series has {samples}",
            p.id,
            p.len()
        )));
    }
    Ok(pats)
}

#[derive(Serialize)]
struct DetectSettings<'a> {
    window: WindowParams,
    phi: &'a str,
    epsilon: f64,
    k: Option<usize>,
    eta: Eta,
    seed: u64,
}

pub fn cmd_detect(a: &DetectArgs) -> Result<DetectionReport> {
    let seed = resolve_seed(a.seed)?;
    let phi: TestFunction = a.phi.parse()?;
    let threshold = DetectionThreshold::new(a.epsilon)?;
    if a.t == 0 || a.dt == 0 {
        return Err(Error::Config("--T and --dT must be positive".into()));
    }
    let cfg = DetectConfig {
        window: WindowParams { t: a.t, dt: a.dt },
        phi,
        threshold,
        k: a.k,
        eta: Eta::Snr {
            db: a.snr_db,
            reference: SnrReference::RobustNoise,
        },
        seed,
        ..DetectConfig::default()
    };
    let mut hasher = ConfigHasher::new("detect");
    hasher.settings(&DetectSettings {
        window: cfg.window,
        phi: cfg.phi.name(),
        epsilon: a.epsilon,
        k: a.k,
        eta: cfg.eta,
        seed,
    })?;
    hasher.file(&a.p)?.file(&a.u)?;
    let p = load_csv(&a.p, Quantity::ActivePower)?;
    let u = load_csv(&a.u, Quantity::VoltageMagnitude)?;
    let library = match &a.tlp {
        Some(path) => {
            hasher.file(path)?;
            load_library(path, p.len())?
        }
        None => Vec::new(),
    };
    let outcome = with_pool(a.jobs, || detect(&p, &u, &library, &cfg))?;

    create_dir(&a.out)?;
    let mut outputs = vec!["report.json".to_string()];
    let mut report = outcome.report;
    if !a.no_traces {
        let dir = a.out.join("traces");
        create_dir(&dir)?;
        let mut refs = vec!["traces/state.csv".to_string()];
        outcome.state_trace.write_csv(&a.out.join(&refs[0]))?;
        for (tr, id) in outcome.node_traces.iter().zip(&p.node_ids) {
            let r = format!("traces/node_{id}.csv");
            tr.write_csv(&a.out.join(&r))?;
            refs.push(r);
        }
        outputs.extend(refs.iter().cloned());
        report.traces_ref = refs;
    }
    write_json(&a.out.join("report.json"), &report)?;
    RunManifest::new("detect", hasher.finish(), seed, &a.out, &outputs)?.write(&a.out)?;
    Ok(report)
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?
            .install(f),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeEstimate {
    pub node: String,
    pub ids: Vec<String>,
    /// Coefficients in the units of the power series.
    pub values: Vec<f64>,
    /// Coefficients normalized to sum to one.
    pub shares: Vec<f64>,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub schema: u32,
    pub with_ulp: bool,
    pub nodes: Vec<NodeEstimate>,
}

pub fn cmd_estimate(a: &EstimateArgs) -> Result<EstimateReport> {
    let mut hasher = ConfigHasher::new("estimate");
    hasher.settings(&(a.no_ulp, &a.nodes))?;
    hasher.file(&a.p)?.file(&a.tlp)?;
    let p = load_csv(&a.p, Quantity::ActivePower)?;
    let tlp = load_library(&a.tlp, p.len())?;
    let report = match (&a.report, a.no_ulp) {
        (Some(path), false) => {
            hasher.file(path)?;
            let r = DetectionReport::load(path)?;
            if r.samples != p.len() {
                return Err(Error::Shape(format!(
                    "report covers {} samples, series has {}",
                    r.samples,
                    p.len()
                )));
            }
            Some(r)
        }
        _ => None,
    };
    let nodes: Vec<usize> = if a.nodes.is_empty() {
        (0..p.n()).collect()
    } else {
        a.nodes
            .iter()
            .map(|id| p.index_of(id).ok_or_else(|| Error::Config(format!("no power series for node `{id}`"))))
            .collect::<Result<_>>()?
    };

    let mut out = EstimateReport {
        schema: 1,
        with_ulp: report.is_some(),
        nodes: Vec::new(),
    };
    let mut recon = nalgebra::DMatrix::zeros(nodes.len(), p.len());
    for (row, &i) in nodes.iter().enumerate() {
        let id = &p.node_ids[i];
        let mut pats = tlp.clone();
        if let Some(r) = &report {
            pats.extend(r.ulp_patterns(id));
        }
        let coef = solve_ls(&pats, &p.row(i))?;
        for (k, v) in coef.reconstruct(&pats).into_iter().enumerate() {
            recon[(row, k)] = v;
        }
        out.nodes.push(NodeEstimate {
            node: id.clone(),
            shares: coef.shares(),
            ids: coef.ids,
            values: coef.values,
            residual_norm: coef.residual_norm,
        });
    }
    create_dir(&a.out)?;
    write_json(&a.out.join("coefficients.json"), &out)?;
    let mut rs = RawSeriesSet::new(
        nodes.iter().map(|&i| p.node_ids[i].clone()).collect(),
        recon,
        Quantity::ActivePower,
        p.sample_period,
    )?;
    rs.timestamps = p.timestamps.clone();
    rs.write_csv(&a.out.join("reconstruction.csv"))?;
    let outputs = vec!["coefficients.json".to_string(), "reconstruction.csv".to_string()];
    RunManifest::new("estimate", hasher.finish(), 0, &a.out, &outputs)?.write(&a.out)?;
    Ok(out)
}

/// Kolmogorov-Smirnov distance of a sample to the normal law with the
/// sample's own mean and standard deviation, and the 1% Lilliefors critical
/// value for that sample size.
pub fn lilliefors(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let d = match Normal::new(mean, sd) {
        Ok(law) => s
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = law.cdf(x);
                (f - i as f64 / n).max((i + 1) as f64 / n - f)
            })
            .fold(0.0, f64::max),
        Err(_) => 1.0,
    };
    (d, 1.031 / n.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltSummary {
    pub reps: usize,
    pub n: usize,
    pub t: usize,
    pub kappa4: f64,
    pub mean_theory: f64,
    pub mean_sample: f64,
    pub mean_se: f64,
    pub variance_theory: f64,
    pub variance_sample: f64,
    pub ks_d: f64,
    pub ks_critical_1pct: f64,
    pub mean_ok: bool,
    pub variance_ok: bool,
    pub normal_ok: bool,
}

/// Monte Carlo calibration of the LES of `reps` iid `N × T` matrices against
/// its theoretical mean and variance.
pub fn clt_calibration(n: usize, t: usize, reps: usize, law: EntryLaw, phi: &TestFunction, seed: u64) -> Result<CltSummary> {
    if reps < 2 {
        return Err(Error::Config("CLT calibration needs at least 2 repetitions".into()));
    }
    let moments = LesMoments::compute(n, n as f64 / t as f64, phi, DEFAULT_QUAD_NODES)?;
    let taus: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let x = TimeSeriesWindow::new(law.matrix(n, t, rng::derive_seed(seed, &[r as u64])), 0)?;
            les_of_window(&x, phi)
        })
        .collect::<Result<_>>()?;
    let m = reps as f64;
    let mean = taus.iter().sum::<f64>() / m;
    let var = taus.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let k4 = law.kappa4();
    let (mt, vt) = (moments.mean(k4), moments.variance(k4));
    let se = (var / m).sqrt();
    let (d, crit) = lilliefors(&taus);
    Ok(CltSummary {
        reps,
        n,
        t,
        kappa4: k4,
        mean_theory: mt,
        mean_sample: mean,
        mean_se: se,
        variance_theory: vt,
        variance_sample: var,
        ks_d: d,
        ks_critical_1pct: crit,
        mean_ok: (mean - mt).abs() <= 3.0 * se,
        variance_ok: (var / vt - 1.0).abs() <= 0.15,
        normal_ok: d < crit,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpSummary {
    pub windows: usize,
    pub c: f64,
    pub ks_mean: f64,
    pub ks_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingSummary {
    pub windows: usize,
    pub c: f64,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub margin: f64,
    /// Fraction of all eigenvalue moduli inside the widened annulus.
    pub fraction_inside: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowCltSummary {
    pub windows: usize,
    pub epsilon: f64,
    pub in_band_fraction: f64,
    pub z_mean: f64,
    pub z_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "camelCase")]
pub enum Diagnostics {
    Mp(MpSummary),
    Ring(RingSummary),
    Clt(CltSummary),
    CltWindows(WindowCltSummary),
}

pub const RING_MARGIN: f64 = 0.05;

pub fn mp_summary(windows: &[TimeSeriesWindow]) -> Result<MpSummary> {
    let ks: Vec<f64> = windows
        .par_iter()
        .map(|x| {
            let s = covariance_spectrum(x, Convention::OverT)?;
            ks_distance(&s, &MpLaw::new(x.c(), Convention::OverT)?)
        })
        .collect::<Result<_>>()?;
    Ok(MpSummary {
        windows: ks.len(),
        c: windows.first().map_or(0.0, |w| w.c()),
        ks_mean: ks.iter().sum::<f64>() / ks.len().max(1) as f64,
        ks_max: ks.iter().copied().fold(0.0, f64::max),
    })
}

pub fn ring_summary(windows: &[TimeSeriesWindow], seed: u64) -> Result<RingSummary> {
    let c = windows.first().map_or(0.0, |w| w.c());
    let eigs: Vec<_> = windows
        .par_iter()
        .enumerate()
        .map(|(i, x)| ring_transform(x, rng::derive_seed(seed, &[i as u64])))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let (inner, outer) = crate::spectral::ring_radii(c);
    Ok(RingSummary {
        windows: windows.len(),
        c,
        inner_radius: inner,
        outer_radius: outer,
        margin: RING_MARGIN,
        fraction_inside: ring_fraction_inside(&eigs, c, RING_MARGIN),
    })
}

pub fn cmd_rmt_check(a: &RmtCheckArgs) -> Result<Diagnostics> {
    let seed = resolve_seed(a.seed)?;
    let phi: TestFunction = a.phi.parse()?;
    let mut hasher = ConfigHasher::new("rmt-check");
    hasher.settings(&(a.law, format!("{:?}", a.entries), a.reps, phi.name(), a.t, a.dt, &a.gaussian, seed))?;
    if a.reps == 0 {
        return Err(Error::Config("--reps must be at least 1".into()));
    }
    let windows: Vec<TimeSeriesWindow> = match (&a.csv, &a.gaussian) {
        (Some(path), _) => {
            hasher.file(path)?;
            let set = load_csv(path, Quantity::VoltageMagnitude)?;
            let dt = a.dt.unwrap_or(a.t);
            if dt == 0 {
                return Err(Error::Config("--dT must be positive".into()));
            }
            sliding_windows(&set, a.t, dt)?.collect::<Result<_>>()?
        }
        (None, Some(nt)) => {
            let (n, t) = (nt[0], nt[1]);
            if a.law == Law::Clt {
                let d = Diagnostics::Clt(clt_calibration(n, t, a.reps, a.entries.into(), &phi, seed)?);
                return finish_check(a, hasher, seed, d);
            }
            (0..a.reps)
                .map(|r| {
                    let law: EntryLaw = a.entries.into();
                    TimeSeriesWindow::new(law.matrix(n, t, rng::derive_seed(seed, &[r as u64])), 0)
                })
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::Config("need --csv or --gaussian N T".into())),
    };
    let d = match a.law {
        Law::Mp => Diagnostics::Mp(mp_summary(&windows)?),
        Law::Ring => Diagnostics::Ring(ring_summary(&windows, seed)?),
        Law::Clt => {
            let first = windows.first().ok_or(Error::InsufficientData { window: a.t, available: 0 })?;
            let moments = LesMoments::compute(first.n(), first.c(), &phi, DEFAULT_QUAD_NODES)?;
            let z: Vec<f64> = windows
                .par_iter()
                .map(|x| {
                    let tau = les_of_window(x, &phi)?;
                    Ok(moments.score(tau, crate::les::estimate_kappa4(x))?.z)
                })
                .collect::<Result<_>>()?;
            let eps = DetectionThreshold::default().epsilon;
            let m = z.len() as f64;
            let mean = z.iter().sum::<f64>() / m;
            Diagnostics::CltWindows(WindowCltSummary {
                windows: z.len(),
                epsilon: eps,
                in_band_fraction: z.iter().filter(|v| v.abs() < eps).count() as f64 / m,
                z_mean: mean,
                z_sd: (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m).sqrt(),
            })
        }
    };
    finish_check(a, hasher, seed, d)
}

fn finish_check(a: &RmtCheckArgs, hasher: ConfigHasher, seed: u64, d: Diagnostics) -> Result<Diagnostics> {
    create_dir(&a.out)?;
    write_json(&a.out.join("diagnostics.json"), &d)?;
    RunManifest::new("rmt-check", hasher.finish(), seed, &a.out, &["diagnostics.json".to_string()])?.write(&a.out)?;
    Ok(d)
}
