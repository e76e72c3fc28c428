//! Ground-truth scenarios on a radial feeder.
//!
//! Loads are mixtures of daily patterns scaled by a per-node base load (kW),
//! dressed with multiplicative and additive noise. Voltages come from a
//! linearized DistFlow. Fraud only touches the *measured* power; invisible
//! usage changes the physical load and therefore the voltages.

mod scenario;
mod topology;

pub use scenario::{
    builtin, complex, simple, Event, EventKind, NodeConfig, NoiseConfig, PatternSpec,
    ScenarioConfig, TopologySpec, DEFAULT_SEED, SAMPLES_PER_DAY,
};
pub use topology::{Branch, FeederTopology, IEEE33_BASE_KV, IEEE33_BASE_MVA};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::{Quantity, RawSeriesSet};
use crate::rng;

const LOAD_NOISE: u64 = 1;
const VOLTAGE_NOISE: u64 = 2;

/// Noise-free consumption `base · (Σ aᵢ pᵢ + Σ bⱼ uⱼ)`, kW.
pub fn clean_loads(cfg: &ScenarioConfig) -> DMatrix<f64> {
    let tlp = cfg.tlp_patterns();
    let ulp = cfg.ulp_patterns();
    let s = cfg.samples_per_day;
    DMatrix::from_fn(cfg.nodes.len(), s, |i, k| {
        let node = &cfg.nodes[i];
        let mix: f64 = node.a.iter().zip(&tlp).map(|(a, p)| a * p.profile[k]).sum::<f64>()
            + node.b.iter().zip(&ulp).map(|(b, p)| b * p.profile[k]).sum::<f64>();
        node.base_load_kw * mix
    })
}

/// `ỹ = y (1 + γ₁ z₁) + γ₂ z₂` with fresh standard normals per sample.
pub fn add_power_noise(y: &DMatrix<f64>, gamma1: f64, gamma2: f64, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, &[LOAD_NOISE]);
    let mut out = y.clone();
    for i in 0..y.nrows() {
        for k in 0..y.ncols() {
            let z1: f64 = r.sample(StandardNormal);
            let z2: f64 = r.sample(StandardNormal);
            out[(i, k)] = y[(i, k)] * (1.0 + gamma1 * z1) + gamma2 * z2;
        }
    }
    out
}

/// Physical per-node consumption before any events, noise included.
pub fn synthesize_loads(cfg: &ScenarioConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    Ok(add_power_noise(
        &clean_loads(cfg),
        cfg.noise.gamma1,
        cfg.noise.gamma2,
        cfg.noise.seed,
    ))
}

/// Voltage magnitudes for loads in kW, with reactive power from the power
/// factor.
pub fn power_flow(cfg: &ScenarioConfig, topology: &FeederTopology, loads_kw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = loads_kw / cfg.base_kva;
    let tan_phi = (1.0 - cfg.power_factor.powi(2)).sqrt() / cfg.power_factor;
    let q = &p * tan_phi;
    topology.power_flow(&p, &q)
}

/// Measured telemetry and the physical series behind it.
#[derive(Debug, Clone)]
pub struct Telemetry {
    pub p: RawSeriesSet,
    pub u: RawSeriesSet,
    pub p_true: DMatrix<f64>,
}

/// Adds invisible usage to the physical load (re-running the power flow if
/// needed), applies meter noise to voltages and subtracts fraud from measured
/// power.
pub fn apply_events(
    cfg: &ScenarioConfig,
    true_loads: &DMatrix<f64>,
    voltages: &DMatrix<f64>,
) -> Result<Telemetry> {
    cfg.validate()?;
    let topology = cfg.topology.build(cfg.nodes.len())?;
    let mut p_true = true_loads.clone();
    let mut invisible = false;
    for e in cfg.events.iter().filter(|e| e.kind == EventKind::InvisibleUsage) {
        let i = cfg.node_index(&e.node)?;
        let step = e.magnitude * cfg.nodes[i].base_load_kw;
        for k in e.start..e.end {
            p_true[(i, k)] += step;
        }
        invisible = true;
    }
    let mut u = if invisible {
        power_flow(cfg, &topology, &p_true)?
    } else {
        voltages.clone()
    };
    let mut r = rng::stream(cfg.noise.seed, &[VOLTAGE_NOISE]);
    for i in 0..u.nrows() {
        for k in 0..u.ncols() {
            let z: f64 = r.sample(StandardNormal);
            u[(i, k)] += cfg.noise.voltage_sigma * z;
        }
    }
    let mut p_meas = p_true.clone();
    for e in cfg.events.iter().filter(|e| e.kind == EventKind::Fraud) {
        let i = cfg.node_index(&e.node)?;
        let step = e.magnitude * cfg.nodes[i].base_load_kw;
        for k in e.start..e.end {
            p_meas[(i, k)] -= step;
        }
    }
    let ids: Vec<String> = cfg.nodes.iter().map(|n| n.id.clone()).collect();
    let period = Some(cfg.sample_period_s());
    Ok(Telemetry {
        p: RawSeriesSet::new(ids.clone(), p_meas, Quantity::ActivePower, period)?,
        u: RawSeriesSet::new(ids, u, Quantity::VoltageMagnitude, period)?,
        p_true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TruthKind {
    Fraud,
    Invisible,
}

/// One labelled interval in the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub node: String,
    pub kind: TruthKind,
    pub start: usize,
    pub end: usize,
    /// Fraction of base load.
    pub magnitude: f64,
    /// `event` for configured events, otherwise the ULP id that causes it.
    pub source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeTruth {
    pub id: String,
    pub base_load_kw: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub schema: u32,
    pub scenario: String,
    pub seed: u64,
    pub samples_per_day: usize,
    pub sample_period_s: f64,
    pub tlp_ids: Vec<String>,
    pub ulp_ids: Vec<String>,
    pub nodes: Vec<NodeTruth>,
    pub events: Vec<TruthEvent>,
}

fn support_intervals(profile: &[f64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, &v) in profile.iter().enumerate() {
        match (v != 0.0, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push((s, k));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, profile.len()));
    }
    out
}

pub fn ground_truth(cfg: &ScenarioConfig) -> GroundTruth {
    let ulp = cfg.ulp_patterns();
    let mut events = Vec::new();
    for node in &cfg.nodes {
        for (b, pat) in node.b.iter().zip(&ulp) {
            if *b == 0.0 {
                continue;
            }
            for (start, end) in support_intervals(&pat.profile) {
                events.push(TruthEvent {
                    node: node.id.clone(),
                    kind: TruthKind::Invisible,
                    start,
                    end,
                    magnitude: *b,
                    source: pat.id.clone(),
                });
            }
        }
    }
    for e in &cfg.events {
        events.push(TruthEvent {
            node: e.node.clone(),
            kind: match e.kind {
                EventKind::Fraud => TruthKind::Fraud,
                EventKind::InvisibleUsage => TruthKind::Invisible,
            },
            start: e.start,
            end: e.end,
            magnitude: e.magnitude,
            source: "event".into(),
        });
    }
    events.sort_by(|a, b| (a.start, &a.node).cmp(&(b.start, &b.node)));
    GroundTruth {
        schema: 1,
        scenario: cfg.name.clone(),
        seed: cfg.noise.seed,
        samples_per_day: cfg.samples_per_day,
        sample_period_s: cfg.sample_period_s(),
        tlp_ids: cfg.tlp_library.iter().map(|p| p.id.clone()).collect(),
        ulp_ids: cfg.ulp_library.iter().map(|p| p.id.clone()).collect(),
        nodes: cfg
            .nodes
            .iter()
            .map(|n| NodeTruth {
                id: n.id.clone(),
                base_load_kw: n.base_load_kw,
                a: n.a.clone(),
                b: n.b.clone(),
            })
            .collect(),
        events,
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub telemetry: Telemetry,
    pub truth: GroundTruth,
}

/// Full pipeline: loads, power flow, events, truth.
pub fn run(cfg: &ScenarioConfig) -> Result<SimulationOutput> {
    let loads = synthesize_loads(cfg)?;
    let topology = cfg.topology.build(cfg.nodes.len())?;
    let u = power_flow(cfg, &topology, &loads)?;
    let telemetry = apply_events(cfg, &loads, &u)?;
    Ok(SimulationOutput {
        telemetry,
        truth: ground_truth(cfg),
    })
}
