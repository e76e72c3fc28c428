//! Scenario configuration and the two builtin scenarios.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::topology::{Branch, FeederTopology};
use crate::error::{Error, Result};
use crate::estimate::{LoadPattern, PatternKind, PatternLibrary};

const TABLE1: &str = include_str!("../../data/table1_profiles.csv");
const TABLE2: &str = include_str!("../../data/table2_coefficients.csv");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Builtin { builtin: String },
    Explicit { v0: f64, branches: Vec<Branch> },
}

impl TopologySpec {
    pub fn build(&self, n: usize) -> Result<FeederTopology> {
        match self {
            TopologySpec::Builtin { builtin } if builtin == "ieee33" => {
                let t = FeederTopology::ieee33();
                if t.n() != n {
                    return Err(Error::Config(format!("ieee33 has 33 nodes, scenario lists {n}")));
                }
                Ok(t)
            }
            TopologySpec::Builtin { builtin } => {
                Err(Error::Config(format!("unknown builtin topology `{builtin}`")))
            }
            TopologySpec::Explicit { v0, branches } => FeederTopology::new(n, branches.clone(), *v0),
        }
    }
}

/// A daily pattern given hourly, as fractions of the pattern scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternSpec {
    pub id: String,
    pub hourly: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeConfig {
    pub id: String,
    pub base_load_kw: f64,
    /// Weights of the TLP library, in order.
    pub a: Vec<f64>,
    /// Weights of the ULP library, in order.
    #[serde(default)]
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Multiplicative power noise.
    pub gamma1: f64,
    /// Additive power noise, kW.
    pub gamma2: f64,
    /// Voltage meter noise, pu.
    pub voltage_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EventKind {
    /// Measured power is under-reported; the physical load is unchanged.
    Fraud,
    /// Real consumption nobody declared; the physical load changes.
    InvisibleUsage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Event {
    pub node: String,
    pub kind: EventKind,
    pub start: usize,
    pub end: usize,
    /// Fraction of the node's base load.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema: u32,
    pub name: String,
    pub topology: TopologySpec,
    pub samples_per_day: usize,
    /// Power base for converting kW loads to per unit.
    pub base_kva: f64,
    pub power_factor: f64,
    pub tlp_library: Vec<PatternSpec>,
    #[serde(default)]
    pub ulp_library: Vec<PatternSpec>,
    pub nodes: Vec<NodeConfig>,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub events: Vec<Event>,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sample_period_s(&self) -> f64 {
        86_400.0 / self.samples_per_day as f64
    }

    pub fn samples_per_hour(&self) -> usize {
        self.samples_per_day / 24
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| Error::Config(format!("unknown node `{id}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != 1 {
            return Err(Error::Format(format!("unsupported scenario schema {}", self.schema)));
        }
        if self.samples_per_day == 0 {
            return Err(Error::Config("samples_per_day must be positive".into()));
        }
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return Err(Error::Config(format!("power factor {} outside (0, 1]", self.power_factor)));
        }
        if !(self.base_kva > 0.0) {
            return Err(Error::Config("base_kva must be positive".into()));
        }
        for p in self.tlp_library.iter().chain(&self.ulp_library) {
            if p.hourly.is_empty() || !self.samples_per_day.is_multiple_of(p.hourly.len()) {
                return Err(Error::Config(format!(
                    "pattern `{}` has {} values, which do not divide {} samples",
                    p.id,
                    p.hourly.len(),
                    self.samples_per_day
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(Error::DuplicateId(n.id.clone()));
            }
            if n.a.len() != self.tlp_library.len() || n.b.len() != self.ulp_library.len() {
                return Err(Error::Config(format!(
                    "node `{}` has {}/{} coefficients for {}/{} patterns",
                    n.id,
                    n.a.len(),
                    n.b.len(),
                    self.tlp_library.len(),
                    self.ulp_library.len()
                )));
            }
            let all_nonneg = n.a.iter().chain(&n.b).all(|&v| v >= 0.0);
            let sum: f64 = n.a.iter().chain(&n.b).sum();
            if all_nonneg && sum > 1.0 + 1e-9 {
                return Err(Error::Config(format!(
                    "node `{}` weights sum to {sum}, above 1",
                    n.id
                )));
            }
        }
        self.topology.build(self.nodes.len())?;
        for (i, e) in self.events.iter().enumerate() {
            self.node_index(&e.node)?;
            if e.start >= e.end || e.end > self.samples_per_day {
                return Err(Error::Config(format!(
                    "event on node `{}` has invalid span [{}, {})",
                    e.node, e.start, e.end
                )));
            }
            if !(e.magnitude > 0.0) {
                return Err(Error::Config(format!("event on node `{}` needs magnitude > 0", e.node)));
            }
            for o in &self.events[..i] {
                if o.node == e.node && o.kind != e.kind && o.start < e.end && e.start < o.end {
                    return Err(Error::Config(format!(
                        "fraud and invisible usage overlap on node `{}`",
                        e.node
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn tlp_patterns(&self) -> Vec<LoadPattern> {
        self.expand(&self.tlp_library, PatternKind::Tlp)
    }

    pub fn ulp_patterns(&self) -> Vec<LoadPattern> {
        self.expand(&self.ulp_library, PatternKind::Ulp)
    }

    fn expand(&self, specs: &[PatternSpec], kind: PatternKind) -> Vec<LoadPattern> {
        specs
            .iter()
            .map(|p| {
                LoadPattern::from_hourly(p.id.clone(), &p.hourly, self.samples_per_day / p.hourly.len(), kind)
            })
            .collect()
    }

    /// The TLP library in the exchange format read by `estimate`.
    pub fn tlp_library_file(&self) -> PatternLibrary {
        let entries: Vec<_> = self
            .tlp_library
            .iter()
            .map(|p| (p.id.clone(), PatternKind::Tlp, p.hourly.clone()))
            .collect();
        PatternLibrary::from_patterns(self.samples_per_day, &entries)
    }
}

fn read_table(text: &str) -> Vec<Vec<f64>> {
    csv::Reader::from_reader(text.as_bytes())
        .records()
        .map(|r| {
            r.expect("bundled table is valid")
                .iter()
                .skip(1)
                .map(|c| c.parse().expect("bundled table is numeric"))
                .collect()
        })
        .collect()
}

/// Hourly profiles as fractions: `p1..p4` then `pu1`.
fn hourly_profiles() -> Vec<(String, Vec<f64>)> {
    let rows = read_table(TABLE1);
    ["p1", "p2", "p3", "p4", "pu1"]
        .iter()
        .enumerate()
        .map(|(j, id)| (id.to_string(), rows.iter().map(|r| r[j] / 100.0).collect()))
        .collect()
}

pub const SAMPLES_PER_DAY: usize = 9600;
pub const DEFAULT_SEED: u64 = 1;

fn default_noise(seed: u64) -> NoiseConfig {
    NoiseConfig {
        gamma1: 0.005,
        gamma2: 0.02,
        voltage_sigma: 1e-3,
        seed,
    }
}

fn node_ids() -> Vec<String> {
    (1..=33).map(|i| i.to_string()).collect()
}

/// Constant base loads with under-reporting of 5 kW on nodes 6 and 14
/// between 14:00 and 17:00.
pub fn simple(seed: u64) -> ScenarioConfig {
    let loads = FeederTopology::ieee33_loads_kw();
    let sph = SAMPLES_PER_DAY / 24;
    let fraud = |node: usize| Event {
        node: node.to_string(),
        kind: EventKind::Fraud,
        start: 14 * sph,
        end: 17 * sph,
        magnitude: 5.0 / loads[node - 1],
    };
    ScenarioConfig {
        schema: 1,
        name: "simple".into(),
        topology: TopologySpec::Builtin {
            builtin: "ieee33".into(),
        },
        samples_per_day: SAMPLES_PER_DAY,
        base_kva: 10_000.0,
        power_factor: 0.95,
        tlp_library: vec![PatternSpec {
            id: "flat".into(),
            hourly: vec![1.0; 24],
        }],
        ulp_library: Vec::new(),
        nodes: node_ids()
            .into_iter()
            .zip(&loads)
            .map(|(id, &base)| NodeConfig {
                id,
                base_load_kw: base,
                a: vec![1.0],
                b: Vec::new(),
            })
            .collect(),
        noise: default_noise(seed),
        events: vec![fraud(6), fraud(14)],
    }
}

/// Four typical patterns, one unknown pattern on nodes 20 and 31, and
/// under-reporting on nodes 6, 14 and 27.
pub fn complex(seed: u64) -> ScenarioConfig {
    let loads = FeederTopology::ieee33_loads_kw();
    let profiles = hourly_profiles();
    let coef = read_table(TABLE2);
    let sph = SAMPLES_PER_DAY / 24;
    let fraud = |node: usize, h0: usize, h1: usize, m: f64| Event {
        node: node.to_string(),
        kind: EventKind::Fraud,
        start: h0 * sph,
        end: h1 * sph,
        magnitude: m,
    };
    let spec = |(id, hourly): &(String, Vec<f64>)| PatternSpec {
        id: id.clone(),
        hourly: hourly.clone(),
    };
    ScenarioConfig {
        schema: 1,
        name: "complex".into(),
        topology: TopologySpec::Builtin {
            builtin: "ieee33".into(),
        },
        samples_per_day: SAMPLES_PER_DAY,
        base_kva: 10_000.0,
        power_factor: 0.95,
        tlp_library: profiles[..4].iter().map(spec).collect(),
        ulp_library: profiles[4..].iter().map(spec).collect(),
        nodes: node_ids()
            .into_iter()
            .zip(&loads)
            .zip(&coef)
            .map(|((id, &base), row)| NodeConfig {
                id,
                base_load_kw: base,
                a: row[..4].to_vec(),
                b: row[4..].to_vec(),
            })
            .collect(),
        noise: default_noise(seed),
        events: vec![
            fraud(6, 20, 22, 0.07),
            fraud(14, 14, 17, 0.08),
            fraud(27, 18, 19, 0.12),
        ],
    }
}

pub fn builtin(name: &str, seed: u64) -> Result<ScenarioConfig> {
    match name {
        "simple" => Ok(simple(seed)),
        "complex" => Ok(complex(seed)),
        other => Err(Error::Config(format!(
            "unknown builtin scenario `{other}` (expected simple or complex)"
        ))),
    }
}
