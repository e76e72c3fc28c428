//! Radial feeders and the lossless linearized DistFlow.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A branch between 1-based node ids, impedance in per unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone)]
pub struct FeederTopology {
    n: usize,
    branches: Vec<Branch>,
    pub v0: f64,
    /// For each 0-based node: parent node and the oriented branch impedance.
    parent: Vec<Option<(usize, f64, f64)>>,
    /// Breadth-first order from the substation.
    order: Vec<usize>,
}

const IEEE33_BRANCHES: &str = include_str!("../../data/ieee33_branches.csv");
const IEEE33_LOADS: &str = include_str!("../../data/ieee33_loads.csv");

/// Base voltage (kV) and power (MVA) of the bundled 33-bus data.
pub const IEEE33_BASE_KV: f64 = 12.66;
pub const IEEE33_BASE_MVA: f64 = 10.0;

impl FeederTopology {
    /// Validates that `branches` form a spanning tree over nodes `1..=n` and
    /// orients it away from node 1.
    pub fn new(n: usize, branches: Vec<Branch>, v0: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Topology("feeder has no nodes".into()));
        }
        if branches.len() != n - 1 {
            return Err(Error::Topology(format!(
                "a tree over {n} nodes needs {} branches, got {}",
                n - 1,
                branches.len()
            )));
        }
        if !(v0 > 0.0 && v0.is_finite()) {
            return Err(Error::Topology(format!("substation voltage {v0} must be positive")));
        }
        let mut adj: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); n];
        for b in &branches {
            if b.from == 0 || b.to == 0 || b.from > n || b.to > n || b.from == b.to {
                return Err(Error::Topology(format!("branch {}-{} has invalid endpoints", b.from, b.to)));
            }
            if !(b.r >= 0.0 && b.x >= 0.0 && b.r.is_finite() && b.x.is_finite()) {
                return Err(Error::Topology(format!("branch {}-{} has invalid impedance", b.from, b.to)));
            }
            adj[b.from - 1].push((b.to - 1, b.r, b.x));
            adj[b.to - 1].push((b.from - 1, b.r, b.x));
        }
        let mut parent = vec![None; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, r, x) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some((u, r, x));
                    queue.push_back(v);
                }
            }
        }
        if order.len() != n {
            let orphan = seen.iter().position(|s| !s).unwrap_or(0) + 1;
            return Err(Error::Topology(format!("node {orphan} is not reachable from node 1")));
        }
        Ok(Self {
            n,
            branches,
            v0,
            parent,
            order,
        })
    }

    /// The 33-bus test feeder with impedances converted to per unit on a
    /// 12.66 kV, 10 MVA base.
    pub fn ieee33() -> Self {
        let z_base = IEEE33_BASE_KV * IEEE33_BASE_KV / IEEE33_BASE_MVA;
        let mut rdr = csv::Reader::from_reader(IEEE33_BRANCHES.as_bytes());
        let branches = rdr
            .records()
            .map(|r| {
                let r = r.expect("bundled branch data is valid");
                let f = |i: usize| r[i].parse::<f64>().expect("bundled branch data is numeric");
                Branch {
                    from: f(0) as usize,
                    to: f(1) as usize,
                    r: f(2) / z_base,
                    x: f(3) / z_base,
                }
            })
            .collect();
        Self::new(33, branches, 1.0).expect("bundled feeder is a tree")
    }

    /// Standard 33-bus active loads in kW, node 1 first.
    pub fn ieee33_loads_kw() -> Vec<f64> {
        let mut rdr = csv::Reader::from_reader(IEEE33_LOADS.as_bytes());
        rdr.records()
            .map(|r| r.expect("bundled load data is valid")[1].parse().expect("numeric load"))
            .collect()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Flow on the branch feeding each node (0 for the root), for one sample.
    pub fn branch_flows(&self, injections: &[f64]) -> Vec<f64> {
        let mut flow = injections.to_vec();
        for &u in self.order.iter().rev() {
            if let Some((p, _, _)) = self.parent[u] {
                flow[p] += flow[u];
            }
        }
        flow
    }

    /// Voltage magnitudes (pu) for loads `p`, `q` (pu, consumption positive),
    /// one column per sample.
    ///
    /// `v_j² = v_parent² - 2 (r P + x Q)` where `P`, `Q` are the flows into `j`.
    pub fn power_flow(&self, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if p.nrows() != self.n || q.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "injections {:?}/{:?} do not match a {}-node feeder",
                p.shape(),
                q.shape(),
                self.n
            )));
        }
        if p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("power injections"));
        }
        let samples = p.ncols();
        let mut v = DMatrix::zeros(self.n, samples);
        let mut v2 = vec![0.0; self.n];
        for k in 0..samples {
            let pf = self.branch_flows(p.column(k).as_slice());
            let qf = self.branch_flows(q.column(k).as_slice());
            for &u in &self.order {
                v2[u] = match self.parent[u] {
                    None => self.v0 * self.v0,
                    Some((par, r, x)) => v2[par] - 2.0 * (r * pf[u] + x * qf[u]),
                };
                if v2[u] <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "voltage collapse at node {} sample {k}",
                        u + 1
                    )));
                }
                v[(u, k)] = v2[u].sqrt();
            }
        }
        Ok(v)
    }
}
