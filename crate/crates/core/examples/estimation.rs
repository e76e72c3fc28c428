//! Pattern coefficients for the nodes with invisible usage, with and without
//! the unknown-pattern steps recovered by detection.
//!
//! `cargo run --release --example estimation`

use rmt_grid::detect::{detect, DetectConfig};
use rmt_grid::estimate::{augment_and_estimate, solve_ls};
use rmt_grid::simulate::{complex, run, DEFAULT_SEED};

fn main() -> rmt_grid::Result<()> {
    let cfg = complex(DEFAULT_SEED);
    let sim = run(&cfg)?;
    let tlp = cfg.tlp_patterns();
    let report = detect(&sim.telemetry.p, &sim.telemetry.u, &tlp, &DetectConfig::default())?.report;
    let p = &sim.telemetry.p;
    for node in ["20", "31"] {
        let series = p.row(p.index_of(node).expect("node exists"));
        let truth = sim.truth.nodes.iter().find(|n| n.id == node).expect("node exists");
        let with = augment_and_estimate(&tlp, &report.ulp_patterns(node), &series)?;
        let without = solve_ls(&tlp, &series)?;
        println!("node {node}");
        println!("  truth        a={:?} b={:?}", truth.a, truth.b);
        println!("  with ULP     {:?} residual {:.1}", round(&with.shares()), with.residual_norm);
        println!("  without ULP  {:?} residual {:.1}", round(&without.shares()), without.residual_norm);
    }
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
