//! The file-based pipeline the command line runs: simulate to CSV, load the
//! CSVs back, detect, then estimate from the written report.
//!
//! `cargo run --release --example csv_pipeline -- /tmp/rmt-demo`

use std::path::PathBuf;

use rmt_grid::cli::{cmd_detect, cmd_estimate, cmd_simulate, DetectArgs, EstimateArgs, SimulateArgs};

fn main() -> rmt_grid::Result<()> {
    let root = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("rmt-demo"), PathBuf::from);
    let sim = root.join("sim");
    let det = root.join("detect");

    let m = cmd_simulate(&SimulateArgs {
        builtin: Some("simple".into()),
        scenario: None,
        seed: None,
        out: sim.clone(),
    })?;
    println!("simulated: {:?}", m.outputs.iter().map(|o| &o.path).collect::<Vec<_>>());

    let report = cmd_detect(&DetectArgs {
        p: sim.join("P.csv"),
        u: sim.join("U.csv"),
        t: 100,
        dt: 4,
        phi: "chebyshevT2".into(),
        epsilon: 1.96,
        tlp: Some(sim.join("tlp.json")),
        k: None,
        snr_db: -10.0,
        seed: None,
        jobs: None,
        no_traces: false,
        out: det.clone(),
    })?;
    for e in report.events.iter().filter(|e| e.node != "systemwide") {
        println!("node {} change point at {} ({:?})", e.node, e.t_cp, e.kind);
    }

    let est = cmd_estimate(&EstimateArgs {
        p: sim.join("P.csv"),
        tlp: sim.join("tlp.json"),
        report: Some(det.join("report.json")),
        no_ulp: false,
        nodes: vec!["6".into(), "14".into()],
        out: root.join("estimate"),
    })?;
    for n in &est.nodes {
        println!("node {} coefficients {:?}", n.node, n.values);
    }
    println!("outputs under {}", root.display());
    Ok(())
}
