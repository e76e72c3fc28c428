//! Simulates the simple feeder with two fraud intervals and runs detection.
//!
//! `cargo run --release --example simple_fraud`

use rmt_grid::detect::{detect, DetectConfig, EventKind};
use rmt_grid::simulate::{run, simple, DEFAULT_SEED};

fn main() -> rmt_grid::Result<()> {
    let cfg = simple(DEFAULT_SEED);
    let sim = run(&cfg)?;
    let started = std::time::Instant::now();
    let out = detect(&sim.telemetry.p, &sim.telemetry.u, &cfg.tlp_patterns(), &DetectConfig::default())?;
    println!("detection took {:.1?}", started.elapsed());
    println!(
        "state trace in band: {:.1}%",
        100.0 * out.report.state_in_band_fraction
    );
    for e in &out.report.events {
        println!(
            "node {:>10}  t_cp {:>5}  span {:>4}  |z| {:>7.2}  {:?}",
            e.node, e.t_cp, e.span_samples, e.z_peak, e.kind
        );
    }
    let frauds: Vec<_> = out.report.events.iter().filter(|e| e.kind == EventKind::Fraud).collect();
    println!("{} fraud change points", frauds.len());
    Ok(())
}
