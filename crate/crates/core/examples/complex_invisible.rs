//! Complex feeder: routine pattern transitions, invisible usage on nodes 20
//! and 31, and three fraud intervals. Prints the classified events and the
//! recovered unknown-pattern step profiles.
//!
//! `cargo run --release --example complex_invisible`

use rmt_grid::detect::{detect, DetectConfig, EventKind};
use rmt_grid::simulate::{complex, run, DEFAULT_SEED};

fn main() -> rmt_grid::Result<()> {
    let cfg = complex(DEFAULT_SEED);
    let sim = run(&cfg)?;
    let out = detect(&sim.telemetry.p, &sim.telemetry.u, &cfg.tlp_patterns(), &DetectConfig::default())?;
    let sph = cfg.samples_per_hour() as f64;
    println!("state trace in band: {:.1}%", 100.0 * out.report.state_in_band_fraction);
    for e in out.report.events.iter().filter(|e| e.kind != EventKind::TlpTransition) {
        println!(
            "{:>10}  {:>5.2} h  |z| {:>6.2}  {:?}",
            e.node,
            e.t_cp as f64 / sph,
            e.z_peak,
            e.kind
        );
    }
    let tlp = out.report.events.iter().filter(|e| e.kind == EventKind::TlpTransition).count();
    println!("{tlp} change points explained by typical patterns");
    for iv in &out.report.intervals {
        println!("{:>10}  {:?}  {} .. {:?}", iv.node, iv.kind, iv.start, iv.end);
    }
    for u in &out.report.ulps {
        let hours: Vec<_> = u.intervals.iter().map(|[a, b]| (*a as f64 / sph, *b as f64 / sph)).collect();
        println!("ULP on node {}: {:?} h", u.node, hours);
    }
    println!("\nground truth:");
    for e in &sim.truth.events {
        println!("{:>10}  {:?}  {:.2} .. {:.2} h", e.node, e.kind, e.start as f64 / sph, e.end as f64 / sph);
    }
    Ok(())
}
