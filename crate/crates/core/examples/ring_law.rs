//! Single-ring law: eigenvalues of the transformed window fill the annulus
//! between sqrt(1 - c) and 1.
//!
//! `cargo run --release --example ring_law`

use rmt_grid::ingest::TimeSeriesWindow;
use rmt_grid::rng::EntryLaw;
use rmt_grid::spectral::{ring_fraction_inside, ring_radii, ring_transform};

fn main() -> rmt_grid::Result<()> {
    let (n, t) = (100, 400);
    let x = TimeSeriesWindow::new(EntryLaw::Gaussian.matrix(n, t, 5), 0)?;
    let eigs = ring_transform(&x, 6)?;
    let (inner, outer) = ring_radii(x.c());
    println!("c = {}, annulus [{inner:.3}, {outer}]", x.c());
    println!("inside (margin 0.05): {:.1}%", 100.0 * ring_fraction_inside(&eigs, x.c(), 0.05));
    let mut radii: Vec<f64> = eigs.iter().map(|z| z.norm()).collect();
    radii.sort_by(f64::total_cmp);
    println!(
        "moduli min {:.3}, median {:.3}, max {:.3}",
        radii[0],
        radii[radii.len() / 2],
        radii[radii.len() - 1]
    );
    Ok(())
}
