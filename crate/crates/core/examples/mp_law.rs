//! Sample covariance spectrum of an iid matrix against the Marchenko-Pastur
//! law, with a coarse text histogram.
//!
//! `cargo run --release --example mp_law -- 400 1000`

use rmt_grid::ingest::TimeSeriesWindow;
use rmt_grid::rng::EntryLaw;
use rmt_grid::spectral::{covariance_spectrum, ks_distance, mp_cdf, Convention, MpLaw};

fn main() -> rmt_grid::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (n, t) = match args[..] {
        [n, t, ..] => (n, t),
        _ => (400, 1000),
    };
    for law in [EntryLaw::Gaussian, EntryLaw::Bernoulli, EntryLaw::Uniform] {
        let x = TimeSeriesWindow::new(law.matrix(n, t, 1), 0)?;
        let spec = covariance_spectrum(&x, Convention::OverT)?;
        let mp = MpLaw::new(x.c(), Convention::OverT)?;
        println!("{law:?}: KS distance {:.4}", ks_distance(&spec, &mp)?);
    }

    let x = TimeSeriesWindow::new(EntryLaw::Gaussian.matrix(n, t, 1), 0)?;
    let spec = covariance_spectrum(&x, Convention::OverT)?;
    let mp = MpLaw::new(x.c(), Convention::OverT)?;
    println!("\nsupport [{:.3}, {:.3}], {} eigenvalues", mp.a, mp.b, spec.eigenvalues.len());
    let bins = 20;
    let width = (mp.b - mp.a) / bins as f64;
    for i in 0..bins {
        let (lo, hi) = (mp.a + i as f64 * width, mp.a + (i + 1) as f64 * width);
        let seen = spec.eigenvalues.iter().filter(|&&l| l >= lo && l < hi).count() as f64 / n as f64;
        let expected = mp_cdf(&mp, hi) - mp_cdf(&mp, lo);
        println!(
            "{lo:6.3} {:<40} {:.3} / {:.3}",
            "#".repeat((seen * 400.0).round() as usize),
            seen,
            expected
        );
    }
    Ok(())
}
