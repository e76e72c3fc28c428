//! Central limit behaviour of the Chebyshev T2 linear eigenvalue statistic:
//! Monte Carlo mean and variance against theory for Gaussian and ±1 entries.
//!
//! `cargo run --release --example les_clt`

use rmt_grid::cli::clt_calibration;
use rmt_grid::les::{les_mean_limit, les_variance, t2_variance_closed_form, CltParameters, TestFunction};
use rmt_grid::rng::EntryLaw;

fn main() -> rmt_grid::Result<()> {
    let phi = TestFunction::ChebyshevT2;
    for c in [0.25, 0.43, 0.5, 1.0] {
        let p = CltParameters::new(c, 0.0)?;
        println!(
            "c={c:<5} variance quadrature {:>10.4} closed form {:>10.4}",
            les_variance(&p, &phi)?,
            t2_variance_closed_form(c, 0.0)
        );
    }
    println!(
        "limit means: N=100,c=1 -> {}, N=33,c=0.25 -> {}",
        les_mean_limit(100, &CltParameters::new(1.0, 0.0)?, &phi)?,
        les_mean_limit(33, &CltParameters::new(0.25, 0.0)?, &phi)?
    );

    for law in [EntryLaw::Gaussian, EntryLaw::Bernoulli] {
        let s = clt_calibration(100, 400, 1000, law, &phi, 3)?;
        println!(
            "\n{law:?} (kappa4 {}): mean {:.2} vs {:.2} (SE {:.2}); variance {:.1} vs {:.1}; KS {:.4} (1% critical {:.4})",
            s.kappa4, s.mean_sample, s.mean_theory, s.mean_se, s.variance_sample, s.variance_theory, s.ks_d, s.ks_critical_1pct
        );
    }
    Ok(())
}
