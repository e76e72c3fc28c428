//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Run alone with `cargo test --release --test acceptance`.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use rmt_grid::detect::{detect, DetectConfig, DetectionOutcome, EventKind};
use rmt_grid::estimate::{solve_ls, LoadPattern};
use rmt_grid::ingest::{Jitter, TimeSeriesWindow};
use rmt_grid::les::{les, les_mean, les_variance, CltParameters, TestFunction};
use rmt_grid::rng::EntryLaw;
use rmt_grid::simulate::{self, ScenarioConfig, SimulationOutput, TruthKind};
use rmt_grid::spectral::{covariance_spectrum, ks_distance, ring_transform, Convention, MpLaw};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ---------------------------------------------------------------- oracles

/// M-P CDF (`XXᵀ/T` scaling) by composite Simpson in `x = m - h cos u`.
fn mp_cdf_oracle(c: f64, x: f64) -> f64 {
    let a = (1.0 - c.sqrt()).powi(2);
    let b = (1.0 + c.sqrt()).powi(2);
    if x <= a {
        return 0.0;
    }
    if x >= b {
        return 1.0;
    }
    let (m, h) = ((a + b) / 2.0, (b - a) / 2.0);
    let u_end = ((m - x) / h).clamp(-1.0, 1.0).acos();
    let f = |u: f64| {
        let xu = m - h * u.cos();
        (h * u.sin()).powi(2) / (2.0 * std::f64::consts::PI * c * xu)
    };
    let n = 2000;
    let step = u_end / n as f64;
    let mut s = f(0.0) + f(u_end);
    for i in 1..n {
        s += f(i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * step / 3.0
}

fn ks_oracle(eigs: &[f64], c: f64) -> f64 {
    let mut e = eigs.to_vec();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    e.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = mp_cdf_oracle(c, x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// `tr(2M² - I)` with `M = XXᵀ/N`, straight from the matrix entries.
fn t2_direct(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let m = x * x.transpose() / n as f64;
    2.0 * m.iter().map(|v| v * v).sum::<f64>() - n as f64
}

fn t2_variance_oracle(c: f64, kappa4: f64) -> f64 {
    let s = 1.0 + 1.0 / c;
    32.0 * s * s / c + 16.0 / (c * c) + 16.0 * kappa4 * s * s / c
}

/// KS distance to the fitted normal and the 1% Lilliefors critical value.
fn lilliefors_oracle(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let law = Normal::new(mean, sd).unwrap();
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = law.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    (d, 1.031 / n.sqrt())
}

fn sample_moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

// ---------------------------------------------------------------- criteria

fn mp_conformance() -> Verdict {
    let (n, t) = (400, 1000);
    let c = n as f64 / t as f64;
    let law = MpLaw::new(c, Convention::OverT).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    let mut ks_gauss = 0.0;
    for (name, entry) in [
        ("gaussian", EntryLaw::Gaussian),
        ("bernoulli", EntryLaw::Bernoulli),
        ("uniform", EntryLaw::Uniform),
    ] {
        let x = entry.matrix(n, t, 11);
        let cov = &x * x.transpose() / t as f64;
        let eigs: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
        let ks = ks_oracle(&eigs, c);
        let lib = ks_distance(
            &covariance_spectrum(&TimeSeriesWindow::new(x, 0).unwrap(), Convention::OverT).unwrap(),
            &law,
        )
        .unwrap();
        let limit = if entry == EntryLaw::Gaussian { 0.05 } else { 0.10 };
        if entry == EntryLaw::Gaussian {
            ks_gauss = ks;
        }
        pass &= ks <= limit && (ks - lib).abs() < 1e-4;
        parts.push(format!("{name} KS={ks:.4} (lib {lib:.4}, tol {limit})"));
    }
    verdict(pass, format!("{} ; gaussian KS {ks_gauss:.4}", parts.join(", ")))
}

fn les_trace_oracle() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for w in 0..100 {
        let n = r.random_range(2..60);
        let t = n + r.random_range(0..2 * n);
        let raw = EntryLaw::Gaussian.matrix(n, t, 1000 + w);
        let x = TimeSeriesWindow::from_raw(raw.as_view(), 0, Jitter::Off).unwrap();
        let spec = covariance_spectrum(&x, Convention::OverN).unwrap();
        let tau = les(&spec, &TestFunction::ChebyshevT2).unwrap();
        let direct = t2_direct(&x.data);
        worst = worst.max((tau - direct).abs() / direct.abs().max(1.0));
    }
    verdict(worst <= 1e-8, format!("max relative error {worst:.2e} over 100 windows (tol 1e-8)"))
}

fn clt_calibration() -> Verdict {
    let (n, t, reps) = (100, 400, 1000);
    let c = n as f64 / t as f64;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, entry, var_theory) in [
        ("gaussian", EntryLaw::Gaussian, t2_variance_oracle(c, 0.0)),
        ("bernoulli", EntryLaw::Bernoulli, 16.0 / (c * c)),
    ] {
        let taus: Vec<f64> = (0..reps)
            .map(|r| t2_direct(&entry.matrix(n, t, 50_000 + r as u64)))
            .collect();
        let (mean, var) = sample_moments(&taus);
        let se = (var / reps as f64).sqrt();
        let params = CltParameters::new(c, entry.kappa4()).unwrap();
        let expected = les_mean(n, &params, &TestFunction::ChebyshevT2).unwrap();
        let (d, crit) = lilliefors_oracle(&taus);
        let mean_ok = (mean - expected).abs() <= 3.0 * se;
        let var_ok = (var / var_theory - 1.0).abs() <= 0.15;
        let ks_ok = d < crit;
        pass &= mean_ok && var_ok && ks_ok;
        parts.push(format!(
            "{name}: mean {mean:.2} vs {expected:.2} ({:+.2} SE), var {var:.1} vs {var_theory:.1} ({:+.1}%), KS {d:.4} < {crit:.4}",
            (mean - expected) / se,
            100.0 * (var / var_theory - 1.0)
        ));
    }
    verdict(pass, parts.join("; "))
}

fn quadrature_vs_closed_form() -> Verdict {
    let mut worst: f64 = 0.0;
    for c in [0.25, 0.43, 0.5, 1.0] {
        for k in [0.0, -2.0] {
            let q = les_variance(&CltParameters::new(c, k).unwrap(), &TestFunction::ChebyshevT2).unwrap();
            let exact = t2_variance_oracle(c, k);
            worst = worst.max((q - exact).abs() / exact);
        }
    }
    verdict(worst <= 1e-6, format!("max relative error {worst:.2e} at c in {{0.25, 0.43, 0.5, 1}} (tol 1e-6)"))
}

struct Run {
    cfg: ScenarioConfig,
    sim: SimulationOutput,
    out: DetectionOutcome,
    elapsed: Duration,
}

fn run_scenario(cfg: ScenarioConfig) -> Run {
    let started = Instant::now();
    let sim = simulate::run(&cfg).unwrap();
    let out = detect(&sim.telemetry.p, &sim.telemetry.u, &cfg.tlp_patterns(), &DetectConfig::default()).unwrap();
    Run {
        cfg,
        sim,
        out,
        elapsed: started.elapsed(),
    }
}

fn simple_detection(run: &Run) -> Verdict {
    let r = &run.out.report;
    let sph = run.cfg.samples_per_hour();
    let (start, end) = (14 * sph, 17 * sph);
    let mut pass = r.state_in_band_fraction >= 0.95;
    let mut parts = vec![format!("state in band {:.1}%", 100.0 * r.state_in_band_fraction)];
    for node in ["6", "14"] {
        let ev: Vec<_> = r.events_for(node).collect();
        let ok = ev.len() == 2
            && ev[0].t_cp.abs_diff(start) <= 5
            && ev[1].t_cp.abs_diff(end) <= 5
            && ev.iter().all(|e| e.span_samples.abs_diff(100) <= 10);
        pass &= ok;
        parts.push(format!(
            "node {node}: {} spikes at {:?} spans {:?}",
            ev.len(),
            ev.iter().map(|e| e.t_cp).collect::<Vec<_>>(),
            ev.iter().map(|e| e.span_samples).collect::<Vec<_>>()
        ));
    }
    let stray: Vec<_> = r
        .events
        .iter()
        .filter(|e| e.node != "6" && e.node != "14" && e.node != rmt_grid::detect::SYSTEMWIDE)
        .map(|e| format!("{}@{}", e.node, e.t_cp))
        .collect();
    pass &= stray.is_empty();
    pass &= run.elapsed < Duration::from_secs(300);
    parts.push(format!("other node spikes {stray:?}"));
    parts.push(format!("{:.0}s (limit 300s)", run.elapsed.as_secs_f64()));
    verdict(pass, parts.join("; "))
}

fn complex_attribution(run: &Run) -> Verdict {
    let r = &run.out.report;
    let truth = &run.sim.truth;
    let sph = run.cfg.samples_per_hour();
    let tlp = run.cfg.tlp_patterns();
    let mut pass = true;
    let mut parts = Vec::new();

    // Dominant-pattern transitions.
    let (mut hit, mut miss) = (0, Vec::new());
    for node in &truth.nodes {
        let dom = (0..node.a.len()).max_by(|&i, &j| node.a[i].total_cmp(&node.a[j])).unwrap();
        if node.a[dom] < 0.7 || node.b.iter().any(|&b| b != 0.0) {
            continue;
        }
        for h in 1..24 {
            let k = h * sph;
            let contrib: Vec<f64> = (0..tlp.len())
                .map(|i| node.a[i] * (tlp[i].profile[k] - tlp[i].profile[k - 1]).abs())
                .collect();
            let big = (0..tlp.len()).max_by(|&i, &j| contrib[i].total_cmp(&contrib[j])).unwrap();
            let overlaps_event = truth
                .events
                .iter()
                .any(|e| e.node == node.id && (e.start.abs_diff(k) <= 10 || e.end.abs_diff(k) <= 10));
            if big != dom || contrib[big] < 0.05 || overlaps_event {
                continue;
            }
            let found = r.events_for(&node.id).any(|e| {
                e.kind == EventKind::TlpTransition && e.t_cp.abs_diff(k) <= 10 && e.pattern.as_deref() == Some(&tlp[dom].id)
            });
            if found {
                hit += 1;
            } else {
                miss.push(format!("{}@{h}:00", node.id));
            }
        }
    }
    let node32 = r
        .events_for("32")
        .any(|e| e.kind == EventKind::TlpTransition && e.t_cp.abs_diff(3 * sph) <= 10 && e.pattern.as_deref() == Some("p1"));
    pass &= miss.is_empty() && node32;
    parts.push(format!("dominant-pattern transitions {hit}/{} (node 32 3:00 -> p1: {node32})", hit + miss.len()));

    // Unknown-pattern steps against the ULP support.
    let ulp = &run.cfg.ulp_patterns()[0];
    let mut worst = 0;
    for node in ["20", "31"] {
        let got = r.ulp_patterns(node);
        let ok = got.len() == 1 && got[0].cps.len() == ulp.cps.len();
        if !ok {
            pass = false;
            parts.push(format!("node {node}: no ULP profile"));
            continue;
        }
        for (a, b) in got[0].cps.iter().zip(&ulp.cps) {
            worst = worst.max(a.abs_diff(*b));
        }
    }
    pass &= worst <= 5;
    parts.push(format!("ULP steps vs pu1 support: max CP error {worst} samples"));

    // Fraud and invisible intervals against ground truth.
    let mut errs = Vec::new();
    for e in &truth.events {
        let kind = match e.kind {
            TruthKind::Fraud => EventKind::Fraud,
            TruthKind::Invisible => EventKind::Invisible,
        };
        let found = r.intervals.iter().any(|iv| {
            iv.node == e.node && iv.kind == kind && iv.start.abs_diff(e.start) <= 5 && iv.end.is_some_and(|x| x.abs_diff(e.end) <= 5)
        });
        if !found {
            errs.push(format!("missed {:?} {}", e.kind, e.node));
        }
    }
    for iv in &r.intervals {
        let matched = truth.events.iter().any(|e| e.node == iv.node && e.start.abs_diff(iv.start) <= 5);
        if !matched {
            errs.push(format!("spurious {:?} {}@{}", iv.kind, iv.node, iv.start));
        }
    }
    pass &= errs.is_empty();
    let frauds: Vec<_> = r
        .intervals
        .iter()
        .filter(|iv| iv.kind == EventKind::Fraud)
        .map(|iv| format!("{}:[{},{:?})", iv.node, iv.start, iv.end.unwrap_or(0)))
        .collect();
    parts.push(format!("fraud intervals {} ; interval errors {errs:?}", frauds.join(" ")));
    verdict(pass, parts.join("; "))
}

fn estimation(run: &Run) -> Verdict {
    let p = &run.sim.telemetry.p;
    let tlp = run.cfg.tlp_patterns();
    let mut pass = true;
    let mut parts = Vec::new();
    for node in ["20", "31"] {
        let truth = run.sim.truth.nodes.iter().find(|n| n.id == node).unwrap();
        let series = p.row(p.index_of(node).unwrap());
        let mut with: Vec<LoadPattern> = tlp.clone();
        with.extend(run.out.report.ulp_patterns(node));
        let a = solve_ls(&with, &series).unwrap();
        let b = solve_ls(&tlp, &series).unwrap();
        let expect: Vec<f64> = truth.a.iter().chain(&truth.b).copied().collect();
        let err_with = a.shares().iter().zip(&expect).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let err_without = b.shares().iter().zip(&truth.a).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let ok = a.values.len() == expect.len()
            && err_with <= 0.05
            && err_without >= 2.0 * err_with
            && b.residual_norm > a.residual_norm;
        pass &= ok;
        parts.push(format!(
            "node {node}: max err with ULP {err_with:.4} (tol 0.05), without {err_without:.4}; residual {:.1} vs {:.1}",
            a.residual_norm, b.residual_norm
        ));
    }
    verdict(pass, parts.join("; "))
}

fn ring_law() -> Verdict {
    let (n, t) = (100, 400);
    let c = n as f64 / t as f64;
    let x = TimeSeriesWindow::new(EntryLaw::Gaussian.matrix(n, t, 21), 0).unwrap();
    let eigs = ring_transform(&x, 22).unwrap();
    let (lo, hi) = ((1.0 - c).sqrt() - 0.05, 1.05);
    let inside = eigs.iter().filter(|z| (lo..=hi).contains(&z.norm())).count() as f64 / eigs.len() as f64;
    verdict(
        inside >= 0.95,
        format!("{:.1}% of moduli in [{lo:.3}, {hi:.2}] (need 95%)", 100.0 * inside),
    )
}

fn robustness(run: &Run) -> Verdict {
    let tr = &run.out.state_trace;
    let u = &run.sim.telemetry.u;
    let t = tr.window.t;
    let in_band: Vec<usize> = (0..tr.len()).filter(|&i| tr.z(i).abs() < 1.96).collect();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let trials = 200;
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let i = in_band[r.random_range(0..in_band.len())];
        let start = tr.times[i] - t;
        let x = TimeSeriesWindow::from_raw(u.values.columns(start, t), start, Jitter::Off).unwrap();
        let before = t2_direct(&x.data);
        let mut damaged = x.data.clone();
        let count = (damaged.len() as f64 * 0.01).round() as usize;
        for _ in 0..count {
            let k = r.random_range(0..damaged.len());
            damaged[k] = 0.0;
        }
        let shift = (t2_direct(&damaged) - before).abs() / tr.sigma_theory[i];
        worst = worst.max(shift);
        if shift < 1.96 {
            ok += 1;
        }
    }
    let frac = ok as f64 / trials as f64;
    verdict(
        frac >= 0.95,
        format!("{:.1}% of {trials} trials moved tau by < 1.96 sigma (worst {worst:.2} sigma)", 100.0 * frac),
    )
}

fn main() {
    let mut all = true;
    let mut line = |id: u32, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Verdict| {
        let started = Instant::now();
        let mut v = f();
        let took = started.elapsed();
        if let Some(l) = limit {
            v.pass &= took <= l;
        }
        all &= v.pass;
        let budget = limit.map_or(String::new(), |l| format!(", limit {}s", l.as_secs()));
        println!(
            "{} [{id}] {name}: {} ({:.1}s{budget})",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    };
    line(1, "M-P law conformance", Some(Duration::from_secs(10)), &mut mp_conformance);
    line(2, "LES trace oracle", Some(Duration::from_secs(5)), &mut les_trace_oracle);
    line(3, "CLT calibration", Some(Duration::from_secs(120)), &mut clt_calibration);
    line(4, "Quadrature vs closed form", Some(Duration::from_secs(1)), &mut quadrature_vs_closed_form);
    let simple = run_scenario(simulate::simple(simulate::DEFAULT_SEED));
    line(5, "Simple-scenario detection", None, &mut || simple_detection(&simple));
    let complex = run_scenario(simulate::complex(simulate::DEFAULT_SEED));
    line(6, "Complex-scenario attribution", None, &mut || complex_attribution(&complex));
    line(7, "Estimation with/without detection", None, &mut || estimation(&complex));
    line(8, "Ring law", None, &mut ring_law);
    line(9, "Robustness to zeroed entries", None, &mut || robustness(&simple));
    if !all {
        std::process::exit(1);
    }
}
