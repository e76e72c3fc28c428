use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rmt-grid"));
    c.env_remove("RMT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One simple-scenario simulation shared by the tests below.
fn simple_dir() -> &'static PathBuf {
    static DIR: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    &DIR.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("sim");
        ok(&["simulate", "--builtin", "simple", "--out", s(&out)]);
        (tmp, out)
    })
    .1
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    ok(&["simulate", "--builtin", "simple", "--seed", "7", "--out", s(&a)]);
    ok(&["simulate", "--builtin", "simple", "--seed", "7", "--out", s(&b)]);
    let st = bin()
        .args(["simulate", "--builtin", "simple", "--seed", "3", "--out", s(&c)])
        .env("RMT_SEED", "7")
        .status()
        .unwrap();
    assert!(st.success());
    let ma = json(&a.join("manifest.json"));
    assert_eq!(ma, json(&b.join("manifest.json")));
    assert_eq!(ma, json(&c.join("manifest.json")));
    assert_eq!(ma["seed"], 7);
    let listed: Vec<&str> = ma["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    for f in ["P.csv", "U.csv", "truth.json"] {
        assert!(listed.contains(&f));
        assert!(a.join(f).exists());
    }
}

#[test]
fn missing_scenario_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--scenario", "/nonexistent/scenario.json", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenario.json"));
    let out = run(&["simulate", "--builtin", "nope", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

fn h1_windows(dir: &Path, eps: f64) -> usize {
    let mut n = 0;
    for entry in std::fs::read_dir(dir.join("traces")).unwrap() {
        let mut rdr = csv::Reader::from_path(entry.unwrap().path()).unwrap();
        for r in rdr.records() {
            let z: f64 = r.unwrap()[4].parse().unwrap();
            if z.abs() >= eps {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn detect_finds_simple_fraud_and_is_monotone_in_epsilon() {
    let sim = simple_dir();
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("d1");
    let d3 = tmp.path().join("d3");
    let common = |out: &Path, eps: &str| {
        ok(&[
            "detect",
            "--p",
            s(&sim.join("P.csv")),
            "--u",
            s(&sim.join("U.csv")),
            "--tlp",
            s(&sim.join("tlp.json")),
            "--dT",
            "4",
            "--epsilon",
            eps,
            "--jobs",
            "2",
            "--out",
            s(out),
        ]);
    };
    common(&d1, "1.96");
    common(&d3, "3.0");
    let report = json(&d1.join("report.json"));
    assert_eq!(report["schema"], 1);
    assert_eq!(report["window"]["N"], 33);
    let frauds: Vec<(String, u64)> = report["events"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "fraud")
        .map(|e| (e["node"].as_str().unwrap().to_string(), e["t_cp"].as_u64().unwrap()))
        .collect();
    for node in ["6", "14"] {
        let t: Vec<u64> = frauds.iter().filter(|f| f.0 == node).map(|f| f.1).collect();
        assert_eq!(t.len(), 2, "{frauds:?}");
        // Tolerance scaled by dT = 4.
        assert!(t[0].abs_diff(5600) <= 20 && t[1].abs_diff(6800) <= 20, "{t:?}");
    }
    assert_eq!(frauds.len(), 4);
    assert!(h1_windows(&d3, 3.0) <= h1_windows(&d1, 1.96));
    let refs = report["traces_ref"].as_array().unwrap();
    assert_eq!(refs.len(), 34);
    assert!(d1.join(refs[0].as_str().unwrap()).exists());
}

fn write_random_csv(path: &Path, nodes: usize, samples: usize, seed: u64) {
    let m = rmt_grid::rng::EntryLaw::Gaussian.matrix(nodes, samples, seed);
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut header = vec!["timestamp".to_string()];
    header.extend((1..=nodes).map(|i| i.to_string()));
    w.write_record(&header).unwrap();
    for k in 0..samples {
        let mut rec = vec![(k * 9).to_string()];
        rec.extend((0..nodes).map(|i| (1.0 + 0.01 * m[(i, k)]).to_string()));
        w.write_record(&rec).unwrap();
    }
    w.flush().unwrap();
}

#[test]
fn likelihood_ratio_needs_rectangular_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("P.csv");
    let u = tmp.path().join("U.csv");
    write_random_csv(&p, 10, 300, 1);
    write_random_csv(&u, 10, 300, 2);
    let base = ["detect", "--p", s(&p), "--u", s(&u), "--phi", "likelihoodRatio", "--no-traces"];
    let mut args = base.to_vec();
    let out_ok = tmp.path().join("ok");
    args.extend(["--T", "60", "--dT", "20", "--out", s(&out_ok)]);
    ok(&args);
    assert_eq!(json(&out_ok.join("report.json"))["phi"], "likelihoodRatio");

    let mut args = base.to_vec();
    let out_bad = tmp.path().join("bad");
    args.extend(["--T", "10", "--k", "1", "--out", s(&out_bad)]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_flags_are_input_errors() {
    let sim = simple_dir();
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "detect",
        "--p",
        s(&sim.join("P.csv")),
        "--u",
        s(&sim.join("U.csv")),
        "--phi",
        "cubic",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["rmt-check", "--gaussian", "10", "20", "--out", s(tmp.path())])
        .env("RMT_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn estimate_with_and_without_report() {
    let sim = simple_dir();
    let tmp = tempfile::tempdir().unwrap();
    let det = tmp.path().join("det");
    ok(&[
        "detect",
        "--p",
        s(&sim.join("P.csv")),
        "--u",
        s(&sim.join("U.csv")),
        "--tlp",
        s(&sim.join("tlp.json")),
        "--dT",
        "10",
        "--no-traces",
        "--out",
        s(&det),
    ]);
    let est = tmp.path().join("est");
    ok(&[
        "estimate",
        "--p",
        s(&sim.join("P.csv")),
        "--tlp",
        s(&sim.join("tlp.json")),
        "--report",
        s(&det.join("report.json")),
        "--out",
        s(&est),
    ]);
    let coef = json(&est.join("coefficients.json"));
    assert_eq!(coef["nodes"].as_array().unwrap().len(), 33);
    // Node 18 carries 90 kW of flat load.
    let n18 = coef["nodes"].as_array().unwrap().iter().find(|n| n["node"] == "18").unwrap();
    assert!((n18["values"][0].as_f64().unwrap() - 90.0).abs() < 1.0, "{n18}");
    assert!(est.join("reconstruction.csv").exists());

    let est0 = tmp.path().join("est0");
    ok(&[
        "estimate",
        "--p",
        s(&sim.join("P.csv")),
        "--tlp",
        s(&sim.join("tlp.json")),
        "--no-ulp",
        "--nodes",
        "6,14",
        "--out",
        s(&est0),
    ]);
    assert_eq!(json(&est0.join("coefficients.json"))["with_ulp"], false);

    let empty = tmp.path().join("empty.json");
    std::fs::write(&empty, r#"{"schema":1,"samples_per_day":9600,"patterns":[]}"#).unwrap();
    let out = run(&["estimate", "--p", s(&sim.join("P.csv")), "--tlp", s(&empty), "--out", s(&est0)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rmt_check_laws() {
    let tmp = tempfile::tempdir().unwrap();
    let mp = tmp.path().join("mp");
    ok(&["rmt-check", "--gaussian", "400", "1000", "--law", "mp", "--out", s(&mp)]);
    let d = json(&mp.join("diagnostics.json"));
    assert_eq!(d["law"], "mp");
    assert!(d["ks_max"].as_f64().unwrap() <= 0.05, "{d}");

    let clt = tmp.path().join("clt");
    ok(&["rmt-check", "--gaussian", "100", "400", "--law", "clt", "--reps", "1000", "--out", s(&clt)]);
    let d = json(&clt.join("diagnostics.json"));
    for flag in ["mean_ok", "variance_ok", "normal_ok"] {
        assert_eq!(d[flag], true, "{d}");
    }

    let ring = tmp.path().join("ring");
    let u = simple_dir().join("U.csv");
    ok(&["rmt-check", "--csv", s(&u), "--law", "ring", "--T", "100", "--dT", "400", "--out", s(&ring)]);
    let d = json(&ring.join("diagnostics.json"));
    let f = d["fraction_inside"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f));
    assert_eq!(d["windows"], 24);
}
