use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hostcap::fixtures::two_bus_with;

const R: f64 = 0.2;
const X: f64 = 0.2;

fn hostcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hostcap"))
        .args(args)
        .env_remove("HOSTCAP_OUT")
        .env_remove("HOSTCAP_THREADS")
        .output()
        .expect("running hostcap")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn show(o: &Output) -> String {
    format!(
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

/// Largest unity power factor injection (pu) at the end of one line before
/// the receiving voltage squared reaches `v2max`, by bisection on the exact
/// two-bus branch-flow relations.
fn injection_cap(r: f64, x: f64, v2max: f64) -> f64 {
    let z2 = r * r + x * x;
    let p_of = |l: f64| (v2max - 1.0 + z2 * l) / (2.0 * r);
    let f = |l: f64| (r * l - p_of(l)).powi(2) + (x * l).powi(2) - l;
    let (mut lo, mut hi) = (0.0, 1e-3);
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    p_of(0.5 * (lo + hi))
}

/// Weak two-bus feeder with single-row noon profiles; bus 2 draws `load_kw`.
fn setup(dir: &Path, load_kw: f64) -> PathBuf {
    let net = two_bus_with(R, X, 100.0, 0.0);
    std::fs::write(dir.join("net.json"), net.to_json_string().unwrap()).unwrap();
    let row = |v: f64| format!("timestamp,value\n2023-07-01 12:00:00,{v}\n");
    std::fs::write(dir.join("solar.csv"), row(1.0)).unwrap();
    std::fs::write(dir.join("temp.csv"), row(22.0)).unwrap();
    std::fs::write(dir.join("lmp.csv"), row(0.1)).unwrap();
    std::fs::write(dir.join("loads.csv"), format!("timestamp,2\n2023-07-01 12:00:00,{load_kw}\n")).unwrap();
    dir.join("net.json")
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let mut s = String::from(
        r#"{"network": "net.json",
  "profiles": {"solar": "solar.csv", "temperature": "temp.csv", "lmp": "lmp.csv", "loads": "loads.csv"}"#,
    );
    if !extra.is_empty() {
        let _ = write!(s, ",\n  {extra}");
    }
    s.push_str("\n}\n");
    let p = dir.join("run.json");
    std::fs::write(&p, s).unwrap();
    p
}

fn read_json(p: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    serde_json::from_str(&text).unwrap()
}

#[test]
fn validate_reports_a_valid_network() {
    let dir = tempfile::tempdir().unwrap();
    let net = setup(dir.path(), 0.0);
    let o = hostcap(&["validate", net.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", show(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok: 2 buses"));
    let o = hostcap(&["validate", "builtin:feeder-123"]);
    assert_eq!(code(&o), 0, "{}", show(&o));
}

#[test]
fn malformed_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"buses": []}"#).unwrap();
    assert_eq!(code(&hostcap(&["validate", bad.to_str().unwrap()])), 1);
    assert_eq!(code(&hostcap(&["validate", "builtin:nowhere"])), 1);
    assert_eq!(code(&hostcap(&["bogus"])), 1);
    assert_eq!(code(&hostcap(&["hca-det", "--target", "bs"])), 1);
    assert_eq!(code(&hostcap(&["hca-det"])), 1);
    assert_eq!(code(&hostcap(&["--help"])), 0);
}

#[test]
fn hca_det_matches_the_two_bus_cap() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 0.0);
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    let o = hostcap(&[
        "hca-det",
        "--config",
        cfg.to_str().unwrap(),
        "--target",
        "pv",
        "--mode",
        "static",
        "--step",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", show(&o));
    let net = two_bus_with(R, X, 100.0, 0.0);
    let cap_pct = 100.0 * net.pu_to_kw(injection_cap(R, X, 1.05 * 1.05)) / 100.0;
    let manifest = read_json(&out.join("manifest-hca-det-pv-static.json"));
    let hc = manifest["summary"]["final_hc"].as_f64().expect("final_hc");
    assert!(hc <= cap_pct + 1e-6 && hc > cap_pct - 1.0, "{hc} vs cap {cap_pct}");
    let csv = std::fs::read_to_string(out.join("hca-det-pv-static-trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), manifest["summary"]["levels"].as_u64().unwrap() as usize + 1);
    assert!(manifest["outputs"].as_array().unwrap().len() >= 3);
}

#[test]
fn infeasible_baseline_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // 400 kW over the weak line pulls bus 2 below 0.95 pu before any PV
    setup(dir.path(), 400.0);
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    let o = hostcap(&["hca-det", "--config", cfg.to_str().unwrap(), "--step", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", show(&o));
    let manifest = read_json(&out.join("manifest-hca-det-pv-static.json"));
    assert!(manifest["summary"]["final_hc"].is_null());
}

#[test]
fn reduced_ssp_without_noise_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 20.0);
    let cfg = config(
        dir.path(),
        r#""scenario_count": 8,
  "noise": {"alpha_pv": 0, "t_out": 0, "lmp": 0, "load": 0, "der_baseline": 0}"#,
    );
    let out = dir.path().join("out");
    let o = hostcap(&[
        "ssp",
        "--config",
        cfg.to_str().unwrap(),
        "--mode",
        "static",
        "--reduce",
        "5",
        "--threshold",
        "95",
        "--breakdown",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", show(&o));
    let res = read_json(&out.join("ssp-static.json"));
    assert_eq!(res["tag"], "reduced");
    assert_eq!(res["feasibility_rate"].as_f64(), Some(100.0));
    assert!(out.join("ssp-static-capacities.csv").exists());
    assert!(out.join("ssp-static-breakdown.json").exists());
    let manifest = read_json(&out.join("manifest-ssp-static.json"));
    assert_eq!(manifest["summary"]["tag"], "reduced");
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 20.0);
    let cfg = config(dir.path(), r#""scenario_count": 6, "seed": 11"#);
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = hostcap(&[
            "hca-stoch",
            "--config",
            cfg.to_str().unwrap(),
            "--step",
            "5",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", show(&o));
        files(&out)
    };
    let a = run("a", "1");
    let b = run("b", "3");
    assert!(a.len() >= 4);
    assert_eq!(a, b);
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), 20.0);
    let cfg = config(
        dir.path(),
        r#""scenario_count": 2, "seed": 3,
  "hca": {"step": 20},
  "sweep": {"bs": [0, 20], "hp": [0, 20], "engine": "iterative"}"#,
    );
    let out = dir.path().join("out");
    let o = hostcap(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", show(&o));
    for f in ["surface-static.csv", "surface-dynamic.csv", "volume.json", "manifest-sweep.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("surface-static.csv")).unwrap();
    assert!(csv.starts_with("bs_pct,hp_pct,max_pv_pct"));
    assert_eq!(csv.lines().count(), 5);
    let o = hostcap(&["report", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", show(&o));
    let report = read_json(&out.join("report.json"));
    assert!(report["volume"]["static_volume"].as_f64().is_some());
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&hostcap(&["report", empty.to_str().unwrap()])), 1);
}
