use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_frglab"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let status = bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap();
    status.status.code().unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

const GAUSSIAN: &str = r#"{
  "schema_version": 1,
  "model": { "dim": 0, "mass_sq": 1.0 },
  "sampler": { "n_samples": 20000, "seed": 1 },
  "correlators": { "requests": [{ "momenta": [[], []] }] },
  "lsz": { "processes": [{ "in": [[], []], "out": [[], []] }] }
}"#;

#[test]
fn gaussian_flow_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", GAUSSIAN);
    let out = dir.path().join("out");
    assert_eq!(run("flow", &cfg, &out, &["--format", "json"]), 0);
    let e = json(out.join("flow_endpoint.json"));
    assert!((num(&e["curvature_at_zero"]) - 1.0).abs() < 1e-6);
    assert_eq!(e["validated"], Value::Bool(true));
    assert!(out.join("flow_trajectory.json").exists());
    assert!(!out.join("flow_trajectory.csv").exists());
}

#[test]
fn low_cutoff_is_flagged_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1, "model": {"dim": 0, "mass_sq": 1.0}, "regulator": {"uv_scale": 2.0}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(run("flow", &cfg, &out, &[]), 0);
    let e = json(out.join("flow_endpoint.json"));
    assert_eq!(e["validated"], Value::Bool(false));
    assert_eq!(e["warnings"].as_array().unwrap().len(), 1);
}

#[test]
fn config_errors_exit_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (i, text) in [
        "{ not json",
        r#"{"schema_version": 1, "model": {"dim": 0, "mass_sq": 1.0}, "surprise": true}"#,
        r#"{"schema_version": 1, "model": {"dim": 0, "mass_sq": 1.0}, "sampler": {"n_samples": 10, "seed": 1}, "correlators": {"requests": [{"momenta": []}]}}"#,
    ]
    .iter()
    .enumerate()
    {
        let cfg = write_config(dir.path(), &format!("bad{i}.json"), text);
        assert_eq!(run("correlate", &cfg, &out, &[]), 2, "{text}");
        assert!(!out.exists());
    }
    let unseeded = write_config(
        dir.path(),
        "unseeded.json",
        r#"{"schema_version": 1, "model": {"dim": 0, "mass_sq": 1.0}, "sampler": {"n_samples": 10}}"#,
    );
    assert_eq!(run("sample", &unseeded, &out, &[]), 2);
    assert_eq!(run("sample", &unseeded, &out, &["--seed", "4"]), 0);
    assert_eq!(run("flow", &dir.path().join("missing.json"), &dir.path().join("o2"), &[]), 2);
}

#[test]
fn flow_breakdown_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1, "model": {"dim": 0, "mass_sq": 1.0, "quartic": 1.0}, "regulator": {"tolerance": 1e-30}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(run("flow", &cfg, &out, &[]), 3);
    assert!(!out.exists());
}

#[test]
fn correlate_record_carries_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", GAUSSIAN);
    let out = dir.path().join("out");
    assert_eq!(run("correlate", &cfg, &out, &[]), 0);
    let c = json(out.join("correlators.json"));
    let r = &c["records"][0];
    let (v, se) = (num(&r["value_re"]), num(&r["stderr"]));
    assert!((v - 1.0).abs() < 4.0 * se, "{v} ± {se}");
    assert!((num(&r["oracle_quadrature"]["re"]) - 1.0).abs() < 1e-9);
    assert!((num(&r["oracle_source_derivative"]["re"]) - 1.0).abs() < 1e-5);
    let series = std::fs::read_to_string(out.join("correlator_convergence.csv")).unwrap();
    assert!(series.starts_with("request,n_samples,value_re,value_im,stderr\n"));
    assert!(series.lines().last().unwrap().starts_with("0,20000,"));
}

#[test]
fn lsz_writes_gate_and_elements() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", GAUSSIAN);
    let out = dir.path().join("out");
    assert_eq!(run("lsz", &cfg, &out, &[]), 0);
    let s = json(out.join("smatrix.json"));
    let e = &s["elements"][0];
    assert!(num(&e["value"]["re"]).abs() < 3.0 * num(&e["stderr"]));
    let g = json(out.join("gate.json"));
    assert_eq!(g["basis"], serde_json::json!(["|0⟩", "|1⟩", "|2⟩"]));
    assert_eq!(g["entries"].as_array().unwrap().len(), 3);
}

#[test]
fn audit_beyond_oracle_scale_exits_four_after_reporting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1, "model": {"dim": 1, "n": 16, "mass_sq": 1.0},
            "regulator": {"family": "exponential"},
            "sampler": {"n_samples": 4000, "seed": 2}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(run("audit", &cfg, &out, &[]), 4);
    let a = json(out.join("audit.json"));
    assert_eq!(a["scale_exceeded"], Value::Bool(true));
    let records = a["records"].as_array().unwrap();
    let status = |name: &str| {
        records
            .iter()
            .find(|r| r["audit"] == name)
            .map(|r| r["status"].as_str().unwrap().to_string())
    };
    assert_eq!(status("bijection").as_deref(), Some("skipped"));
    assert_eq!(status("propagator_vs_flow").as_deref(), Some("pass"));
    assert_eq!(status("telescoping.phi_a=0.0000000000000000e0").as_deref(), Some("pass"));
}

#[test]
fn audit_closed_form_chain_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema_version": 1, "model": {"dim": 0, "mass_sq": 6.283185307179586}}"#,
    );
    let out = dir.path().join("out");
    assert_eq!(run("audit", &cfg, &out, &[]), 0);
    let a = json(out.join("audit.json"));
    assert_eq!(a["all_asserted_pass"], Value::Bool(true));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{
          "schema_version": 1,
          "model": { "dim": 1, "n": 2, "mass_sq": 1.0, "quartic": 0.5 },
          "regulator": { "family": "exponential" },
          "sampler": { "n_samples": 3000, "seed": 9, "chains": 3 },
          "correlators": { "requests": [{ "momenta": [[1], [1]], "connected": true }] },
          "lsz": { "processes": [{ "in": [[0], [1]], "out": [[0], [1]] }] },
          "outputs": { "formats": ["csv", "json"] }
        }"#,
    );
    for cmd in ["flow", "sample", "correlate", "lsz"] {
        let a = dir.path().join(format!("{cmd}_a"));
        let b = dir.path().join(format!("{cmd}_b"));
        let c = dir.path().join(format!("{cmd}_c"));
        assert_eq!(run(cmd, &cfg, &a, &["--threads", "2"]), 0);
        assert_eq!(run(cmd, &cfg, &b, &["--threads", "2"]), 0);
        assert_eq!(run(cmd, &cfg, &c, &["--threads", "1"]), 0);
        let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(!names.is_empty());
        for n in names {
            let x = std::fs::read(a.join(&n)).unwrap();
            assert_eq!(x, std::fs::read(b.join(&n)).unwrap(), "{cmd} {n:?}");
            assert_eq!(x, std::fs::read(c.join(&n)).unwrap(), "{cmd} {n:?} across thread counts");
        }
    }
}
