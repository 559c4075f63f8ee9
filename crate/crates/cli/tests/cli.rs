use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distrdd::data::write_csv;
use distrdd::simlab::{dgp_sample, DgpId, DgpSpec};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distrdd"))
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    let value: Value = serde_json::from_str(&text).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, doc: &Value) {
    let v = schema(schema_name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:?}");
}

fn sample_file(dir: &Path, id: DgpId, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(format!("{id}_{n}_{seed}.csv"));
    write_csv(&dgp_sample(&DgpSpec::new(id, n, seed)).unwrap(), &path).unwrap();
    path
}

fn run(args: &[&str], input: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--input")
        .arg(input)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn num(v: &Value, path: &str) -> f64 {
    v.pointer(path).and_then(Value::as_f64).unwrap_or_else(|| panic!("missing {path}"))
}

fn check_summary_invariants(s: &Value) {
    let psi = s
        .pointer("/summary/psi")
        .or_else(|| s.pointer("/summary/psi_prime"))
        .and_then(Value::as_f64)
        .unwrap();
    let tau = s
        .pointer("/summary/tau")
        .or_else(|| s.pointer("/summary/tau_prime"))
        .and_then(Value::as_f64)
        .unwrap();
    assert!(tau.abs() <= psi * (1.0 + 1e-12) + 1e-12, "{tau} {psi}");
    let psi2 = num(s, "/psi2");
    for i in s["intervals"].as_array().unwrap() {
        let lo = i["lo"].as_f64().unwrap();
        let hi = i["hi"].as_f64().unwrap();
        assert!(lo <= psi2 && psi2 <= hi, "{i}");
    }
}

#[test]
fn rdd_writes_valid_artifacts() {
    let dir = TempDir::new().unwrap();
    let input = sample_file(dir.path(), DgpId::Additive, 20_000, 1);
    let out = dir.path().join("out");
    let o = run(&["rdd", "--boot", "200", "--mc-draws", "20000", "--interval", "both"], &input, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&out.join("summary.json"));
    assert_valid("summary.schema.json", &s);
    check_summary_invariants(&s);
    assert_eq!(s["intervals"].as_array().unwrap().len(), 2);
    assert_eq!(s["tests"].as_array().unwrap().len(), 2);
    assert_eq!(s["seed"], 0);

    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    let mut lines = curves.lines();
    assert_eq!(lines.next().unwrap(), "u,q0,q1,dq,contribution,band_lo,band_hi");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 1999);
    assert!(rows.iter().all(|r| r.split(',').count() == 7));

    let lm = std::fs::read_to_string(out.join("lmoments.csv")).unwrap();
    let keys: Vec<&str> = lm.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, ["k", "1", "2", "3", ">=4"]);
}

#[test]
fn rdd_recovers_constant_shift() {
    let dir = TempDir::new().unwrap();
    let seeds = 5;
    let (mut psi, mut gamma) = (0.0, 0.0);
    for seed in 0..seeds {
        let input = sample_file(dir.path(), DgpId::Additive, 100_000, seed);
        let out = dir.path().join(format!("out{seed}"));
        let o = run(
            &["rdd", "--bandwidth-rule", "const:1.5", "--boot", "100", "--mc-draws", "5000"],
            &input,
            &out,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let s = read_json(&out.join("summary.json"));
        psi += num(&s, "/summary/psi") / seeds as f64;
        gamma += num(&s, "/summary/gamma") / seeds as f64;
    }
    assert!((psi - 0.5).abs() < 0.05, "mean psi {psi}");
    assert!(gamma < 0.05, "mean gamma {gamma}");
}

#[test]
fn fuzzy_on_sharp_file_matches_rdd() {
    let dir = TempDir::new().unwrap();
    let input = sample_file(dir.path(), DgpId::Additive, 20_000, 3);
    let args = ["--boot", "200", "--mc-draws", "20000", "--interval", "both"];
    let o1 = dir.path().join("sharp");
    let o2 = dir.path().join("fuzzy");
    let mut a1 = vec!["rdd"];
    a1.extend(args);
    let mut a2 = vec!["fuzzy-rdd"];
    a2.extend(args);
    assert!(run(&a1, &input, &o1).status.success());
    let f = run(&a2, &input, &o2);
    assert!(f.status.success(), "{}", String::from_utf8_lossy(&f.stderr));
    let s1 = read_json(&o1.join("summary.json"));
    let s2 = read_json(&o2.join("summary.json"));
    for p in ["/summary/psi", "/summary/tau", "/psi2", "/intervals/0/hi", "/intervals/1/hi"] {
        assert!((num(&s1, p) - num(&s2, p)).abs() < 1e-8, "{p}");
    }
    assert!((num(&s2, "/first_stage") - 1.0).abs() < 1e-8);
}

#[test]
fn kink_with_declared_slopes() {
    let dir = TempDir::new().unwrap();
    let input = sample_file(dir.path(), DgpId::KinkLocation, 20_000, 2);
    let out = dir.path().join("out");
    let o = run(
        &[
            "kink", "--left-slope", "0", "--right-slope", "1", "--order", "1", "--bandwidth", "0.5",
            "--trim", "0.01", "--boot", "200", "--mc-draws", "20000",
        ],
        &input,
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&out.join("summary.json"));
    assert_valid("summary.schema.json", &s);
    check_summary_invariants(&s);
    assert_eq!(num(&s, "/first_stage"), 1.0);
    assert_eq!(s["intervals"][0]["method"], "kink_conservative");
    let header = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(header.starts_with("u,q0,q1,dq_prime,"));
}

#[test]
fn zero_kink_reports_first_stage_error() {
    let dir = TempDir::new().unwrap();
    let input = sample_file(dir.path(), DgpId::KinkLocation, 2_000, 2);
    let out = dir.path().join("out");
    let o = run(&["kink", "--left-slope", "0", "--right-slope", "0"], &input, &out);
    assert!(!o.status.success());
    let e = read_json(&out.join("error.json"));
    assert_valid("error.schema.json", &e);
    assert_eq!(e["stage"], "first-stage");
    assert_eq!(e["kind"], "WeakFirstStage");
    assert!(!out.join("summary.json").exists());
}

#[test]
fn missing_column_is_an_ingestion_error() {
    let dir = TempDir::new().unwrap();
    let input = sample_file(dir.path(), DgpId::Additive, 2_000, 2);
    let out = dir.path().join("out");
    let o = run(&["rdd", "--y-col", "outcome"], &input, &out);
    assert!(!o.status.success());
    let e = read_json(&out.join("error.json"));
    assert_valid("error.schema.json", &e);
    assert_eq!(e["stage"], "ingestion");
    assert_eq!(e["kind"], "MissingColumn");
}

#[test]
fn fuzzy_kink_needs_treatment_column() {
    let dir = TempDir::new().unwrap();
    let input = sample_file(dir.path(), DgpId::KinkLocation, 2_000, 2);
    let out = dir.path().join("out");
    let o = run(&["fuzzy-kink"], &input, &out);
    assert!(!o.status.success());
    assert_eq!(read_json(&out.join("error.json"))["stage"], "ingestion");
}

fn simulate(out: &Path, seed: &str) -> Output {
    bin()
        .args([
            "simulate", "--reps", "10", "--n", "1000", "--boot", "100", "--gamma", "0.05,0.1",
            "--methods", "band,conservative,conservative-test", "--seed", seed, "--out",
        ])
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn simulate_smoke_and_determinism() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = simulate(&a, "7");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(simulate(&b, "7").status.success());
    let csv_a = std::fs::read(a.join("mc_report.csv")).unwrap();
    let csv_b = std::fs::read(b.join("mc_report.csv")).unwrap();
    assert_eq!(csv_a, csv_b);

    let text = String::from_utf8(csv_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dgp,n,gamma,method,coverage,mean_width,reps,mc_se"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert_eq!(r.len(), 8);
        let coverage: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&coverage));
        assert_eq!(r[6], "10");
    }
    let m = read_json(&a.join("manifest.json"));
    assert_valid("manifest.schema.json", &m);
    assert_eq!(m["seed"], 7);
}

#[test]
fn unknown_design_is_rejected_by_the_parser() {
    let dir = TempDir::new().unwrap();
    let o = bin()
        .args(["simulate", "--dgp", "nonsense", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!o.status.success());
}
