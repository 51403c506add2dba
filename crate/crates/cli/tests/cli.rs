use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eigdesign"))
}

fn shipped(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    fs::read_to_string(p).unwrap()
}

/// Replaces whole `key = ...` lines; keys are `section.key`. Panics if a key is
/// absent so an edit can't silently miss.
fn with(text: &str, edits: &[(&str, &str)]) -> String {
    let mut out: Vec<String> = text.lines().map(str::to_string).collect();
    for (full, value) in edits {
        let (section, key) = full.split_once('.').unwrap();
        let header = format!("[{section}]");
        let prefix = format!("{key} =");
        let mut current = String::new();
        let mut hit = None;
        for (i, l) in out.iter().enumerate() {
            if l.starts_with('[') {
                current = l.trim().to_string();
            } else if current == header && l.starts_with(&prefix) {
                hit = Some(i);
            }
        }
        let i = hit.unwrap_or_else(|| panic!("no key {full}"));
        out[i] = format!("{key} = {value}");
    }
    out.join("\n")
}

struct Run {
    out: Output,
    dir: PathBuf,
}

impl Run {
    fn code(&self) -> i32 {
        self.out.status.code().unwrap()
    }
    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.out.stderr).into_owned()
    }
    fn json(&self, file: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.dir.join(file)).unwrap()).unwrap()
    }
    fn text(&self, file: &str) -> String {
        fs::read_to_string(self.dir.join(file)).unwrap()
    }
}

fn run(tmp: &Path, config: &str, args: &[&str]) -> Run {
    let cfg = tmp.join("run.conf");
    fs::write(&cfg, config).unwrap();
    let dir = tmp.join("out");
    let out = bin().args(args).arg("--config").arg(&cfg).arg("--out").arg(&dir).output().unwrap();
    Run { out, dir }
}

fn validate(doc: &Value) {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/result.schema.json");
    let schema: Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "schema violations: {errors:#?}");
}

fn without_metadata(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("metadata");
    v
}

fn drop_column(csv: &str, name: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    std::iter::once(header.join(","))
        .chain(lines.map(|l| l.split(',').enumerate().filter(|(i, _)| *i != idx).map(|(_, c)| c).collect::<Vec<_>>().join(",")))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn example1_estimate_matches_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example1.conf"), &[("estimator.tol", "0.1")]);
    let r = run(tmp.path(), &cfg, &["estimate"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let doc = r.json("estimate.json");
    validate(&doc);
    let value = doc["estimate"]["value"].as_f64().unwrap();
    let se = doc["estimate"]["std_error"].as_f64().unwrap();
    assert_eq!(doc["optimal_setting"]["feasible"], Value::Bool(true));
    assert!((value - 2.153_415_766_673_891).abs() < 3.0 * se, "{value} +- {se}");
    assert!((value - 2.15).abs() < 0.1);
    assert!((doc["reference"].as_f64().unwrap() - 2.1534).abs() < 1e-4);
}

#[test]
fn missing_model_name_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = shipped("example1.conf").replace("name = linear-scalar", "");
    let r = run(tmp.path(), &cfg, &["estimate"]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("model.name"), "{}", r.stderr());
}

#[test]
fn bad_value_reports_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example1.conf"), &[("estimator.alpha", "often")]);
    let r = run(tmp.path(), &cfg, &["tune"]);
    assert_eq!(r.code(), 2);
    let line = cfg.lines().position(|l| l.starts_with("alpha")).unwrap() + 1;
    assert!(r.stderr().contains(&format!("line {line}: estimator.alpha")), "{}", r.stderr());
}

#[test]
fn mcla_below_the_laplace_bias_is_infeasible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example2.conf"), &[("estimator.tol", "1e-4"), ("estimator.name", "mcla")]);
    let r = run(tmp.path(), &cfg, &["estimate"]);
    assert_eq!(r.code(), 3, "{}", r.stderr());
    assert!(r.stderr().contains("Laplace bias"), "{}", r.stderr());
}

#[test]
fn tune_reports_each_tolerance_and_flags_infeasible_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example2.conf"), &[("estimator.tol", "1, 1e-4")]);
    let r = run(tmp.path(), &cfg, &["tune", "--estimator", "mcla"]);
    assert_eq!(r.code(), 3);
    let doc = r.json("tune.json");
    validate(&doc);
    let s = doc["settings"].as_array().unwrap();
    assert_eq!(s[0]["result"]["feasible"], Value::Bool(true));
    assert_eq!(s[1]["result"]["feasible"], Value::Bool(false));
    assert!(s[1]["result"]["message"].as_str().unwrap().contains("Laplace bias"));

    let forced = run(tmp.path(), &cfg, &["tune", "--estimator", "mcla", "--force-kappa1"]);
    assert_eq!(forced.code(), 0, "{}", forced.stderr());
    let doc = forced.json("tune.json");
    assert_eq!(doc["settings"][1]["result"]["bias_constraint_waived"], Value::Bool(true));
}

#[test]
fn reruns_are_identical_apart_from_timing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example1.conf"), &[("estimator.tol", "0.3, 0.1"), ("estimator.replicates", "3")]);
    let a = run(tmp.path(), &cfg, &["consistency", "--seed", "11"]);
    assert_eq!(a.code(), 0, "{}", a.stderr());
    let csv_a = a.text("consistency.csv");
    let sum_a = a.text("consistency_summary.csv");
    let est_a = run(tmp.path(), &cfg, &["estimate", "--seed", "11"]).json("estimate.json");

    let b = run(tmp.path(), &cfg, &["consistency", "--seed", "11", "--jobs", "1"]);
    assert_eq!(drop_column(&csv_a, "wall_time"), drop_column(&b.text("consistency.csv"), "wall_time"));
    assert_eq!(sum_a, b.text("consistency_summary.csv"));
    let est_b = run(tmp.path(), &cfg, &["estimate", "--seed", "11"]).json("estimate.json");
    assert_eq!(
        serde_json::to_string(&without_metadata(est_a.clone())).unwrap(),
        serde_json::to_string(&without_metadata(est_b)).unwrap()
    );

    let c = run(tmp.path(), &cfg, &["estimate", "--seed", "12"]).json("estimate.json");
    assert_ne!(est_a["estimate"]["value"], c["estimate"]["value"]);
}

#[test]
fn consistency_rows_and_header() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example1.conf"), &[("estimator.tol", "1, 0.3")]);
    let r = run(tmp.path(), &cfg, &["consistency", "--replicates", "2"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let csv = r.text("consistency.csv");
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "TOL,replicate,N,M,h,kappa,estimate,std_error,abs_error_vs_reference,work_units,wall_time,underflow_count,seed"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').nth(4) == Some("exact")));
}

#[test]
fn zero_replicates_write_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let r = run(tmp.path(), &shipped("example1.conf"), &["consistency", "--replicates", "0"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    assert_eq!(r.text("consistency.csv").lines().count(), 1);
}

#[test]
fn consistency_needs_an_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example1.conf"), &[("design.xi", "10, 1")]);
    let r = run(tmp.path(), &cfg, &["consistency", "--replicates", "1"]);
    assert_ne!(r.code(), 0);
}

#[test]
fn single_tolerance_work_study_has_no_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example2.conf"), &[("estimator.tol", "0.3")]);
    let r = run(tmp.path(), &cfg, &["work-study"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let doc = r.json("work_study_slopes.json");
    validate(&doc);
    assert_eq!(doc["work_slope"], Value::Null);
    assert!(doc["status"].as_str().unwrap().starts_with("not available"));
    assert_eq!(r.text("work_study.csv").lines().count(), 2);
}

#[test]
fn work_study_fits_a_slope_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example2.conf"), &[("estimator.tol", "1, 0.3, 0.1")]);
    let r = run(tmp.path(), &cfg, &["work-study"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let doc = r.json("work_study_slopes.json");
    validate(&doc);
    assert!(doc["work_slope"].as_f64().unwrap() < -1.0);
}

#[test]
fn one_point_grid_gives_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = with(&shipped("example1.conf"), &[("design.grid_points", "1"), ("estimator.tol", "0.3")]);
    let r = run(tmp.path(), &cfg, &["eig-curve"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let csv = r.text("eig_curve.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "xi,estimate,std_error,half_width,N,M,kappa,reference,work_units,underflow_count,seed,error");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1.0000000000000000e1,"));
}

#[test]
fn curve_points_record_failures_in_row() {
    let tmp = tempfile::tempdir().unwrap();
    // MCLA at a tolerance below its bias floor: every point fails but the run completes.
    let cfg = with(&shipped("example2.conf"), &[("design.grid_points", "3"), ("estimator.tol", "1e-3"), ("estimator.name", "mcla"), ("pilot.bias_n", "2000")]);
    let r = run(tmp.path(), &cfg, &["eig-curve"]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let csv = r.text("eig_curve.csv");
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).any(|l| !l.ends_with(',')), "{csv}");
}
