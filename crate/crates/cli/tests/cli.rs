use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use hetserve::candidates::{gen_homog, CandidateSet};
use hetserve::perfdb::PerfDb;
use hetserve::plan::Plan;
use hetserve::ClusterSpec;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn spec_path() -> PathBuf {
    fixtures().join("cluster.json")
}

fn trace_path() -> PathBuf {
    fixtures().join("trace.jsonl")
}

fn hetserve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetserve"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn last_json(o: &Output) -> serde_json::Value {
    let text = stdout(o);
    let line = text.lines().last().expect("output has a line");
    serde_json::from_str(line).expect("last line is JSON")
}

struct Artifacts {
    _dir: tempfile::TempDir,
    db: PathBuf,
    cands: PathBuf,
    pareto: PathBuf,
}

const LOADS: &str = "2:20:2";

/// Database, candidates and a short optimization shared by the tests.
fn artifacts() -> &'static Artifacts {
    static CELL: OnceLock<Artifacts> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("db.bin");
        let cands = dir.path().join("cands.json");
        let pareto = dir.path().join("pareto.json");
        let o = hetserve(&[
            "perfdb", "build", "--spec", s(&spec_path()), "--trace", s(&trace_path()), "--loads", LOADS,
            "--seed", "3", "--out", s(&db),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = hetserve(&[
            "candidates", "gen", "--db", s(&db), "--spec", s(&spec_path()), "--budget", "30", "--ref-load", "8",
            "--out", s(&cands),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = hetserve(&[
            "optimize", "--db", s(&db), "--cands", s(&cands), "--trace", s(&trace_path()), "--qps", "16",
            "--budget", "30", "--iters", "6", "--seed", "5", "--out", s(&pareto),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Artifacts {
            _dir: dir,
            db,
            cands,
            pareto,
        }
    })
}

#[test]
fn pipeline_closes_and_replay_matches_plan_quality() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let report = dir.path().join("report.json");
    let o = hetserve(&["select", "--pareto", s(&a.pareto), "--qmin", "0.75", "--out", s(&plan)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = hetserve(&[
        "replay", "--plan", s(&plan), "--trace", s(&trace_path()), "--spec", s(&spec_path()), "--out", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = last_json(&o);
    assert_eq!(v["q"], v["predicted_q"]);
    assert!(report.exists());
    let p = Plan::load(&plan).unwrap();
    assert!(p.predicted_q >= 0.75);
}

#[test]
fn perfdb_build_is_deterministic() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("db.bin");
    let o = hetserve(&[
        "perfdb", "build", "--spec", s(&spec_path()), "--trace", s(&trace_path()), "--loads", LOADS, "--seed", "3",
        "--out", s(&again),
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&a.db).unwrap(), std::fs::read(&again).unwrap());
    let v = last_json(&o);
    assert_eq!(v["loads"], 10);
    assert_eq!(v["records"].as_u64().unwrap(), v["configs"].as_u64().unwrap() * 10);
}

#[test]
fn optimize_is_deterministic() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("pareto.json");
    let o = hetserve(&[
        "optimize", "--db", s(&a.db), "--cands", s(&a.cands), "--trace", s(&trace_path()), "--qps", "16", "--budget",
        "30", "--iters", "6", "--seed", "5", "--out", s(&again),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&a.pareto).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn missing_spec_exits_2_naming_the_path() {
    let o = hetserve(&["perfdb", "build", "--spec", "/no/such/spec.json", "--trace", s(&trace_path()), "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/spec.json"));
}

#[test]
fn impossible_quality_exits_3() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let o = hetserve(&[
        "optimize", "--db", s(&a.db), "--cands", s(&a.cands), "--trace", s(&trace_path()), "--qps", "16", "--budget",
        "30", "--iters", "2", "--qmin", "1.01", "--out", s(&dir.path().join("p.json")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn select_flag_validation_and_infeasible_latency() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let o = hetserve(&["select", "--pareto", s(&a.pareto), "--qmin", "0.8", "--lmax", "3", "--out", s(&plan)]);
    assert_eq!(o.status.code(), Some(64));
    let o = hetserve(&["select", "--pareto", s(&a.pareto), "--out", s(&plan)]);
    assert_eq!(o.status.code(), Some(64));
    let o = hetserve(&["select", "--pareto", s(&a.pareto), "--lmax", "1e-6", "--out", s(&plan)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nearest"));
}

#[test]
fn select_honours_quality_scale() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let o = hetserve(&[
        "select", "--pareto", s(&a.pareto), "--qmin", "75", "--quality-scale", "100", "--out", s(&plan),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = last_json(&o);
    let q = v["q"].as_f64().unwrap();
    assert!(q >= 75.0 && q <= 100.0, "{q}");
}

#[test]
fn unknown_command_and_bad_flags_exit_64() {
    assert_eq!(hetserve(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(hetserve(&["simulate", "--qps", "x"]).status.code(), Some(64));
    assert_eq!(hetserve(&["--help"]).status.code(), Some(0));
}

#[test]
fn candidates_reject_a_foreign_spec() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let mut spec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(spec_path()).unwrap()).unwrap();
    spec["gpus"][0]["count"] = serde_json::json!(4);
    let other = dir.path().join("other.json");
    std::fs::write(&other, spec.to_string()).unwrap();
    let o = hetserve(&[
        "candidates", "gen", "--db", s(&a.db), "--spec", s(&other), "--budget", "30", "--out",
        s(&dir.path().join("c.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("digest"));
}

#[test]
fn optimize_rejects_candidates_from_another_db() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let mut cands = CandidateSet::load(&a.cands).unwrap();
    cands.db_digest = "00".repeat(32);
    let path = dir.path().join("c.json");
    cands.save(&path).unwrap();
    let o = hetserve(&[
        "optimize", "--db", s(&a.db), "--cands", s(&path), "--trace", s(&trace_path()), "--qps", "16", "--budget",
        "30", "--iters", "1", "--out", s(&dir.path().join("p.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tiny_budget_gives_empty_sets_with_warning() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let o = hetserve(&["candidates", "gen", "--db", s(&a.db), "--budget", "0.01", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    let set = CandidateSet::load(&out).unwrap();
    assert!(set.models.iter().all(|m| m.candidates.is_empty()));
}

#[test]
fn single_gpu_type_counts_equal_homogeneous_frontiers() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(spec_path()).unwrap()).unwrap();
    spec["gpus"] = serde_json::json!([spec["gpus"][0].clone()]);
    spec["coeffs"] = serde_json::json!([]);
    let spec_file = dir.path().join("one.json");
    std::fs::write(&spec_file, spec.to_string()).unwrap();
    let db = dir.path().join("db.bin");
    let cands = dir.path().join("c.json");
    let o = hetserve(&[
        "perfdb", "build", "--spec", s(&spec_file), "--trace", s(&trace_path()), "--loads", "2:10:2", "--out", s(&db),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = hetserve(&[
        "candidates", "gen", "--db", s(&db), "--budget", "100", "--ref-load", "4", "--out", s(&cands),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = last_json(&o);
    let db = PerfDb::load(&db).unwrap();
    let spec = ClusterSpec::load(&spec_file).unwrap();
    for m in &spec.models {
        let homog = gen_homog(&db, &m.name, &spec.gpus[0].name, 4.0, 2.0).unwrap();
        let affordable = homog.iter().filter(|c| c.cost_cents.dollars() <= 100.0).count();
        assert_eq!(v["counts"][&m.name].as_u64().unwrap() as usize, affordable, "{}", m.name);
    }
}

#[test]
fn simulate_reports_memory_infeasibility() {
    let o = hetserve(&[
        "simulate", "--spec", s(&spec_path()), "--model", "large", "--gpu", "rtx5090", "--n", "1", "--trace",
        s(&trace_path()), "--qps", "2",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("memory"));
}

#[test]
fn simulate_matches_a_perfdb_cell_and_its_own_table() {
    let a = artifacts();
    let o = hetserve(&[
        "simulate", "--spec", s(&spec_path()), "--model", "small", "--gpu", "rtx5090", "--n", "4", "--tp", "4",
        "--trace", s(&trace_path()), "--qps", "6", "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = last_json(&o);
    let db = PerfDb::load(&a.db).unwrap();
    let cfg = hetserve::ReplicaConfig::new("small", "rtx5090", 4, 1);
    let rec = db.lookup(&cfg, 6.0).unwrap();
    assert_eq!(v["quantiles"]["p95"].as_f64().unwrap(), rec.p95());
    assert_eq!(v["throughput"].as_f64().unwrap(), rec.throughput);

    // the table rows print the same numbers the JSON line carries
    let text = stdout(&o);
    let row = text.lines().find(|l| l.trim_start().starts_with("p95 ")).unwrap();
    let shown: f64 = row.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((shown - rec.p95()).abs() < 1e-6);
}

#[test]
fn replay_rejects_unknown_gpu() {
    let a = artifacts();
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let o = hetserve(&["select", "--pareto", s(&a.pareto), "--qmin", "0.7", "--out", s(&plan)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut p = Plan::load(&plan).unwrap();
    p.models[0].replicas[0].gpu = "tpu".into();
    p.save(&plan).unwrap();
    let o = hetserve(&["replay", "--plan", s(&plan), "--trace", s(&trace_path()), "--spec", s(&spec_path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tpu"));
}
