//! Output schema, determinism and CLI behavior.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dgk::engine::Method;
use dgk_bench::output::{bounds_header, epochs_header, trajectory_header, write_run, CANDIDATES_HEADER};
use dgk_bench::sweep::{sweep, table_header};
use dgk_bench::{run_scenario, BenchError, ModelKind, Scenario};

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn quad1() -> Scenario {
    Scenario::load(&scenario_path("quad_case1.json")).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn shipped_scenarios_parse() {
    for name in ["quad_case1.json", "quad_case2.json", "racing.json"] {
        let sc = Scenario::load(&scenario_path(name)).unwrap();
        assert_eq!(sc.seeds.len(), 10, "{name}");
    }
}

#[test]
fn run_writes_documented_files() {
    let sc = quad1();
    let run = run_scenario(&sc, Method::DualGatekeeper, 3, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &sc, &run).unwrap();

    let (h, epochs) = read_csv(&dir.path().join("epochs.csv"));
    assert_eq!(h, epochs_header(ModelKind::DragQuad));
    assert_eq!(epochs.len(), run.log.epochs.len());
    let (h, _) = read_csv(&dir.path().join("candidates.csv"));
    assert_eq!(h, CANDIDATES_HEADER);

    let (h, traj) = read_csv(&dir.path().join("trajectory.csv"));
    assert_eq!(h, trajectory_header(ModelKind::DragQuad));
    assert_eq!(traj.len(), run.log.executed.len());
    assert!(traj.last().unwrap()[7].is_empty(), "final sample has no input");

    let (h, bounds) = read_csv(&dir.path().join("bounds.csv"));
    assert_eq!(h, bounds_header(ModelKind::DragQuad));
    let last = bounds.last().unwrap();
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let lo: f64 = last[1].parse().unwrap();
    let hi: f64 = last[2].parse().unwrap();
    let reduction = summary["uncertainty_reduction_pct"][0].as_f64().unwrap();
    assert!((100.0 * (1.0 - (hi - lo) / 0.5) - reduction).abs() < 1e-5);
    assert_eq!(summary["method"], "dual_gatekeeper");

    let resolved = Scenario::load(&dir.path().join("scenario.json")).unwrap();
    assert_eq!(resolved, sc);
}

#[test]
fn same_seed_gives_identical_files() {
    let sc = quad1();
    let dirs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let run = run_scenario(&sc, Method::DualGatekeeper, 5, None).unwrap();
            write_run(dir.path(), &sc, &run).unwrap();
            dir
        })
        .collect();
    for f in ["epochs.csv", "candidates.csv", "trajectory.csv", "bounds.csv", "summary.json"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        let b = fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
}

#[test]
fn baseline_reports_itself_at_full_cost_without_budget() {
    let run = run_scenario(&quad1(), Method::Baseline, 1, None).unwrap();
    assert_eq!(run.summary.cost_pct, 100.0);
    assert_eq!(run.summary.budget, None);
    assert_eq!(run.summary.budget_consumed_pct, None);
    assert_eq!(run.summary.uncertainty_reduction_pct, vec![0.0]);
}

#[test]
fn relative_budget_scales_baseline_cost() {
    let run = run_scenario(&quad1(), Method::DualGatekeeper, 2, None).unwrap();
    let b = run.summary.budget.unwrap();
    assert!((b - 1.1 * run.summary.baseline_cost).abs() < 1e-9 * b);
}

#[test]
fn sweep_table_has_one_row_per_trial() {
    let sc = quad1();
    let dir = tempfile::tempdir().unwrap();
    let res = sweep(&sc, &[0, 1], &[Method::Baseline, Method::DualGatekeeper], Some(dir.path())).unwrap();
    assert_eq!(res.rows.len(), 4);
    let (h, rows) = read_csv(&dir.path().join("table.csv"));
    assert_eq!(h, table_header(ModelKind::DragQuad));
    assert_eq!(rows.len(), 4);
    assert!(dir.path().join("dual_gatekeeper/seed_1/summary.json").exists());
    assert!(dir.path().join("aggregate.json").exists());
    assert_eq!(res.aggregates[0].safe_runs, 2);
}

#[test]
fn empty_seed_list_is_an_error() {
    assert!(matches!(sweep(&quad1(), &[], &[Method::Baseline], None), Err(BenchError::Invalid(_))));
}

#[test]
fn cli_run_and_bad_input() {
    let exe = env!("CARGO_BIN_EXE_dgk");
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(exe)
        .args(["run", "--scenario"])
        .arg(scenario_path("quad_case2.json"))
        .args(["--seed", "4", "--method", "dual_gatekeeper", "--budget-pct", "50", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let (h, _) = read_csv(&dir.path().join("bounds.csv"));
    assert_eq!(h, bounds_header(ModelKind::VectorDragQuad));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let budget = summary["budget"].as_f64().unwrap();
    let baseline = summary["baseline_cost"].as_f64().unwrap();
    assert!((budget / baseline - 0.5).abs() < 1e-6);

    let bad = Command::new(exe)
        .args(["run", "--scenario"])
        .arg(scenario_path("quad_case1.json"))
        .args(["--method", "nominal", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("not available"));
}
