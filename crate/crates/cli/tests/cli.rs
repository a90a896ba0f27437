use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use singular_lq::fixtures;
use singular_lq::problem::save_problem_file;
use singular_lq::{Error, LqProblem};
use singular_lq_cli::{exit_code, main_with_args};

fn slq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_problem(dir: &Path, name: &str, p: &LqProblem) -> String {
    let path = dir.join(name);
    save_problem_file(p, &path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn demo_reaches_zero_cost() {
    let dir = tempfile::tempdir().unwrap();
    let out = slq(&["demo", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let summary = stdout_json(&out);
    assert!(summary["realized_cost"].as_f64().unwrap() < 1e-4);
    assert_eq!(summary["p1_terminal"].as_f64().unwrap(), -1.0);
    for f in ["problem.json", "p.csv", "p1.csv", "pbar.csv", "trace.csv", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    // The written problem solves to the same result.
    let problem = dir.path().join("problem.json");
    let again = slq(&["solve", "--problem", problem.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0));
    assert!(stdout_json(&again)["realized_cost"].as_f64().unwrap() < 1e-4);
}

#[test]
fn regular_problem_needs_no_terminal_modification() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_problem(dir.path(), "regular.json", &fixtures::random_regular(2, 2, 1));
    let out = slq(&["solve", "--problem", &path]);
    assert_eq!(out.status.code(), Some(0));
    let summary = stdout_json(&out);
    assert_eq!(summary["controller"], "regular");
    let p1: Vec<f64> = summary["p1_terminal"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|row| row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()))
        .collect();
    assert!(p1.iter().all(|v| *v == 0.0));
}

#[test]
fn unreachable_terminal_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_problem(dir.path(), "u.json", &fixtures::unreachable_terminal());
    let out = slq(&["solve", "--problem", &path]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unreachable"));
}

#[test]
fn noise_coupled_steering_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_problem(dir.path(), "v.json", &fixtures::steering_noise_violation(200));
    let out = slq(&["simulate", "--problem", &path, "--paths", "10"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn malformed_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{ \"kind\": \"deterministic\", ").unwrap();
    let out = slq(&["classify", "--problem", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
    assert_eq!(slq(&["solve"]).status.code(), Some(2));
    assert_eq!(slq(&["solve", "--tol-rank", "-1"]).status.code(), Some(2));
    assert_eq!(slq(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn classify_writes_the_node_table() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_problem(dir.path(), "e.json", &fixtures::singular_example(100));
    let out_dir = dir.path().join("out");
    let out = slq(&["classify", "--problem", &path, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["verdict"], "irregular");
    let table = fs::read_to_string(out_dir.join("regularity.csv")).unwrap();
    assert_eq!(table.lines().count(), 102);
}

#[test]
fn stochastic_simulation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_problem(dir.path(), "s.json", &fixtures::supported_stochastic(1, 200));
    let run = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = slq(&[
            "simulate", "--problem", &path, "--paths", "40", "--seed", "7", "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        (out.stdout, fs::read_to_string(out_dir.join("costs.csv")).unwrap())
    };
    let (a, costs_a) = run("a");
    let (b, costs_b) = run("b");
    assert_eq!(a, b);
    assert_eq!(costs_a, costs_b);
    assert_eq!(costs_a.lines().count(), 41);
    let summary: Value = serde_json::from_slice(&a).unwrap();
    assert!(summary["residuals"]["terminal_constraint"]["max"].as_f64().unwrap() < 1e-2);
}

#[test]
fn written_trace_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_problem(dir.path(), "i.json", &fixtures::random_irregular(3, 3, 1, 4));
    let out_dir = dir.path().join("out");
    let solved = slq(&["solve", "--problem", &path, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(solved.status.code(), Some(0));
    let trace = out_dir.join("trace.csv");
    let out = slq(&["verify", "--problem", &path, "--trace", trace.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report = stdout_json(&out);
    for key in ["stationarity", "adjoint", "terminal_costate", "terminal_constraint"] {
        assert!(report[key].as_f64().unwrap() < 1e-4, "{key}: {report}");
    }
}

#[test]
fn oracles_agree_on_the_example() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_problem(dir.path(), "e.json", &fixtures::singular_example(200));
    let qp = slq(&["oracle", "--problem", &path, "--method", "qp", "--n-steps", "400"]);
    assert_eq!(qp.status.code(), Some(0));
    let pert = slq(&["oracle", "--problem", &path, "--method", "perturb", "--eps", "1e-2,1e-3"]);
    assert_eq!(pert.status.code(), Some(0));
    let docs = stdout_json(&pert);
    let costs: Vec<f64> = docs
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["optimal_cost"].as_f64().unwrap())
        .collect();
    assert!(costs[1] < costs[0]);
    assert!(stdout_json(&qp)[0]["optimal_cost"].as_f64().unwrap() < 1e-6);
}

#[test]
fn error_families_have_distinct_codes() {
    let errors = [
        Error::InvalidProblem("x".into()),
        Error::NotRegularizable { t: 0.0, residual: 1.0 },
        Error::TerminalUnreachable { residual: 1.0 },
        Error::StructuralConditionViolated { condition: "row-space inclusion", t: 0.0, residual: 1.0 },
        Error::FiniteEscape { t: 0.0, bound: 1.0 },
        Error::Io("x".into()),
    ];
    let codes: Vec<i32> = errors.iter().map(exit_code).collect();
    assert_eq!(codes, vec![2, 3, 4, 5, 6, 1]);
    assert_eq!(main_with_args(["slq", "--help"]), 0);
}

#[test]
fn unweighted_free_channel_with_state_cost_exits_3() {
    // x' = u_a + u_b with only u_a weighted and a running state cost: no
    // terminal modification can remove the state penalty along u_b.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nr.json");
    fs::write(
        &path,
        r#"{"kind": "deterministic", "t0": 0, "T": 1, "n_steps": 200, "x0": [1],
            "A": {"const": [[0]]}, "B": {"const": [[1, 1]]}, "Q": {"const": [[1]]},
            "R": {"const": [[1, 0], [0, 0]]}, "H": [[0]]}"#,
    )
    .unwrap();
    let out = slq(&["solve", "--problem", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}
