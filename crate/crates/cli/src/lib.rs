//! `slq`: classify, solve, simulate and verify singular LQ problems from
//! problem documents, writing CSV tables and JSON reports.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use singular_lq::det_synth::{self, solve, verify_optimality};
use singular_lq::fixtures;
use singular_lq::oracle::{discretized_qp_solve, perturbation_solve};
use singular_lq::problem::{load_problem_file, read_trace_csv, save_problem, trace_to_csv};
use singular_lq::regularity::{classify, Classification};
use singular_lq::riccati::{check_pbar_identity, integrate_p, MatrixGrid};
use singular_lq::stoch_synth::{
    monte_carlo_cost, simulate_em, simulate_em_costs, solve_stochastic, verify_fbsde,
    StochSolution,
};
use singular_lq::{Error, LqProblem, Mat, Tolerances};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_NOT_REGULARIZABLE: i32 = 3;
pub const EXIT_UNREACHABLE: i32 = 4;
pub const EXIT_STRUCTURE: i32 = 5;
pub const EXIT_ESCAPE: i32 = 6;

/// Paths whose full forward-backward residuals are reported by `simulate`.
const RESIDUAL_PATHS: usize = 200;

#[derive(Debug, Parser)]
#[command(name = "slq", version, about = "Singular linear-quadratic optimal control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Integrate the Riccati equation and classify every node.
    Classify(Common),
    /// Synthesize the controller and report verification residuals.
    Solve(Common),
    /// Run the synthesized controller; Monte Carlo for stochastic problems.
    Simulate(Common),
    /// Check a supplied trace against the optimality conditions.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Trace CSV as written by `solve` or `simulate`.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Reference solution by perturbation or direct discretization.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = OracleKind::Qp)]
        method: OracleKind,
        /// Steps of the discretized problem.
        #[arg(long, default_value_t = 2000)]
        n_steps: usize,
    },
    /// End-to-end run of the built-in scalar irregular example.
    Demo(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    Perturb,
    Qp,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Problem document (JSON).
    #[arg(long)]
    pub problem: Option<PathBuf>,
    /// Directory for CSV and JSON artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Relative singular-value cutoff.
    #[arg(long, default_value_t = 1e-9)]
    pub tol_rank: f64,
    /// Residual threshold for regularity and structure checks.
    #[arg(long, default_value_t = 1e-6)]
    pub tol_res: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte Carlo paths for stochastic problems.
    #[arg(long, default_value_t = 1000)]
    pub paths: usize,
    /// Perturbation sizes for `oracle --method perturb`.
    #[arg(long, value_delimiter = ',', default_value = "1e-2,1e-3,1e-4")]
    pub eps: Vec<f64>,
    /// Continue with a warning when the structural conditions fail.
    #[arg(long = "warn-assumption2", visible_alias = "warn-structure")]
    pub warn_structure: bool,
}

/// Everything `run` needs, resolved from the command line.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub common: Common,
    pub tol: Tolerances,
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self, String> {
        let common = match &cli.command {
            Command::Classify(c)
            | Command::Solve(c)
            | Command::Simulate(c)
            | Command::Demo(c) => c.clone(),
            Command::Verify { common, .. } | Command::Oracle { common, .. } => common.clone(),
        };
        let positive = |v: f64| v > 0.0;
        if !positive(common.tol_rank) || !positive(common.tol_res) {
            return Err("tolerances must be positive".into());
        }
        if common.eps.iter().any(|&e| !positive(e)) {
            return Err("--eps values must be positive".into());
        }
        let tol = Tolerances {
            rank: common.tol_rank,
            residual: common.tol_res,
            ..Tolerances::default()
        };
        Ok(RunConfig {
            command: cli.command,
            common,
            tol,
        })
    }
}

/// Distinct exit status for each failure family.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::InvalidProblem(_) => EXIT_PARSE,
        Error::NotRegularizable { .. } | Error::RankProfileChange { .. } => {
            EXIT_NOT_REGULARIZABLE
        }
        Error::TerminalUnreachable { .. } => EXIT_UNREACHABLE,
        Error::StructuralConditionViolated { .. } | Error::UnsupportedNoiseCoupling { .. } => {
            EXIT_STRUCTURE
        }
        Error::FiniteEscape { .. } => EXIT_ESCAPE,
        _ => EXIT_OTHER,
    }
}

/// Parse arguments, run, and return the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
        }
    };
    match RunConfig::from_cli(cli) {
        Ok(config) => run(&config),
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_PARSE
        }
    }
}

pub fn run(config: &RunConfig) -> i32 {
    match dispatch(config) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("JSON value"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(config: &RunConfig) -> singular_lq::Result<Value> {
    let out = Output::new(config.common.out.as_deref())?;
    match &config.command {
        Command::Classify(_) => cmd_classify(&load(config)?, config, &out),
        Command::Solve(_) => cmd_solve(&load(config)?, config, &out, false),
        Command::Simulate(_) => cmd_solve(&load(config)?, config, &out, true),
        Command::Verify { trace, .. } => cmd_verify(&load(config)?, trace, config, &out),
        Command::Oracle {
            method, n_steps, ..
        } => cmd_oracle(&load(config)?, *method, *n_steps, config, &out),
        Command::Demo(_) => cmd_demo(config, &out),
    }
}

fn load(config: &RunConfig) -> singular_lq::Result<LqProblem> {
    let path = config
        .common
        .problem
        .as_ref()
        .ok_or_else(|| Error::InvalidProblem("--problem is required".into()))?;
    load_problem_file(path)
}

/// Optional artifact directory; writes are no-ops without `--out`.
struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    fn new(dir: Option<&Path>) -> singular_lq::Result<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d)?;
        }
        Ok(Output {
            dir: dir.map(Path::to_path_buf),
        })
    }

    fn write(&self, name: &str, contents: &str) -> singular_lq::Result<()> {
        if let Some(d) = &self.dir {
            fs::write(d.join(name), contents)?;
        }
        Ok(())
    }

    fn write_json(&self, name: &str, value: &Value) -> singular_lq::Result<()> {
        self.write(name, &serde_json::to_string_pretty(value).expect("JSON value"))
    }
}

fn matrix_json(m: &Mat) -> Value {
    json!((0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect::<Vec<_>>())
        .collect::<Vec<_>>())
}

fn kind_name(p: &LqProblem) -> &'static str {
    if p.is_stochastic() {
        "stochastic"
    } else {
        "deterministic"
    }
}

fn cmd_classify(p: &LqProblem, config: &RunConfig, out: &Output) -> singular_lq::Result<Value> {
    let pgrid = integrate_p(p, &config.tol)?;
    let report = classify(p, &pgrid, &config.tol)?;
    out.write("regularity.csv", &report.to_csv())?;
    out.write("p.csv", &pgrid.to_csv("P"))?;
    let irregular_nodes = report
        .classification
        .iter()
        .filter(|c| **c == Classification::Irregular)
        .count();
    let summary = json!({
        "kind": kind_name(p),
        "verdict": if report.is_irregular() { "irregular" } else { "regular" },
        "irregular_nodes": irregular_nodes,
        "nodes": report.classification.len(),
        "m0": report.m0,
        "free_dim": report.free_dim(),
        "max_range_residual": report.range_residuals().into_iter().fold(0.0, f64::max),
    });
    out.write_json("classify.json", &summary)?;
    Ok(summary)
}

fn write_grids(out: &Output, p: &MatrixGrid, p1: &MatrixGrid, pbar: &MatrixGrid) -> singular_lq::Result<()> {
    out.write("p.csv", &p.to_csv("P"))?;
    out.write("p1.csv", &p1.to_csv("P1"))?;
    out.write("pbar.csv", &pbar.to_csv("Pbar"))
}

fn cmd_solve(
    p: &LqProblem,
    config: &RunConfig,
    out: &Output,
    per_path: bool,
) -> singular_lq::Result<Value> {
    if p.is_stochastic() {
        return solve_stochastic_cmd(p, config, out, per_path);
    }
    let sol = solve(p, &config.tol)?;
    write_grids(out, &sol.p, &sol.p1, &sol.pbar)?;
    out.write("regularity.csv", &sol.report.to_csv())?;
    out.write("trace.csv", &trace_to_csv(p, &sol.trace)?)?;
    out.write("gain.csv", &sol.controller.feedback_gain.to_csv("K"))?;
    let verification = sol.verification.to_json();
    out.write_json("verification.json", &verification)?;
    let summary = json!({
        "kind": kind_name(p),
        "controller": format!("{:?}", sol.controller.kind).to_lowercase(),
        "p1_terminal": matrix_json(&sol.selection.p1_t),
        "terminal_family_dimension": sol.selection.family_dimension,
        "terminal_state": sol.trace.terminal_state().iter().copied().collect::<Vec<_>>(),
        "terminal_constraint": (sol.p1.last() * sol.trace.terminal_state()).norm(),
        "realized_cost": sol.trace.realized_cost,
        "predicted_cost": sol.verification.predicted_cost,
        "steering_energy": sol.controller.steering.as_ref().map(|s| s.energy()),
        "verification": verification,
    });
    out.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn solve_stochastic_cmd(
    p: &LqProblem,
    config: &RunConfig,
    out: &Output,
    per_path: bool,
) -> singular_lq::Result<Value> {
    let tol = &config.tol;
    let sol: StochSolution = solve_stochastic(p, tol, config.common.warn_structure)?;
    if sol.controller.assumption_warning {
        if let Some(e) = sol.controller.assumption.first_violation() {
            eprintln!("warning: {e}; pathwise terminal constraint is not guaranteed");
        }
    }
    write_grids(out, &sol.p, &sol.p1, &sol.pbar)?;
    out.write("regularity.csv", &sol.report.to_csv())?;
    out.write("gain.csv", &sol.controller.feedback_gain.to_csv("K"))?;
    let seed = config.common.seed;
    let n_paths = config.common.paths;
    let costs = simulate_em_costs(p, &sol.controller, seed, n_paths, tol)?;
    let (mean, half_width) = monte_carlo_cost(&costs)?;
    let checked = n_paths.min(RESIDUAL_PATHS);
    let traces = simulate_em(p, &sol.controller, seed, checked, tol)?;
    let residuals = verify_fbsde(p, &traces, &sol.p, &sol.p1, &sol.report, &sol.controller, tol)?;
    if let Some(first) = traces.first() {
        out.write("trace.csv", &trace_to_csv(p, first)?)?;
    }
    if per_path {
        let mut csv = String::from("path,cost\n");
        for (i, c) in costs.iter().enumerate() {
            csv.push_str(&format!("{i},{c}\n"));
        }
        out.write("costs.csv", &csv)?;
    }
    let summary = json!({
        "kind": kind_name(p),
        "irregular": sol.report.is_irregular(),
        "p1_terminal": matrix_json(&sol.selection.p1_t),
        "seed": seed,
        "paths": n_paths,
        "mean_cost": mean,
        "half_width_95": half_width,
        "predicted_cost": p.x0.dot(&(sol.pbar.first() * &p.x0)),
        "value_identity_gap": check_pbar_identity(&sol.p, &sol.p1, &sol.pbar),
        "noise_leak": sol.controller.noise_leak,
        "structure_warning": sol.controller.assumption_warning,
        "residual_paths": checked,
        "residuals": residuals.to_json(),
    });
    out.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn cmd_verify(
    p: &LqProblem,
    trace_path: &Path,
    config: &RunConfig,
    out: &Output,
) -> singular_lq::Result<Value> {
    let text = fs::read_to_string(trace_path)?;
    let trace = read_trace_csv(&text, p.n(), p.m()).map_err(|e| match e {
        Error::Parse { path, message } => Error::Parse {
            path: format!("{}: {path}", trace_path.display()),
            message,
        },
        other => other,
    })?;
    if trace.times.len() != p.grid.len() {
        return Err(Error::InvalidProblem(format!(
            "trace has {} rows but the problem grid has {} nodes",
            trace.times.len(),
            p.grid.len()
        )));
    }
    let report = if p.is_stochastic() {
        let sol = solve_stochastic(p, &config.tol, config.common.warn_structure)?;
        verify_fbsde(p, &[trace], &sol.p, &sol.p1, &sol.report, &sol.controller, &config.tol)?
            .to_json()
    } else {
        let sol = solve(p, &config.tol)?;
        verify_optimality(p, &trace, &sol.p, &sol.p1)?.to_json()
    };
    out.write_json("verification.json", &report)?;
    Ok(report)
}

fn cmd_oracle(
    p: &LqProblem,
    method: OracleKind,
    n_steps: usize,
    config: &RunConfig,
    out: &Output,
) -> singular_lq::Result<Value> {
    let results = match method {
        OracleKind::Qp => vec![discretized_qp_solve(p, n_steps, &config.tol)?],
        OracleKind::Perturb => config
            .common
            .eps
            .iter()
            .map(|&e| perturbation_solve(p, e, &config.tol))
            .collect::<singular_lq::Result<Vec<_>>>()?,
    };
    let docs: Vec<Value> = results.iter().map(|r| r.to_json()).collect();
    out.write_json("oracle.json", &json!(docs))?;
    Ok(json!(results
        .iter()
        .map(|r| {
            let mut doc = r.to_json();
            if let Some(obj) = doc.as_object_mut() {
                obj.remove("times");
                obj.remove("controls");
            }
            doc
        })
        .collect::<Vec<_>>()))
}

fn cmd_demo(config: &RunConfig, out: &Output) -> singular_lq::Result<Value> {
    let p = fixtures::singular_example(1000);
    let t_final = p.grid.t_final;
    let sol = det_synth::solve(&p, &config.tol)?;
    let p_error = (0..p.grid.len())
        .map(|k| (sol.p.node(k)[(0, 0)] - fixtures::singular_example_p(p.grid.time(k), t_final)).abs())
        .fold(0.0, f64::max);
    let pbar_max = sol.pbar.max_norm();
    let x_t = sol.trace.terminal_state()[0];
    let cost = sol.trace.realized_cost;
    eprintln!("scalar irregular example: x' = x + u_a - u_b, cost int u_a^2 + x(T)^2");
    eprintln!("  P(t) vs 2/(1+exp(2(t-T))): max error {p_error:.3e}");
    eprintln!("  P1(T) = {}", sol.selection.p1_t[(0, 0)]);
    eprintln!("  max |Pbar| = {pbar_max:.3e}");
    eprintln!("  |x(T)| = {:.3e}", x_t.abs());
    eprintln!("  realized cost = {cost:.3e}");
    out.write("problem.json", &save_problem(&p))?;
    write_grids(out, &sol.p, &sol.p1, &sol.pbar)?;
    out.write("trace.csv", &trace_to_csv(&p, &sol.trace)?)?;
    let summary = json!({
        "p_closed_form_error": p_error,
        "p1_terminal": sol.selection.p1_t[(0, 0)],
        "pbar_max": pbar_max,
        "terminal_state": x_t,
        "realized_cost": cost,
        "verification": sol.verification.to_json(),
    });
    out.write_json("summary.json", &summary)?;
    Ok(summary)
}
