//! Stochastic controller synthesis, Euler-Maruyama Monte Carlo, and the
//! forward-backward residual check.
//!
//! The controller is `u = -W^+ Gamma x + (I - W^+ W) z` with
//! `W = R + Bbar' Pbar Bbar`, `Gamma = B' Pbar + Bbar' Pbar Abar` and
//! `z = G u1`. The steering input `u1` drives the mean state onto the
//! terminal subspace; this is only claimed pathwise when the free
//! directions do not enter the diffusion.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{pinv, symmetrize, Mat, Vector};
use crate::problem::{LqProblem, SimulationTrace};
use crate::regularity::{
    check_structural_conditions, check_pz2, check_regularized, classify, decompose, select_p1_terminal,
    AssumptionReport, RegularityReport, TerminalSelection,
};
use crate::riccati::{integrate_p, integrate_p1, integrate_pbar, MatrixGrid};
use crate::steering::{min_energy_steering, SteeringSolution};
use crate::Tolerances;

#[derive(Debug, Clone)]
pub struct StochController {
    /// `W^+ Gamma` at the nodes; the feedback is its negative.
    pub feedback_gain: MatrixGrid,
    /// `I - W^+ W` at the nodes.
    pub free_projector: MatrixGrid,
    /// Map `G` with `z = G u1`.
    pub injection_map: MatrixGrid,
    pub u1: Vec<Vector>,
    pub steering: Option<SteeringSolution>,
    pub assumption: AssumptionReport,
    /// Set when the structural conditions failed and synthesis continued
    /// on request.
    pub assumption_warning: bool,
    /// `max_t ||P1(T) Phi(T,t) Abar1(t)||`: how much state noise reaches
    /// the constrained directions. Zero means the mean steering is pathwise.
    pub noise_leak: f64,
}

impl StochController {
    pub fn control_at_node(&self, k: usize, x: &Vector) -> Vector {
        -(self.feedback_gain.node(k) * x) + self.injection_map.node(k) * &self.u1[k]
    }
}

/// Gramian steering of the mean state `E[x]' = A1 E[x] + B1 u1` onto
/// `P1(T) E[x(T)] = 0`. Refuses when the free directions excite the
/// diffusion (`Bbar1 != 0`).
pub fn steer_mean(
    p: &LqProblem,
    pgrid: &MatrixGrid,
    p1: &MatrixGrid,
    report: &RegularityReport,
    tol: &Tolerances,
) -> Result<SteeringSolution> {
    let mut b1 = Vec::with_capacity(p.grid.len());
    for (k, node) in report.nodes.iter().enumerate() {
        let cl = node.closed_loop(p1.node(k), tol.rank)?;
        let norm = cl.bbar1.norm();
        if norm > tol.residual {
            return Err(Error::UnsupportedNoiseCoupling {
                t: p.grid.time(k),
                norm,
            });
        }
        b1.push(cl.b1);
    }
    let b1 = MatrixGrid::from_values(p.grid, b1);
    let a1 = |t: f64| -> Mat {
        decompose(&p.coefficients(t), &pgrid.at(t), tol, report.pivot_rule)
            .and_then(|node| node.closed_loop(&p1.at(t), tol.rank))
            .map(|cl| cl.a1)
            .unwrap_or_else(|_| Mat::from_element(p.n(), p.n(), f64::NAN))
    };
    min_energy_steering(p.grid, p1.last(), a1, &b1, &p.x0, tol)
}

/// Build the controller. Fails when the modified cost is not regular or,
/// unless `warn_assumption` is set, when the structural conditions fail.
pub fn synthesize_stochastic(
    p: &LqProblem,
    pgrid: &MatrixGrid,
    pbar: &MatrixGrid,
    p1: &MatrixGrid,
    report: &RegularityReport,
    tol: &Tolerances,
    warn_assumption: bool,
) -> Result<StochController> {
    let check = check_regularized(p, pbar, tol)?;
    if !check.holds {
        return Err(Error::NotRegularizable {
            t: check.worst_t,
            residual: check.max_residual,
        });
    }
    let assumption = check_structural_conditions(p, report, p1, tol)?;
    let assumption_warning = !assumption.holds();
    if assumption_warning && !warn_assumption {
        return Err(assumption.first_violation().expect("a condition failed"));
    }
    if !assumption_warning {
        let pz2 = check_pz2(report, p1, tol)?;
        if pz2 > tol.residual * p1.max_norm().max(1.0) {
            return Err(Error::NotRegularizable {
                t: p.grid.t0,
                residual: pz2,
            });
        }
    }

    let m = p.m();
    let mut gains = Vec::with_capacity(p.grid.len());
    let mut projectors = Vec::with_capacity(p.grid.len());
    for k in 0..p.grid.len() {
        let c = p.coefficients_at_node(k);
        let pb = pbar.node(k);
        let w = symmetrize(&(&c.r + c.bbar.transpose() * pb * &c.bbar));
        let gamma = c.b.transpose() * pb + c.bbar.transpose() * pb * &c.abar;
        let w_pinv = pinv(&w, tol.rank)?;
        gains.push(&w_pinv * gamma);
        projectors.push(Mat::identity(m, m) - &w_pinv * w);
    }

    let free = report.free_dim();
    let needs_steering = report.is_irregular() && free > 0 && p1.last().norm() > 0.0;
    let (steering, u1, noise_leak) = if needs_steering {
        let steering = steer_mean(p, pgrid, p1, report, tol)?;
        let p1_t = p1.last();
        let mut leak: f64 = 0.0;
        for (k, node) in report.nodes.iter().enumerate() {
            let cl = node.closed_loop(p1.node(k), tol.rank)?;
            leak = leak.max((p1_t * steering.phi.node(k) * cl.abar1).norm());
        }
        let u1 = steering.u1.clone();
        (Some(steering), u1, leak)
    } else {
        (None, vec![Vector::zeros(free); p.grid.len()], 0.0)
    };

    Ok(StochController {
        feedback_gain: MatrixGrid::from_values(p.grid, gains),
        free_projector: MatrixGrid::from_values(p.grid, projectors),
        injection_map: report.g0(),
        u1,
        steering,
        assumption,
        assumption_warning,
        noise_leak,
    })
}

const TWO_POW_53: f64 = 9007199254740992.0;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1] keeps the logarithm finite.
    let u = ((rng.next_u64() >> 11) as f64 + 1.0) / TWO_POW_53;
    let v = (rng.next_u64() >> 11) as f64 / TWO_POW_53;
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Brownian increment over step `step` of path `path`; each step owns four
/// 32-bit words of the `(seed, path)` stream, so any increment can be
/// regenerated independently.
pub fn brownian_increment(seed: u64, path: u64, step: usize, h: f64) -> f64 {
    let mut rng = path_rng(seed, path);
    rng.set_word_pos(4 * step as u128);
    h.sqrt() * standard_normal(&mut rng)
}

/// Closed-loop coefficients flattened per node for the path loop.
struct PathKernel {
    n: usize,
    m: usize,
    steps: usize,
    h: f64,
    x0: Vec<f64>,
    drift: Vec<f64>,
    drift_off: Vec<f64>,
    diffusion: Vec<f64>,
    diffusion_off: Vec<f64>,
    gain: Vec<f64>,
    control_off: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    terminal: Vec<f64>,
    escape_bound: f64,
}

fn push_row_major(out: &mut Vec<f64>, m: &Mat) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

fn mat_vec_add(out: &mut [f64], a: &[f64], x: &[f64], off: &[f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * cols..(i + 1) * cols];
        *o = off[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn quad(a: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    (0..n)
        .map(|i| x[i] * (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>())
        .sum()
}

impl PathKernel {
    fn new(p: &LqProblem, c: &StochController, tol: &Tolerances) -> Self {
        let (n, m) = (p.n(), p.m());
        let nodes = p.grid.len();
        let mut k = PathKernel {
            n,
            m,
            steps: p.grid.n_steps,
            h: p.grid.step(),
            x0: p.x0.iter().copied().collect(),
            drift: Vec::with_capacity(nodes * n * n),
            drift_off: Vec::with_capacity(nodes * n),
            diffusion: Vec::with_capacity(nodes * n * n),
            diffusion_off: Vec::with_capacity(nodes * n),
            gain: Vec::with_capacity(nodes * m * n),
            control_off: Vec::with_capacity(nodes * m),
            q: Vec::with_capacity(nodes * n * n),
            r: Vec::with_capacity(nodes * m * m),
            terminal: Vec::with_capacity(n * n),
            escape_bound: tol.escape_bound,
        };
        for node in 0..nodes {
            let co = p.coefficients_at_node(node);
            let neg_gain = -c.feedback_gain.node(node);
            let v = c.injection_map.node(node) * &c.u1[node];
            push_row_major(&mut k.drift, &(&co.a + &co.b * &neg_gain));
            k.drift_off.extend((&co.b * &v).iter());
            push_row_major(&mut k.diffusion, &(&co.abar + &co.bbar * &neg_gain));
            k.diffusion_off.extend((&co.bbar * &v).iter());
            push_row_major(&mut k.gain, &neg_gain);
            k.control_off.extend(v.iter());
            push_row_major(&mut k.q, &co.q);
            push_row_major(&mut k.r, &co.r);
        }
        push_row_major(&mut k.terminal, &p.h);
        k
    }

    /// One path; `record(k, x, u, dw)` sees every node (with `dw = 0` at
    /// the last). Returns the trapezoidal realized cost.
    fn run(
        &self,
        seed: u64,
        path: u64,
        mut record: impl FnMut(usize, &[f64], &[f64], f64),
    ) -> Result<f64> {
        let (n, m, h) = (self.n, self.m, self.h);
        let mut rng = path_rng(seed, path);
        let sqrt_h = h.sqrt();
        let mut x = self.x0.clone();
        let mut u = vec![0.0; m];
        let mut drift = vec![0.0; n];
        let mut diffusion = vec![0.0; n];
        let mut running = 0.0;
        let mut prev = 0.0;
        for k in 0..=self.steps {
            let nn = k * n * n;
            let mn = k * m * n;
            mat_vec_add(
                &mut u,
                &self.gain[mn..mn + m * n],
                &x,
                &self.control_off[k * m..(k + 1) * m],
            );
            let cost = quad(&self.q[nn..nn + n * n], &x) + quad(&self.r[k * m * m..(k + 1) * m * m], &u);
            if k > 0 {
                running += 0.5 * h * (prev + cost);
            }
            prev = cost;
            if k == self.steps {
                record(k, &x, &u, 0.0);
                break;
            }
            let dw = sqrt_h * standard_normal(&mut rng);
            record(k, &x, &u, dw);
            mat_vec_add(
                &mut drift,
                &self.drift[nn..nn + n * n],
                &x,
                &self.drift_off[k * n..(k + 1) * n],
            );
            mat_vec_add(
                &mut diffusion,
                &self.diffusion[nn..nn + n * n],
                &x,
                &self.diffusion_off[k * n..(k + 1) * n],
            );
            for i in 0..n {
                x[i] += drift[i] * h + diffusion[i] * dw;
                if x[i].is_nan() || x[i].abs() > self.escape_bound {
                    return Err(Error::FiniteEscape {
                        t: (k + 1) as f64 * h,
                        bound: self.escape_bound,
                    });
                }
            }
        }
        Ok(running + quad(&self.terminal, &x))
    }
}

/// Euler-Maruyama paths under the controller, with left-point coefficients
/// and increments from [`brownian_increment`]'s stream layout.
pub fn simulate_em(
    p: &LqProblem,
    c: &StochController,
    seed: u64,
    n_paths: usize,
    tol: &Tolerances,
) -> Result<Vec<SimulationTrace>> {
    let kernel = PathKernel::new(p, c, tol);
    let times = p.grid.times();
    (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut states = Vec::with_capacity(times.len());
            let mut controls = Vec::with_capacity(times.len());
            let mut dws = Vec::with_capacity(p.grid.n_steps);
            let cost = kernel.run(seed, path, |k, x, u, dw| {
                states.push(Vector::from_column_slice(x));
                controls.push(Vector::from_column_slice(u));
                if k < p.grid.n_steps {
                    dws.push(dw);
                }
            })?;
            Ok(SimulationTrace {
                times: times.clone(),
                states,
                controls,
                noise_increments: Some(dws),
                realized_cost: cost,
            })
        })
        .collect()
}

/// Realized costs only, without storing trajectories.
pub fn simulate_em_costs(
    p: &LqProblem,
    c: &StochController,
    seed: u64,
    n_paths: usize,
    tol: &Tolerances,
) -> Result<Vec<f64>> {
    let kernel = PathKernel::new(p, c, tol);
    (0..n_paths as u64)
        .into_par_iter()
        .map(|path| kernel.run(seed, path, |_, _, _, _| {}))
        .collect()
}

/// Sample mean and 95% normal-approximation half-width.
pub fn monte_carlo_cost(costs: &[f64]) -> Result<(f64, f64)> {
    let n = costs.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = costs.iter().sum::<f64>() / n as f64;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * (var / n as f64).sqrt()))
}

/// Costates along one path, reconstructed from `P`, `P1` and the
/// decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrace {
    pub theta: Vec<Vector>,
    pub theta_bar: Vec<Vector>,
    pub p: Vec<Vector>,
    pub q: Vec<Vector>,
}

pub fn costates(
    prob: &LqProblem,
    trace: &SimulationTrace,
    pgrid: &MatrixGrid,
    p1: &MatrixGrid,
    report: &RegularityReport,
    u1: &[Vector],
    tol: &Tolerances,
) -> Result<CostateTrace> {
    let mut out = CostateTrace {
        theta: Vec::new(),
        theta_bar: Vec::new(),
        p: Vec::new(),
        q: Vec::new(),
    };
    for (k, node) in report.nodes.iter().enumerate() {
        let c = prob.coefficients_at_node(k);
        let x = &trace.states[k];
        let u = &trace.controls[k];
        let cl = node.closed_loop(p1.node(k), tol.rank)?;
        let theta = p1.node(k) * x;
        let theta_bar = p1.node(k) * (&cl.abar1 * x + &cl.bbar1 * &u1[k]);
        out.p.push(pgrid.node(k) * x + &theta);
        out.q
            .push(pgrid.node(k) * (&c.abar * x + &c.bbar * u) + &theta_bar);
        out.theta.push(theta);
        out.theta_bar.push(theta_bar);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualStats {
    /// Largest value over all paths and nodes.
    pub max: f64,
    /// Mean over paths of the per-path maximum.
    pub mean: f64,
}

impl ResidualStats {
    fn from_paths(per_path: &[f64]) -> Self {
        let max = per_path.iter().copied().fold(0.0, f64::max);
        let mean = per_path.iter().sum::<f64>() / per_path.len().max(1) as f64;
        ResidualStats { max, mean }
    }

    fn to_json(self) -> Value {
        json!({ "max": self.max, "mean": self.mean })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeReport {
    /// `||R u + B' p + Bbar' q||`.
    pub stationarity: ResidualStats,
    /// `||C0 x + B0' Theta + Bbar0' Thetabar||`.
    pub constraint: ResidualStats,
    /// One-step defect of `dTheta = Thetahat dt + Thetabar dw`, divided by
    /// the step.
    pub drift: ResidualStats,
    /// `||Theta(T)||`.
    pub terminal_costate: ResidualStats,
    /// `||P1(T) x(T)||`.
    pub terminal_constraint: ResidualStats,
}

impl FbsdeReport {
    pub fn to_json(&self) -> Value {
        json!({
            "stationarity": self.stationarity.to_json(),
            "constraint": self.constraint.to_json(),
            "drift": self.drift.to_json(),
            "terminal_costate": self.terminal_costate.to_json(),
            "terminal_constraint": self.terminal_constraint.to_json(),
        })
    }
}

/// Residuals of the forward-backward system along simulated paths, with
/// the costates in closed form.
pub fn verify_fbsde(
    prob: &LqProblem,
    traces: &[SimulationTrace],
    pgrid: &MatrixGrid,
    p1: &MatrixGrid,
    report: &RegularityReport,
    controller: &StochController,
    tol: &Tolerances,
) -> Result<FbsdeReport> {
    let h = prob.grid.step();
    let n_steps = prob.grid.n_steps;
    let nodes: Vec<_> = (0..prob.grid.len())
        .map(|k| prob.coefficients_at_node(k))
        .collect();
    let mut stat = Vec::new();
    let mut cons = Vec::new();
    let mut drift = Vec::new();
    let mut term_theta = Vec::new();
    let mut term_x = Vec::new();
    for trace in traces {
        let cs = costates(prob, trace, pgrid, p1, report, &controller.u1, tol)?;
        let dws = trace.noise_increments.as_deref();
        let (mut s, mut c, mut d): (f64, f64, f64) = (0.0, 0.0, 0.0);
        for k in 0..=n_steps {
            let co = &nodes[k];
            let node = &report.nodes[k];
            let u = &trace.controls[k];
            let x = &trace.states[k];
            let u1 = &controller.u1[k];
            s = s.max((&co.r * u + co.b.transpose() * &cs.p[k] + co.bbar.transpose() * &cs.q[k]).norm());
            c = c.max(
                (&node.c0 * x + node.b0.transpose() * &cs.theta[k]
                    + node.bbar0.transpose() * &cs.theta_bar[k])
                    .norm(),
            );
            if k < n_steps {
                let hat = -(node.den.a0.transpose() * &cs.theta[k]
                    + node.den.abar0.transpose() * &cs.theta_bar[k]
                    + node.c0.transpose() * u1);
                let dw = dws.map(|v| v[k]).unwrap_or(0.0);
                let defect = &cs.theta[k + 1] - &cs.theta[k] - hat * h - &cs.theta_bar[k] * dw;
                d = d.max(defect.norm() / h);
            }
        }
        stat.push(s);
        cons.push(c);
        drift.push(d);
        term_theta.push(cs.theta[n_steps].norm());
        term_x.push((p1.last() * trace.terminal_state()).norm());
    }
    Ok(FbsdeReport {
        stationarity: ResidualStats::from_paths(&stat),
        constraint: ResidualStats::from_paths(&cons),
        drift: ResidualStats::from_paths(&drift),
        terminal_costate: ResidualStats::from_paths(&term_theta),
        terminal_constraint: ResidualStats::from_paths(&term_x),
    })
}

/// Output of the stochastic pipeline up to the controller.
#[derive(Debug, Clone)]
pub struct StochSolution {
    pub p: MatrixGrid,
    pub report: RegularityReport,
    pub selection: TerminalSelection,
    pub p1: MatrixGrid,
    pub pbar: MatrixGrid,
    pub controller: StochController,
}

/// Riccati, classification, terminal selection and synthesis.
pub fn solve_stochastic(
    p: &LqProblem,
    tol: &Tolerances,
    warn_assumption: bool,
) -> Result<StochSolution> {
    let pgrid = integrate_p(p, tol)?;
    let report = classify(p, &pgrid, tol)?;
    let selection = select_p1_terminal(p, &report, tol)?;
    let p1 = integrate_p1(p, &pgrid, &selection.p1_t, tol)?;
    let pbar = integrate_pbar(p, &selection.p1_t, tol)?;
    let controller =
        synthesize_stochastic(p, &pgrid, &pbar, &p1, &report, tol, warn_assumption)?;
    Ok(StochSolution {
        p: pgrid,
        report,
        selection,
        p1,
        pbar,
        controller,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::det_synth;
    use crate::fixtures;
    use crate::problem::evaluate_cost;
    use crate::regularity::Condition;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn as_stochastic(p: &LqProblem) -> LqProblem {
        let (n, m) = (p.n(), p.m());
        LqProblem::stochastic(
            p.grid,
            p.x0.clone(),
            p.a.clone(),
            p.b.clone(),
            crate::CoefficientFn::Constant(Mat::zeros(n, n)),
            crate::CoefficientFn::Constant(Mat::zeros(n, m)),
            p.q.clone(),
            p.r.clone(),
            p.h.clone(),
        )
    }

    #[test]
    fn increments_are_random_access() {
        let h: f64 = 0.01;
        let seq = |path| {
            let mut rng = path_rng(7, path);
            (0..20).map(|_| h.sqrt() * standard_normal(&mut rng)).collect::<Vec<_>>()
        };
        let s0 = seq(0);
        for (k, dw) in s0.iter().enumerate() {
            assert_eq!(*dw, brownian_increment(7, 0, k, h));
        }
        assert_ne!(s0, seq(1));
    }

    #[test]
    fn increments_have_brownian_moments() {
        let h = 0.5;
        let n = 20000;
        let v: Vec<f64> = (0..n).map(|k| brownian_increment(3, 11, k, h)).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - h).abs() < 0.03, "{var}");
    }

    #[test]
    fn monte_carlo_needs_two_samples() {
        assert!(matches!(
            monte_carlo_cost(&[1.0]),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
        let (mean, hw) = monte_carlo_cost(&[1.0, 3.0]).unwrap();
        assert_eq!(mean, 2.0);
        assert!((hw - 1.96 * (2.0f64 / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fast_path_costs_match_traces() {
        let p = fixtures::regular_stochastic_scalar(200);
        let sol = solve_stochastic(&p, &tol(), false).unwrap();
        let traces = simulate_em(&p, &sol.controller, 5, 8, &tol()).unwrap();
        let costs = simulate_em_costs(&p, &sol.controller, 5, 8, &tol()).unwrap();
        for (tr, c) in traces.iter().zip(&costs) {
            assert_eq!(tr.realized_cost, *c);
            assert!((evaluate_cost(&p, tr).unwrap() - c).abs() < 1e-12 * c.max(1.0));
            let dws = tr.noise_increments.as_ref().unwrap();
            assert_eq!(dws.len(), 200);
        }
        // Same seed, same paths.
        let again = simulate_em_costs(&p, &sol.controller, 5, 8, &tol()).unwrap();
        assert_eq!(costs, again);
    }

    #[test]
    fn regular_controller_has_no_free_part() {
        let p = fixtures::regular_stochastic_scalar(500);
        let sol = solve_stochastic(&p, &tol(), false).unwrap();
        assert!(!sol.report.is_irregular());
        assert!(sol.controller.steering.is_none());
        assert!(sol.controller.free_projector.max_norm() < 1e-12);
        assert!(sol.p1.max_norm() == 0.0);
    }

    #[test]
    fn deterministic_reduction_matches_deterministic_steering() {
        let det = fixtures::singular_example(400);
        let stoch = as_stochastic(&det);
        let ds = det_synth::solve(&det, &tol()).unwrap();
        let ss = solve_stochastic(&stoch, &tol(), false).unwrap();
        let a = &ds.controller.u1;
        let b = &ss.controller.u1;
        let gap = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        assert!(gap < 1e-10, "{gap}");
        // Without noise every path is the deterministic trajectory.
        let tr = simulate_em(&stoch, &ss.controller, 1, 2, &tol()).unwrap();
        assert!(tr[0].terminal_state()[0].abs() < 1e-2);
        assert!(tr[0].realized_cost < 1e-4);
    }

    #[test]
    fn supported_fixture_steers_every_path() {
        let p = fixtures::supported_stochastic(2, 2000);
        let sol = solve_stochastic(&p, &tol(), false).unwrap();
        assert!(sol.report.is_irregular());
        assert!(sol.controller.noise_leak < 1e-8, "{}", sol.controller.noise_leak);
        let traces = simulate_em(&p, &sol.controller, 9, 20, &tol()).unwrap();
        let rep = verify_fbsde(&p, &traces, &sol.p, &sol.p1, &sol.report, &sol.controller, &tol())
            .unwrap();
        assert!(rep.terminal_constraint.max < 5e-3, "{rep:?}");
        assert!(rep.stationarity.max < 1e-6, "{rep:?}");
        assert!(rep.constraint.max < 1e-6, "{rep:?}");
    }

    #[test]
    fn fbsde_residuals_shrink_with_the_grid() {
        let coarse = fixtures::supported_stochastic(4, 20);
        let fine = coarse.with_grid(coarse.grid.refined(2)).unwrap();
        let res = |p: &LqProblem| {
            let sol = solve_stochastic(p, &tol(), false).unwrap();
            let tr = simulate_em(p, &sol.controller, 1, 30, &tol()).unwrap();
            verify_fbsde(p, &tr, &sol.p, &sol.p1, &sol.report, &sol.controller, &tol()).unwrap()
        };
        let (c, f) = (res(&coarse), res(&fine));
        assert!(c.stationarity.mean / f.stationarity.mean > 1.4, "{c:?} {f:?}");
        assert!(c.constraint.mean / f.constraint.mean > 1.4, "{c:?} {f:?}");
    }

    #[test]
    fn noise_coupled_free_directions_are_refused() {
        let p = fixtures::steering_noise_violation(200);
        let err = solve_stochastic(&p, &tol(), false).unwrap_err();
        assert!(
            matches!(
                err,
                Error::StructuralConditionViolated { .. } | Error::UnsupportedNoiseCoupling { .. }
            ),
            "{err:?}"
        );
        let pgrid = integrate_p(&p, &tol()).unwrap();
        let report = classify(&p, &pgrid, &tol()).unwrap();
        let p1_t = Mat::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.5]);
        let p1 = integrate_p1(&p, &pgrid, &p1_t, &tol()).unwrap();
        let a2 = check_structural_conditions(&p, &report, &p1, &tol()).unwrap();
        assert!(a2.max_residual(Condition::SteeringNoise) > 0.1);
        assert!(matches!(
            steer_mean(&p, &pgrid, &p1, &report, &tol()),
            Err(Error::UnsupportedNoiseCoupling { .. })
        ));
    }
}
