//! Deterministic controller synthesis, closed-loop simulation and the
//! first-order optimality certificate.
//!
//! The controller is `u = -R^+ B' (P + P1) x + G0 u1`: feedback for the
//! modified (regular) cost plus a steering input in the free directions
//! that enforces `P1(T) x(T) = 0`.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{kernel_projector, pinv, zero_row_transform_with, Mat, PivotRule, Vector};
use crate::problem::{evaluate_cost, LqProblem, SimulationTrace};
use crate::regularity::{
    check_regularized, classify, select_p1_terminal, RegularityReport, TerminalSelection,
};
use crate::riccati::{integrate_p, integrate_p1, integrate_pbar, MatrixGrid};
use crate::steering::{min_energy_steering, SteeringSolution};
use crate::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Regular,
    Irregular,
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub kind: ControllerKind,
    /// `K(t)` at the nodes, with `u = -K x + G0 u1`.
    pub feedback_gain: MatrixGrid,
    pub injection_map: MatrixGrid,
    pub u1: Vec<Vector>,
    pub steering: Option<SteeringSolution>,
    /// `P + P1`, kept for evaluating the gain between nodes.
    pub value: MatrixGrid,
    pub pivot_rule: PivotRule,
    pub rank_tol: f64,
}

/// Free-direction injection `G0(t)` for the weight `R(t)`.
pub fn injection_at(r: &Mat, rank_tol: f64, rule: PivotRule) -> Result<Mat> {
    let projector = kernel_projector(r, rank_tol)?;
    Ok(zero_row_transform_with(&projector, rank_tol, rule)?.injection_block())
}

impl Controller {
    /// Control at an arbitrary time for state `x`.
    pub fn control(&self, p: &LqProblem, t: f64, x: &Vector) -> Result<Vector> {
        let c = p.coefficients(t);
        let gain = pinv(&c.r, self.rank_tol)? * c.b.transpose() * self.value.at(t);
        let mut u = -(gain * x);
        if let Some(steer) = &self.steering {
            let g0 = injection_at(&c.r, self.rank_tol, self.pivot_rule)?;
            u += &g0 * steer.u1_at(t, &(&c.b * &g0));
        }
        Ok(u)
    }

    /// Control at node `k`, using the stored node grids.
    pub fn control_at_node(&self, k: usize, x: &Vector) -> Vector {
        -(self.feedback_gain.node(k) * x) + self.injection_map.node(k) * &self.u1[k]
    }
}

/// Build the controller from `P`, `P1` and the decomposition of `R`.
pub fn synthesize(
    p: &LqProblem,
    pgrid: &MatrixGrid,
    p1: &MatrixGrid,
    report: &RegularityReport,
    tol: &Tolerances,
) -> Result<Controller> {
    let value = sum_grids(pgrid, p1);
    let check = check_regularized(p, &value, tol)?;
    if !check.holds {
        return Err(Error::NotRegularizable {
            t: check.worst_t,
            residual: check.max_residual,
        });
    }
    let gains = (0..p.grid.len())
        .map(|k| {
            let c = p.coefficients_at_node(k);
            Ok(pinv(&c.r, tol.rank)? * c.b.transpose() * value.node(k))
        })
        .collect::<Result<Vec<_>>>()?;
    let feedback_gain = MatrixGrid::from_values(p.grid, gains);
    let injection_map = report.g0();
    let free = report.free_dim();
    let p1_t = p1.last();

    let irregular = report.is_irregular() || p1.max_norm() > 0.0;
    if !irregular || free == 0 {
        return Ok(Controller {
            kind: if irregular {
                ControllerKind::Irregular
            } else {
                ControllerKind::Regular
            },
            feedback_gain,
            injection_map,
            u1: vec![Vector::zeros(free); p.grid.len()],
            steering: None,
            value,
            pivot_rule: report.pivot_rule,
            rank_tol: tol.rank,
        });
    }

    let acl = |t: f64| -> Mat {
        let c = p.coefficients(t);
        let gain = pinv(&c.r, tol.rank).unwrap_or_else(|_| Mat::zeros(c.r.ncols(), c.r.nrows()))
            * c.b.transpose()
            * value.at(t);
        &c.a - &c.b * gain
    };
    let steering = min_energy_steering(p.grid, p1_t, acl, &report.b0(), &p.x0, tol)?;
    Ok(Controller {
        kind: ControllerKind::Irregular,
        feedback_gain,
        injection_map,
        u1: steering.u1.clone(),
        steering: Some(steering),
        value,
        pivot_rule: report.pivot_rule,
        rank_tol: tol.rank,
    })
}

/// Node-wise sum of two grids, including slopes when both have them.
pub fn sum_grids(a: &MatrixGrid, b: &MatrixGrid) -> MatrixGrid {
    let values = a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect();
    let mut out = MatrixGrid::from_values(a.grid, values);
    if let (Some(sa), Some(sb)) = (&a.slopes, &b.slopes) {
        out.slopes = Some(sa.iter().zip(sb).map(|(x, y)| x + y).collect());
    }
    out
}

/// Forward RK4 of `x' = A x + B u(t, x)` on the problem grid.
pub fn simulate_with(
    p: &LqProblem,
    tol: &Tolerances,
    mut control: impl FnMut(f64, &Vector) -> Result<Vector>,
) -> Result<SimulationTrace> {
    let grid = p.grid;
    let h = grid.step();
    let drift = |t: f64, x: &Vector, u: &Vector| {
        let c = p.coefficients(t);
        &c.a * x + &c.b * u
    };
    let mut states = Vec::with_capacity(grid.len());
    let mut controls = Vec::with_capacity(grid.len());
    let mut x = p.x0.clone();
    for k in 0..grid.n_steps {
        let t = grid.time(k);
        let tm = t + 0.5 * h;
        let u = control(t, &x)?;
        let k1 = drift(t, &x, &u);
        let x2 = &x + &k1 * (0.5 * h);
        let k2 = drift(tm, &x2, &control(tm, &x2)?);
        let x3 = &x + &k2 * (0.5 * h);
        let k3 = drift(tm, &x3, &control(tm, &x3)?);
        let x4 = &x + &k3 * h;
        let k4 = drift(t + h, &x4, &control(t + h, &x4)?);
        states.push(x.clone());
        controls.push(u);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !x.iter().all(|v| v.is_finite() && v.abs() <= tol.escape_bound) {
            return Err(Error::FiniteEscape {
                t: grid.time(k + 1),
                bound: tol.escape_bound,
            });
        }
    }
    controls.push(control(grid.t_final, &x)?);
    states.push(x);
    let mut trace = SimulationTrace {
        times: grid.times(),
        states,
        controls,
        noise_increments: None,
        realized_cost: 0.0,
    };
    trace.realized_cost = evaluate_cost(p, &trace)?;
    Ok(trace)
}

pub fn simulate(p: &LqProblem, c: &Controller, tol: &Tolerances) -> Result<SimulationTrace> {
    simulate_with(p, tol, |t, x| c.control(p, t, x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    /// `max ||R u + B' p||` with `p = (P + P1) x`.
    pub stationarity: f64,
    /// `max ||p' + A' p + Q x||` by fourth-order differences of `p`.
    pub adjoint: f64,
    /// `||p(T) - H x(T)||`.
    pub terminal_costate: f64,
    /// `||P1(T) x(T)||`.
    pub terminal_constraint: f64,
    pub realized_cost: f64,
    /// `x0' (P + P1)(t0) x0`.
    pub predicted_cost: f64,
    pub cost_gap: f64,
}

impl VerificationReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.stationarity,
            self.adjoint,
            self.terminal_costate,
            self.terminal_constraint,
            self.cost_gap,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "stationarity": self.stationarity,
            "adjoint": self.adjoint,
            "terminal_costate": self.terminal_costate,
            "terminal_constraint": self.terminal_constraint,
            "realized_cost": self.realized_cost,
            "predicted_cost": self.predicted_cost,
            "cost_gap": self.cost_gap,
        })
    }
}

/// Residuals of the state-costate optimality system along a trace, with the
/// costate reconstructed as `p = (P + P1) x`.
pub fn verify_optimality(
    p: &LqProblem,
    trace: &SimulationTrace,
    pgrid: &MatrixGrid,
    p1: &MatrixGrid,
) -> Result<VerificationReport> {
    let realized_cost = evaluate_cost(p, trace)?;
    let n = p.grid.n_steps;
    let h = p.grid.step();
    let costate: Vec<Vector> = (0..=n)
        .map(|k| (pgrid.node(k) + p1.node(k)) * &trace.states[k])
        .collect();
    let mut stationarity: f64 = 0.0;
    for k in 0..=n {
        let c = p.coefficients_at_node(k);
        let r = &c.r * &trace.controls[k] + c.b.transpose() * &costate[k];
        stationarity = stationarity.max(r.norm());
    }
    let mut adjoint: f64 = 0.0;
    for k in 2..n.saturating_sub(1) {
        let c = p.coefficients_at_node(k);
        let dp = (&costate[k - 2] - &costate[k - 1] * 8.0 + &costate[k + 1] * 8.0
            - &costate[k + 2])
            / (12.0 * h);
        let r = dp + c.a.transpose() * &costate[k] + &c.q * &trace.states[k];
        adjoint = adjoint.max(r.norm());
    }
    let x_t = trace.terminal_state();
    let terminal_costate = (&costate[n] - &p.h * x_t).norm();
    let terminal_constraint = (p1.last() * x_t).norm();
    let predicted_cost = p.x0.dot(&((pgrid.first() + p1.first()) * &p.x0));
    Ok(VerificationReport {
        stationarity,
        adjoint,
        terminal_costate,
        terminal_constraint,
        realized_cost,
        predicted_cost,
        cost_gap: (realized_cost - predicted_cost).abs(),
    })
}

/// Every intermediate product of the deterministic pipeline.
#[derive(Debug, Clone)]
pub struct Solution {
    pub p: MatrixGrid,
    pub report: RegularityReport,
    pub selection: TerminalSelection,
    pub p1: MatrixGrid,
    pub pbar: MatrixGrid,
    pub controller: Controller,
    pub trace: SimulationTrace,
    pub verification: VerificationReport,
}

/// Riccati, classification, terminal selection, synthesis, simulation and
/// verification in one call.
pub fn solve(p: &LqProblem, tol: &Tolerances) -> Result<Solution> {
    let pgrid = integrate_p(p, tol)?;
    let report = classify(p, &pgrid, tol)?;
    let selection = select_p1_terminal(p, &report, tol)?;
    solve_with_terminal(p, pgrid, report, selection, tol)
}

/// Pipeline from a given terminal modification.
pub fn solve_with_terminal(
    p: &LqProblem,
    pgrid: MatrixGrid,
    report: RegularityReport,
    selection: TerminalSelection,
    tol: &Tolerances,
) -> Result<Solution> {
    let p1 = integrate_p1(p, &pgrid, &selection.p1_t, tol)?;
    let pbar = integrate_pbar(p, &selection.p1_t, tol)?;
    let controller = synthesize(p, &pgrid, &p1, &report, tol)?;
    let trace = simulate(p, &controller, tol)?;
    let verification = verify_optimality(p, &trace, &pgrid, &p1)?;
    Ok(Solution {
        p: pgrid,
        report,
        selection,
        p1,
        pbar,
        controller,
        trace,
        verification,
    })
}
