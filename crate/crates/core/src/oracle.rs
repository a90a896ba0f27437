//! Independent reference solvers: the epsilon-perturbed regular problem and
//! a direct minimization of the time-discretized cost.

use serde_json::{json, Value};

use crate::det_synth::simulate_with;
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, pinv, pinv_symmetric, symmetrize, Mat, Vector};
use crate::problem::{CoefficientFn, LqProblem, TimeGrid};
use crate::riccati::integrate_p;
use crate::Tolerances;

/// Largest number of stacked control unknowns the quadratic oracle accepts.
pub const QP_UNKNOWN_LIMIT: usize = 20_000;
/// Up to this many unknowns the stacked Hessian is formed and pseudo-inverted.
pub const QP_DENSE_LIMIT: usize = 600;
/// Cap on the refined grid used by the perturbation oracle.
pub const PERTURBATION_STEP_LIMIT: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMethod {
    Perturbation { eps: f64 },
    DiscretizedQuadratic { n_steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub optimal_cost: f64,
    /// Node times of `control_grid`.
    pub times: Vec<f64>,
    pub control_grid: Vec<Vector>,
    pub method: OracleMethod,
}

impl OracleResult {
    pub fn to_json(&self) -> Value {
        let method = match self.method {
            OracleMethod::Perturbation { eps } => json!({ "perturbation": { "eps": eps } }),
            OracleMethod::DiscretizedQuadratic { n_steps } => {
                json!({ "discretized_quadratic": { "n_steps": n_steps } })
            }
        };
        json!({
            "method": method,
            "optimal_cost": self.optimal_cost,
            "times": self.times,
            "controls": self
                .control_grid
                .iter()
                .map(|u| u.iter().copied().collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        })
    }
}

fn require_deterministic(p: &LqProblem) -> Result<()> {
    if p.is_stochastic() {
        return Err(Error::InvalidProblem(
            "oracles accept deterministic problems only".into(),
        ));
    }
    Ok(())
}

fn shifted(r: &CoefficientFn, eps: f64) -> CoefficientFn {
    let add = |m: &Mat| m + Mat::identity(m.nrows(), m.ncols()) * eps;
    match r {
        CoefficientFn::Constant(m) => CoefficientFn::Constant(add(m)),
        CoefficientFn::Sampled(v) => CoefficientFn::Sampled(v.iter().map(add).collect()),
    }
}

fn node_samples(c: &CoefficientFn) -> Vec<&Mat> {
    match c {
        CoefficientFn::Constant(m) => vec![m],
        CoefficientFn::Sampled(v) => v.iter().collect(),
    }
}

fn max_node_norm(c: &CoefficientFn) -> f64 {
    node_samples(c).iter().map(|m| m.norm()).fold(0.0, f64::max)
}

/// Regular problem with `R + eps I`, solved by the Riccati equation on a grid
/// refined until `h * ||B||^2 * (||H|| + T ||Q|| + 1) / lambda_min(R + eps I)`
/// is at most 1/4.
/// Returns `x0' P_eps(t0) x0` and the feedback control sampled at the
/// problem's nodes.
pub fn perturbation_solve(p: &LqProblem, eps: f64, tol: &Tolerances) -> Result<OracleResult> {
    require_deterministic(p)?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidProblem(format!("eps must be positive, got {eps}")));
    }
    let horizon = p.grid.t_final - p.grid.t0;
    let r_min = node_samples(&p.r)
        .iter()
        .map(|r| min_eigenvalue(r))
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    let stiffness = max_node_norm(&p.b).powi(2)
        * (p.h.norm() + horizon * max_node_norm(&p.q) + 1.0)
        / (r_min + eps);
    let factor = ((p.grid.step() * stiffness / 0.25).ceil() as usize).max(1);
    let steps = p.grid.n_steps.saturating_mul(factor);
    if steps > PERTURBATION_STEP_LIMIT {
        return Err(Error::TooLarge {
            unknowns: steps,
            limit: PERTURBATION_STEP_LIMIT,
        });
    }
    let mut fine = p.with_grid(p.grid.refined(factor))?;
    fine.r = shifted(&fine.r, eps);
    let pgrid = integrate_p(&fine, tol)?;
    let trace = simulate_with(&fine, tol, |t, x| {
        let c = fine.coefficients(t);
        let gain = pinv(&c.r, tol.rank)? * c.b.transpose() * pgrid.at(t);
        Ok(-(gain * x))
    })?;
    let control_grid = (0..p.grid.len())
        .map(|k| trace.controls[k * factor].clone())
        .collect();
    Ok(OracleResult {
        optimal_cost: p.x0.dot(&(pgrid.first() * &p.x0)),
        times: p.grid.times(),
        control_grid,
        method: OracleMethod::Perturbation { eps },
    })
}

/// Exact zero-order-hold step with coefficients frozen at the midpoint:
/// `x+ = Phi x + Gam u` and the stage cost `[x; u]' M [x; u]`.
struct Stage {
    phi: Mat,
    gam: Mat,
    cost: Mat,
}

fn stage(p: &LqProblem, t_mid: f64, h: f64) -> Stage {
    let (n, m) = (p.n(), p.m());
    let c = p.coefficients(t_mid);
    let d = n + m;
    let mut f = Mat::zeros(d, d);
    f.view_mut((0, 0), (n, n)).copy_from(&c.a);
    f.view_mut((0, n), (n, m)).copy_from(&c.b);
    let mut w = Mat::zeros(d, d);
    w.view_mut((0, 0), (n, n)).copy_from(&c.q);
    w.view_mut((n, n), (m, m)).copy_from(&c.r);
    // exp([[-F', W], [0, F]] h) = [[., G12], [0, G22]] with
    // G22 = exp(F h) and G22' G12 = ∫_0^h exp(F s)' W exp(F s) ds.
    let mut big = Mat::zeros(2 * d, 2 * d);
    big.view_mut((0, 0), (d, d)).copy_from(&(-f.transpose()));
    big.view_mut((0, d), (d, d)).copy_from(&w);
    big.view_mut((d, d), (d, d)).copy_from(&f);
    let e = (big * h).exp();
    let g12 = e.view((0, d), (d, d)).into_owned();
    let g22 = e.view((d, d), (d, d)).into_owned();
    Stage {
        phi: g22.view((0, 0), (n, n)).into_owned(),
        gam: g22.view((0, n), (n, m)).into_owned(),
        cost: symmetrize(&(g22.transpose() * g12)),
    }
}

/// Minimize the exactly discretized cost over piecewise-constant controls
/// on `n_steps` uniform steps.
pub fn discretized_qp_solve(
    p: &LqProblem,
    n_steps: usize,
    tol: &Tolerances,
) -> Result<OracleResult> {
    require_deterministic(p)?;
    let unknowns = p.m().saturating_mul(n_steps);
    if unknowns > QP_UNKNOWN_LIMIT {
        return Err(Error::TooLarge {
            unknowns,
            limit: QP_UNKNOWN_LIMIT,
        });
    }
    let grid = TimeGrid::new(p.grid.t0, p.grid.t_final, n_steps)?;
    let h = grid.step();
    let stages: Vec<Stage> = (0..n_steps)
        .map(|k| stage(p, grid.time(k) + 0.5 * h, h))
        .collect();
    let controls = if unknowns <= QP_DENSE_LIMIT {
        dense_minimizer(p, &stages, tol)?
    } else {
        stagewise_minimizer(p, &stages, tol)?
    };
    let optimal_cost = discrete_cost(p, &stages, &controls);
    let mut control_grid = controls;
    if let Some(last) = control_grid.last().cloned() {
        control_grid.push(last);
    }
    Ok(OracleResult {
        optimal_cost,
        times: grid.times(),
        control_grid,
        method: OracleMethod::DiscretizedQuadratic { n_steps },
    })
}

fn discrete_cost(p: &LqProblem, stages: &[Stage], controls: &[Vector]) -> f64 {
    let n = p.n();
    let mut x = p.x0.clone();
    let mut cost = 0.0;
    for (s, u) in stages.iter().zip(controls) {
        let mut z = Vector::zeros(n + u.len());
        z.rows_mut(0, n).copy_from(&x);
        z.rows_mut(n, u.len()).copy_from(u);
        cost += z.dot(&(&s.cost * &z));
        x = &s.phi * &x + &s.gam * u;
    }
    cost + x.dot(&(&p.h * &x))
}

/// Stack all controls, form the Hessian and linear term, and take the
/// minimal-norm minimizer `U = -Hess^+ g`.
fn dense_minimizer(p: &LqProblem, stages: &[Stage], tol: &Tolerances) -> Result<Vec<Vector>> {
    let (n, m) = (p.n(), p.m());
    let big_n = stages.len();
    let dim = m * big_n;
    let mut hess = Mat::zeros(dim, dim);
    let mut lin = Vector::zeros(dim);
    // x_k = sx x0 + su U
    let mut sx = Mat::identity(n, n);
    let mut su = Mat::zeros(n, dim);
    for (k, s) in stages.iter().enumerate() {
        let mut zx = Mat::zeros(n + m, n);
        zx.view_mut((0, 0), (n, n)).copy_from(&sx);
        let mut zu = Mat::zeros(n + m, dim);
        zu.view_mut((0, 0), (n, dim)).copy_from(&su);
        for j in 0..m {
            zu[(n + j, k * m + j)] = 1.0;
        }
        hess += zu.transpose() * &s.cost * &zu;
        lin += zu.transpose() * (&s.cost * (&zx * &p.x0));
        su = &s.phi * su;
        su.columns_mut(k * m, m).copy_from(&s.gam);
        sx = &s.phi * sx;
    }
    hess += su.transpose() * &p.h * &su;
    lin += su.transpose() * (&p.h * (&sx * &p.x0));
    let u = -(pinv_symmetric(&symmetrize(&hess), tol.rank) * lin);
    Ok((0..big_n).map(|k| u.rows(k * m, m).into_owned()).collect())
}

/// Eliminate the stacked unknowns one stage at a time from the end: with
/// value `x' V x` after stage `k`, the stage quadratic
/// `[x; u]' (M + [Phi Gam]' V [Phi Gam]) [x; u]` is minimized over `u`.
fn stagewise_minimizer(
    p: &LqProblem,
    stages: &[Stage],
    tol: &Tolerances,
) -> Result<Vec<Vector>> {
    let (n, m) = (p.n(), p.m());
    let mut v = p.h.clone();
    let mut gains = Vec::with_capacity(stages.len());
    for s in stages.iter().rev() {
        let mut pg = Mat::zeros(n, n + m);
        pg.view_mut((0, 0), (n, n)).copy_from(&s.phi);
        pg.view_mut((0, n), (n, m)).copy_from(&s.gam);
        let full = symmetrize(&(&s.cost + pg.transpose() * &v * &pg));
        let sxx = full.view((0, 0), (n, n));
        let sux = full.view((n, 0), (m, n)).into_owned();
        let suu = full.view((n, n), (m, m)).into_owned();
        let gain = pinv_symmetric(&suu, tol.rank) * &sux;
        v = symmetrize(&(sxx - sux.transpose() * &gain));
        gains.push(gain);
    }
    gains.reverse();
    let mut x = p.x0.clone();
    let mut controls = Vec::with_capacity(stages.len());
    for (s, k) in stages.iter().zip(&gains) {
        let u = -(k * &x);
        x = &s.phi * &x + &s.gam * &u;
        controls.push(u);
    }
    Ok(controls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn stage_matches_scalar_closed_form() {
        // x' = a x + b u, cost q x^2 + r u^2.
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let (a, b, q, r) = (0.7, 1.3, 2.0, 0.5);
        let p = LqProblem::deterministic(
            grid,
            Vector::from_element(1, 1.0),
            Mat::from_element(1, 1, a),
            Mat::from_element(1, 1, b),
            Mat::from_element(1, 1, q),
            Mat::from_element(1, 1, r),
            Mat::zeros(1, 1),
        );
        let h = 0.1;
        let s = stage(&p, 0.05, h);
        let e = (a * h).exp();
        assert!((s.phi[(0, 0)] - e).abs() < 1e-14);
        assert!((s.gam[(0, 0)] - b * (e - 1.0) / a).abs() < 1e-14);
        // ∫ x(s)^2 with x(0)=1, u=0: (e^{2ah} - 1)/(2a).
        let xx = q * ((2.0 * a * h).exp() - 1.0) / (2.0 * a);
        assert!((s.cost[(0, 0)] - xx).abs() < 1e-13);
        // Pure control cost r h.
        let uu_x0 = s.cost[(1, 1)];
        let g = |t: f64| b * ((a * t).exp() - 1.0) / a;
        // ∫ q g(s)^2 ds + r h by fine Simpson.
        let nq = 2000;
        let hq = h / nq as f64;
        let mut integral = 0.0;
        for i in 0..=nq {
            let w = if i == 0 || i == nq { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += w * q * g(i as f64 * hq).powi(2);
        }
        integral *= hq / 3.0;
        assert!((uu_x0 - (integral + r * h)).abs() < 1e-12);
    }

    #[test]
    fn dense_and_stagewise_routes_agree() {
        for seed in 0..3 {
            let p = fixtures::random_irregular(3, 2, 1, seed);
            let p = p.with_grid(p.grid.refined(1)).unwrap();
            let grid = TimeGrid::new(p.grid.t0, p.grid.t_final, 60).unwrap();
            let h = grid.step();
            let stages: Vec<Stage> = (0..60).map(|k| stage(&p, grid.time(k) + 0.5 * h, h)).collect();
            let a = discrete_cost(&p, &stages, &dense_minimizer(&p, &stages, &tol()).unwrap());
            let b = discrete_cost(&p, &stages, &stagewise_minimizer(&p, &stages, &tol()).unwrap());
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} {b}");
        }
    }

    #[test]
    fn zero_weights_cost_nothing() {
        let mut p = fixtures::random_regular(2, 1, 3);
        p.q = CoefficientFn::Constant(Mat::zeros(2, 2));
        p.h = Mat::zeros(2, 2);
        for steps in [50, 1000] {
            let o = discretized_qp_solve(&p, steps, &tol()).unwrap();
            assert!(o.optimal_cost.abs() < 1e-14);
            assert!(o.control_grid.iter().all(|u| u.norm() < 1e-12));
        }
    }

    #[test]
    fn scalar_lqr_matches_riccati_value() {
        let p = fixtures::random_regular(1, 1, 8);
        let exact = {
            let fine = p.with_grid(p.grid.refined(5)).unwrap();
            let pg = integrate_p(&fine, &tol()).unwrap();
            p.x0.dot(&(pg.first() * &p.x0))
        };
        let coarse = discretized_qp_solve(&p, 100, &tol()).unwrap().optimal_cost;
        let fine = discretized_qp_solve(&p, 200, &tol()).unwrap().optimal_cost;
        assert!(coarse >= exact - 1e-10 && fine >= exact - 1e-10);
        assert!((fine - exact) < (coarse - exact));
        assert!((fine - exact) < 1e-2 * exact.abs().max(1.0));
    }

    #[test]
    fn singular_example_cost_vanishes() {
        let p = fixtures::singular_example(100);
        let costs: Vec<f64> = [200, 2000]
            .iter()
            .map(|&n| discretized_qp_solve(&p, n, &tol()).unwrap().optimal_cost)
            .collect();
        // Exact discretization reaches the origin with the free channel.
        assert!(costs.iter().all(|&c| c.abs() < 1e-12), "{costs:?}");
        let pert: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&e| perturbation_solve(&p, e, &tol()).unwrap().optimal_cost)
            .collect();
        assert!(pert[0] > pert[1] && pert[1] > pert[2], "{pert:?}");
    }

    #[test]
    fn perturbation_is_continuous_on_regular_problems() {
        let p = fixtures::random_regular(3, 2, 5);
        let base = integrate_p(&p, &tol()).unwrap();
        let j0 = p.x0.dot(&(base.first() * &p.x0));
        let o = perturbation_solve(&p, 1e-4, &tol()).unwrap();
        assert!((o.optimal_cost - j0).abs() < 1e-3 * j0.abs().max(1.0));
        assert_eq!(o.control_grid.len(), p.grid.len());
    }

    #[test]
    fn guards() {
        let p = fixtures::singular_example(10);
        assert!(matches!(
            discretized_qp_solve(&p, 20_000, &tol()),
            Err(Error::TooLarge { .. })
        ));
        assert!(perturbation_solve(&p, 0.0, &tol()).is_err());
        let s = fixtures::regular_stochastic_scalar(10);
        assert!(matches!(
            discretized_qp_solve(&s, 10, &tol()),
            Err(Error::InvalidProblem(_))
        ));
    }
}
