//! Backward integration of the Riccati equations and the state-transition
//! matrix.
//!
//! All integrators are fixed-step classic RK4 on the problem grid. Each
//! integrated grid also stores the right-hand side at every node so that
//! later integrators can evaluate it between nodes by cubic Hermite
//! interpolation without losing fourth-order accuracy.

use crate::error::{Error, Result};
use crate::linalg::{max_abs, pinv, rank_of, symmetrize, Mat};
use crate::problem::{Coefficients, LqProblem, TimeGrid};
use crate::regularity::{denotations, Denotations};
use crate::Tolerances;

/// Matrix-valued function sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGrid {
    pub grid: TimeGrid,
    pub values: Vec<Mat>,
    /// Time derivative at each node, when the grid came from an integrator.
    pub slopes: Option<Vec<Mat>>,
    /// Simpson-rule defect of the ODE over each step, divided by the step.
    pub step_residuals: Vec<f64>,
    /// Times at which a pseudoinverse inside the right-hand side changed
    /// rank between consecutive nodes.
    pub discontinuities: Vec<f64>,
}

impl MatrixGrid {
    pub fn from_values(grid: TimeGrid, values: Vec<Mat>) -> Self {
        assert_eq!(values.len(), grid.len(), "one value per grid node");
        MatrixGrid {
            grid,
            values,
            slopes: None,
            step_residuals: Vec::new(),
            discontinuities: Vec::new(),
        }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> Mat) -> Self {
        Self::from_values(grid, grid.times().into_iter().map(f).collect())
    }

    pub fn constant(grid: TimeGrid, m: Mat) -> Self {
        Self::from_values(grid, vec![m; grid.len()])
    }

    pub fn node(&self, k: usize) -> &Mat {
        &self.values[k]
    }

    pub fn first(&self) -> &Mat {
        &self.values[0]
    }

    pub fn last(&self) -> &Mat {
        self.values.last().expect("grid has nodes")
    }

    /// Value at an arbitrary time: cubic Hermite when slopes are known,
    /// four-point Lagrange otherwise.
    pub fn at(&self, t: f64) -> Mat {
        let (k, theta) = self.grid.locate(t);
        if theta == 0.0 {
            return self.values[k].clone();
        }
        if theta == 1.0 {
            return self.values[k + 1].clone();
        }
        let h = self.grid.step();
        match &self.slopes {
            Some(slopes) => {
                let t2 = theta * theta;
                let t3 = t2 * theta;
                let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
                let h10 = t3 - 2.0 * t2 + theta;
                let h01 = -2.0 * t3 + 3.0 * t2;
                let h11 = t3 - t2;
                &self.values[k] * h00
                    + &slopes[k] * (h10 * h)
                    + &self.values[k + 1] * h01
                    + &slopes[k + 1] * (h11 * h)
            }
            None => {
                let last = self.grid.n_steps;
                let start = k.saturating_sub(1).min(last.saturating_sub(3));
                let s = (k - start) as f64 + theta;
                let mut out = Mat::zeros(self.values[k].nrows(), self.values[k].ncols());
                for i in 0..4 {
                    let mut w = 1.0;
                    for j in 0..4 {
                        if i != j {
                            w *= (s - j as f64) / (i as f64 - j as f64);
                        }
                    }
                    out += &self.values[start + i] * w;
                }
                out
            }
        }
    }

    /// `max_k ||self_k - other_k||_F` over aligned grids.
    pub fn max_distance(&self, other: &MatrixGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(max_abs).fold(0.0, f64::max)
    }

    pub fn max_step_residual(&self) -> f64 {
        self.step_residuals.iter().copied().fold(0.0, f64::max)
    }

    /// CSV with header `t,{name}_00,{name}_01,...` (row-major entries).
    pub fn to_csv(&self, name: &str) -> String {
        let (r, c) = self.values[0].shape();
        let mut out = String::from("t");
        for i in 0..r {
            for j in 0..c {
                out.push_str(&format!(",{name}_{i}{j}"));
            }
        }
        out.push('\n');
        for (k, m) in self.values.iter().enumerate() {
            out.push_str(&self.grid.time(k).to_string());
            for i in 0..r {
                for j in 0..c {
                    out.push_str(&format!(",{}", m[(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn escape_check(y: &Mat, t: f64, bound: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) && max_abs(y) <= bound {
        Ok(())
    } else {
        Err(Error::FiniteEscape { t, bound })
    }
}

/// Integrate `dY/dt = f(t, Y)` backward from `Y(T) = terminal`.
pub fn integrate_backward<F>(
    grid: TimeGrid,
    terminal: Mat,
    symmetric: bool,
    escape_bound: f64,
    mut f: F,
) -> Result<MatrixGrid>
where
    F: FnMut(f64, &Mat) -> Result<Mat>,
{
    let n = grid.n_steps;
    let h = grid.step();
    let mut eval = |t: f64, y: &Mat| -> Result<Mat> {
        escape_check(y, t, escape_bound)?;
        match f(t, y) {
            Err(Error::InvalidMatrix(_)) => Err(Error::FiniteEscape {
                t,
                bound: escape_bound,
            }),
            other => other,
        }
    };

    let mut values = vec![Mat::zeros(0, 0); n + 1];
    let mut slopes = vec![Mat::zeros(0, 0); n + 1];
    let mut residuals = vec![0.0; n];
    let terminal = if symmetric {
        symmetrize(&terminal)
    } else {
        terminal
    };
    slopes[n] = eval(grid.time(n), &terminal)?;
    values[n] = terminal;

    for k in (0..n).rev() {
        let t = grid.time(k + 1);
        let tm = t - 0.5 * h;
        let y = values[k + 1].clone();
        let k1 = slopes[k + 1].clone();
        let y = &y;
        let k1 = &k1;
        let k2 = eval(tm, &(y - k1 * (0.5 * h)))?;
        let k3 = eval(tm, &(y - &k2 * (0.5 * h)))?;
        let k4 = eval(grid.time(k), &(y - &k3 * h))?;
        let mut next = y - (k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        if symmetric {
            next = symmetrize(&next);
        }
        escape_check(&next, grid.time(k), escape_bound)?;
        let f_next = eval(grid.time(k), &next)?;

        // Simpson defect using the Hermite midpoint.
        let mid = (&next + y) * 0.5 + (&f_next - k1) * (h / 8.0);
        let fm = eval(tm, &mid)?;
        let defect = (y - &next) - (&f_next + &fm * 4.0 + k1) * (h / 6.0);
        residuals[k] = defect.norm() / h;
        slopes[k] = f_next;
        values[k] = next;
    }

    Ok(MatrixGrid {
        grid,
        values,
        slopes: Some(slopes),
        step_residuals: residuals,
        discontinuities: Vec::new(),
    })
}

/// Right-hand side of the generalized Riccati equation
/// `dP/dt = -[A'P + Abar'P Abar + PA + Q - Gamma0' Upsilon0^+ Gamma0]`.
/// Without diffusion terms this is the classical equation with `R^+`.
pub fn riccati_rhs(c: &Coefficients, p: &Mat, rank_tol: f64) -> Result<Mat> {
    let upsilon = symmetrize(&(&c.r + c.bbar.transpose() * p * &c.bbar));
    let gamma = c.b.transpose() * p + c.bbar.transpose() * p * &c.abar;
    let up = pinv(&upsilon, rank_tol)?;
    let at_p = c.a.transpose() * p;
    Ok(-(&at_p + at_p.transpose() + c.abar.transpose() * p * &c.abar + &c.q
        - gamma.transpose() * up * gamma))
}

pub fn integrate_p(p: &LqProblem, tol: &Tolerances) -> Result<MatrixGrid> {
    integrate_riccati_from(p, p.h.clone(), tol)
}

/// Same equation as [`integrate_p`] with terminal value `H + P1(T)`.
pub fn integrate_pbar(p: &LqProblem, p1_t: &Mat, tol: &Tolerances) -> Result<MatrixGrid> {
    integrate_riccati_from(p, &p.h + p1_t, tol)
}

fn integrate_riccati_from(p: &LqProblem, terminal: Mat, tol: &Tolerances) -> Result<MatrixGrid> {
    integrate_backward(p.grid, terminal, true, tol.escape_bound, |t, y| {
        riccati_rhs(&p.coefficients(t), y, tol.rank)
    })
}

/// `dP1/dt = -[P1 A0 + A0' P1 + P1 D0 P1]`.
pub fn p1_rhs_deterministic(den: &Denotations, p1: &Mat) -> Mat {
    let pa = p1 * &den.a0;
    -(&pa + pa.transpose() + p1 * &den.d0 * p1)
}

/// Stochastic form: adds `(Abar0' + P1 F0)(I - P1 Fbar0)^+ P1 (Abar0 + Dbar0 P1)`
/// inside the bracket.
pub fn p1_rhs_stochastic(den: &Denotations, p1: &Mat, rank_tol: f64) -> Result<Mat> {
    let n = p1.nrows();
    let inv = pinv(&(Mat::identity(n, n) - p1 * &den.fbar0), rank_tol)?;
    let left = den.abar0.transpose() + p1 * &den.f0;
    let right = p1 * (&den.abar0 + &den.dbar0 * p1);
    Ok(p1_rhs_deterministic(den, p1) - left * inv * right)
}

/// Integrate the terminal-modification equation backward from `P1(T)`,
/// re-evaluating the denotations from `P` at every stage time.
pub fn integrate_p1(
    p: &LqProblem,
    pgrid: &MatrixGrid,
    p1_t: &Mat,
    tol: &Tolerances,
) -> Result<MatrixGrid> {
    let stochastic = p.is_stochastic();
    let mut out = integrate_backward(p.grid, p1_t.clone(), true, tol.escape_bound, |t, y| {
        let den = denotations(&p.coefficients(t), &pgrid.at(t), tol.rank)?;
        if stochastic {
            p1_rhs_stochastic(&den, y, tol.rank)
        } else {
            Ok(p1_rhs_deterministic(&den, y))
        }
    })?;
    if stochastic {
        let n = p.n();
        let mut prev = None;
        for k in 0..p.grid.len() {
            let den = denotations(&p.coefficients_at_node(k), pgrid.node(k), tol.rank)?;
            let rank = rank_of(
                &(Mat::identity(n, n) - out.node(k) * &den.fbar0),
                tol.rank,
            );
            if prev.is_some_and(|r| r != rank) {
                out.discontinuities.push(p.grid.time(k));
            }
            prev = Some(rank);
        }
    }
    Ok(out)
}

/// `max_t ||Pbar(t) - P(t) - P1(t)||_F`.
pub fn check_pbar_identity(p: &MatrixGrid, p1: &MatrixGrid, pbar: &MatrixGrid) -> f64 {
    p.values
        .iter()
        .zip(&p1.values)
        .zip(&pbar.values)
        .map(|((a, b), c)| (c - a - b).norm())
        .fold(0.0, f64::max)
}

/// `Phi(T, t)` at every node, from `d Phi(T,t)/dt = -Phi(T,t) Acl(t)`,
/// `Phi(T,T) = I`.
pub fn transition_matrix(
    acl: impl Fn(f64) -> Mat,
    grid: TimeGrid,
    escape_bound: f64,
) -> Result<MatrixGrid> {
    let n = acl(grid.t_final).nrows();
    integrate_backward(grid, Mat::identity(n, n), false, escape_bound, |t, phi| {
        Ok(-(phi * acl(t)))
    })
}
