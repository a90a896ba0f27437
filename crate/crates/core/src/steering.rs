//! Minimum-energy open-loop steering onto a terminal subspace.
//!
//! Given closed-loop dynamics `x' = Acl x + Bs u1`, find the `u1` of least
//! `L2` norm with `P1(T) x(T) = 0`. With `Phi = Phi(T, .)` and the Gramian
//! `W = ∫ Phi Bs Bs' Phi' ds`, the answer is
//! `u1(s) = -Bs(s)' Phi(T,s)' P1(T)' lambda` where
//! `lambda = [P1(T) W P1(T)']^+ P1(T) Phi(T,t0) x0`.

use crate::error::{Error, Result};
use crate::linalg::{pinv, symmetrize, Mat, Vector};
use crate::problem::TimeGrid;
use crate::riccati::{transition_matrix, MatrixGrid};
use crate::Tolerances;

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringSolution {
    pub gramian: Mat,
    pub multiplier: Vector,
    /// `||(I - M M^+) y||` with `M = P1 W P1'` and `y = P1 Phi(T,t0) x0`.
    pub feasibility_residual: f64,
    pub phi: MatrixGrid,
    /// `P1(T)' lambda`; `u1(s) = -Bs(s)' Phi(T,s)' direction`.
    pub direction: Vector,
    /// Steering input at every node.
    pub u1: Vec<Vector>,
}

impl SteeringSolution {
    /// Steering input at time `t` given the steering map there.
    pub fn u1_at(&self, t: f64, bs: &Mat) -> Vector {
        -(bs.transpose() * (self.phi.at(t).transpose() * &self.direction))
    }

    /// `∫ ||u1||^2 dt` by Simpson's rule on the grid.
    pub fn energy(&self) -> f64 {
        let sq: Vec<Mat> = self
            .u1
            .iter()
            .map(|u| Mat::from_element(1, 1, u.norm_squared()))
            .collect();
        simpson(&sq, self.phi.grid.step())[(0, 0)]
    }
}

/// Composite Simpson rule on uniformly spaced samples, closing with the
/// three-eighths rule when the interval count is odd.
pub fn simpson(samples: &[Mat], h: f64) -> Mat {
    let n = samples.len() - 1;
    let shape = samples[0].shape();
    let mut out = Mat::zeros(shape.0, shape.1);
    if n == 0 {
        return out;
    }
    if n == 1 {
        return (&samples[0] + &samples[1]) * (0.5 * h);
    }
    let even_end = if n.is_multiple_of(2) { n } else { n - 3 };
    for k in (0..even_end).step_by(2) {
        out += (&samples[k] + &samples[k + 1] * 4.0 + &samples[k + 2]) * (h / 3.0);
    }
    if n % 2 == 1 {
        let k = n - 3;
        out += (&samples[k] + &samples[k + 1] * 3.0 + &samples[k + 2] * 3.0 + &samples[k + 3])
            * (3.0 * h / 8.0);
    }
    out
}

/// `bs` holds the steering map at each node (`n x k`, possibly `k = 0`).
pub fn min_energy_steering(
    grid: TimeGrid,
    p1_t: &Mat,
    acl: impl Fn(f64) -> Mat,
    bs: &MatrixGrid,
    x0: &Vector,
    tol: &Tolerances,
) -> Result<SteeringSolution> {
    let phi = transition_matrix(acl, grid, tol.escape_bound)?;
    let integrand: Vec<Mat> = (0..grid.len())
        .map(|k| {
            let pb = phi.node(k) * bs.node(k);
            &pb * pb.transpose()
        })
        .collect();
    let gramian = symmetrize(&simpson(&integrand, grid.step()));
    let m = symmetrize(&(p1_t * &gramian * p1_t.transpose()));
    let y = p1_t * (phi.first() * x0);
    let m_pinv = pinv(&m, tol.rank)?;
    let multiplier = &m_pinv * &y;
    let feasibility_residual = (&y - &m * &multiplier).norm();
    if feasibility_residual > tol.residual * y.norm().max(1.0) {
        return Err(Error::TerminalUnreachable {
            residual: feasibility_residual,
        });
    }
    let direction = p1_t.transpose() * &multiplier;
    let u1 = (0..grid.len())
        .map(|k| -(bs.node(k).transpose() * (phi.node(k).transpose() * &direction)))
        .collect();
    Ok(SteeringSolution {
        gramian,
        multiplier,
        feasibility_residual,
        phi,
        direction,
        u1,
    })
}
