//! Pseudoinverse and range algebra.
//!
//! Every regularity test and controller formula in this crate reduces to a
//! handful of operations on possibly rank-deficient matrices: the
//! Moore-Penrose inverse, numerical rank, range inclusion, and the row
//! transform that exposes the free (unpenalized) control directions of a
//! singular weight. Numerical rank is always relative: singular values at
//! or below `tol * sigma_max` count as zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value cutoff used when no tolerance is supplied.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

fn ensure_finite(m: &Mat) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidMatrix(format!(
            "{}x{} matrix has non-finite entries",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// Singular triplets `(sigma, u, v)` with `sigma > 0`, from the symmetric
/// eigendecomposition of `[[0, M], [M', 0]]`, whose positive eigenvalues are
/// the singular values with eigenvectors `(u, v) / sqrt(2)`. nalgebra's
/// bidiagonal SVD loses accuracy on some rank-deficient inputs; the
/// symmetric solver does not.
fn singular_triplets(m: &Mat) -> Vec<(f64, Vector, Vector)> {
    let (r, c) = m.shape();
    let mut aug = Mat::zeros(r + c, r + c);
    aug.view_mut((0, r), (r, c)).copy_from(m);
    aug.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let eig = aug.symmetric_eigen();
    let scale = std::f64::consts::SQRT_2;
    let mut out: Vec<_> = (0..r + c)
        .filter(|&i| eig.eigenvalues[i] > 0.0)
        .map(|i| {
            let v = eig.eigenvectors.column(i);
            (
                eig.eigenvalues[i],
                v.rows(0, r) * scale,
                v.rows(r, c) * scale,
            )
        })
        .collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

/// Singular values in decreasing order, zeros omitted.
pub fn singular_values(m: &Mat) -> Vec<f64> {
    singular_triplets(m).into_iter().map(|t| t.0).collect()
}

/// Moore-Penrose inverse.
pub fn pinv(m: &Mat, tol: f64) -> Result<Mat> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    let mut out = Mat::zeros(cols, rows);
    if rows == 0 || cols == 0 {
        return Ok(out);
    }
    let triplets = singular_triplets(m);
    let Some(sigma_max) = triplets.first().map(|t| t.0) else {
        return Ok(out);
    };
    let cutoff = tol * sigma_max;
    for (s, u, v) in triplets.iter().filter(|t| t.0 > cutoff) {
        out += v * u.transpose() / *s;
    }
    Ok(out)
}

/// Pseudoinverse of a symmetric matrix through its eigendecomposition, with
/// eigenvalues at or below `tol * max |lambda|` in magnitude dropped.
pub fn pinv_symmetric(m: &Mat, tol: f64) -> Mat {
    let n = m.nrows();
    if n == 0 {
        return m.clone();
    }
    let eig = symmetrize(m).symmetric_eigen();
    let cutoff = tol * eig.eigenvalues.amax();
    let mut out = Mat::zeros(n, n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > cutoff {
            let v = eig.eigenvectors.column(i);
            out += v * v.transpose() / l;
        }
    }
    out
}

/// Number of singular values above `tol * sigma_max`; zero for the zero matrix.
pub fn rank_of(m: &Mat, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 || !m.iter().all(|v| v.is_finite()) {
        return 0;
    }
    let sv = singular_values(m);
    let Some(&sigma_max) = sv.first() else {
        return 0;
    };
    sv.iter().filter(|&&s| s > tol * sigma_max).count()
}

/// `||(I - B B^+) A||_F`, the part of `A` outside `Range(B)`.
pub fn range_residual(a: &Mat, b: &Mat, rank_tol: f64) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::InvalidMatrix(format!(
            "range test needs equal row counts, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let b_pinv = pinv(b, rank_tol)?;
    let outside = a - b * (b_pinv * a);
    Ok(outside.norm())
}

/// `Range(A) ⊆ Range(B)` up to `tol * max(1, ||A||_F)`.
pub fn range_subset(a: &Mat, b: &Mat, tol: f64) -> Result<bool> {
    let residual = range_residual(a, b, tol)?;
    Ok(residual <= tol * a.norm().max(1.0))
}

/// Orthonormal basis of the span of `vectors` (all of length `dim`).
fn orthonormal_basis(dim: usize, vectors: &[Vector]) -> Mat {
    if vectors.is_empty() {
        return Mat::zeros(dim, 0);
    }
    Mat::from_columns(vectors).qr().q()
}

fn retained(m: &Mat, rank_tol: f64) -> Result<Vec<(f64, Vector, Vector)>> {
    ensure_finite(m)?;
    let triplets = singular_triplets(m);
    let cutoff = triplets.first().map_or(0.0, |t| t.0) * rank_tol;
    Ok(triplets.into_iter().filter(|t| t.0 > cutoff).collect())
}

/// Orthogonal projector onto `Range(M)`, built from an orthonormal basis so
/// it stays idempotent however badly `M` is conditioned.
pub fn range_projector(m: &Mat, rank_tol: f64) -> Result<Mat> {
    let us: Vec<Vector> = retained(m, rank_tol)?.into_iter().map(|t| t.1).collect();
    let q = orthonormal_basis(m.nrows(), &us);
    Ok(&q * q.transpose())
}

/// Orthogonal projector onto `Ker(M)`, i.e. `I - M^+ M` up to rounding.
pub fn kernel_projector(m: &Mat, rank_tol: f64) -> Result<Mat> {
    let vs: Vec<Vector> = retained(m, rank_tol)?.into_iter().map(|t| t.2).collect();
    let q = orthonormal_basis(m.ncols(), &vs);
    Ok(Mat::identity(m.ncols(), m.ncols()) - &q * q.transpose())
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &Mat) -> f64 {
    (m - m.transpose()).norm()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Pivot selection used when reducing a projector to row-echelon form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PivotRule {
    /// Partial pivoting by largest absolute entry; ties go to the lowest row.
    #[default]
    LargestAbs,
    /// First row (lowest index) with a non-negligible entry.
    FirstNonzero,
}

/// Invertible row transform `T0` with `T0 * N = [0; Upsilon]` for a
/// projector `N`, where `Upsilon` has full row rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTransform {
    pub t0: Mat,
    pub t0_inv: Mat,
    /// Last `m - m0` rows of `T0 * N`.
    pub upsilon_t0: Mat,
    /// Rank of the weight whose null-space projector was reduced.
    pub m0: usize,
}

impl RowTransform {
    pub fn dim(&self) -> usize {
        self.t0.nrows()
    }

    /// Number of free control directions, `m - m0`.
    pub fn free_dim(&self) -> usize {
        self.dim() - self.m0
    }

    /// Trailing `m - m0` columns of `T0^{-1}`; the map `G0` from steering
    /// coordinates into control space.
    pub fn injection_block(&self) -> Mat {
        let m = self.dim();
        let k = self.free_dim();
        self.t0_inv.columns(m - k, k).into_owned()
    }

    /// Trailing `m - m0` columns of `X * T0^{-1}`.
    pub fn trailing_block(&self, x: &Mat) -> Mat {
        let m = self.dim();
        let k = self.free_dim();
        (x * &self.t0_inv).columns(m - k, k).into_owned()
    }
}

pub fn zero_row_transform(projector: &Mat, tol: f64) -> Result<RowTransform> {
    zero_row_transform_with(projector, tol, PivotRule::LargestAbs)
}

/// Gaussian elimination of `projector` to echelon form, followed by a row
/// permutation that moves the zero rows to the top.
pub fn zero_row_transform_with(
    projector: &Mat,
    tol: f64,
    rule: PivotRule,
) -> Result<RowTransform> {
    ensure_finite(projector)?;
    let m = projector.nrows();
    if projector.ncols() != m {
        return Err(Error::InvalidMatrix(format!(
            "projector must be square, got {}x{}",
            m,
            projector.ncols()
        )));
    }
    let idem = (projector * projector - projector).norm();
    if idem > tol * projector.norm().max(1.0) {
        return Err(Error::InvalidProjector { residual: idem });
    }

    let mut work = projector.clone();
    let mut elim = Mat::identity(m, m);
    let threshold = tol * max_abs(projector).max(1.0);
    let mut rank = 0;
    for col in 0..m {
        if rank == m {
            break;
        }
        let pivot = match rule {
            PivotRule::LargestAbs => {
                let mut best = rank;
                for r in rank + 1..m {
                    if work[(r, col)].abs() > work[(best, col)].abs() {
                        best = r;
                    }
                }
                best
            }
            PivotRule::FirstNonzero => (rank..m)
                .find(|&r| work[(r, col)].abs() > threshold)
                .unwrap_or(rank),
        };
        if work[(pivot, col)].abs() <= threshold {
            continue;
        }
        work.swap_rows(pivot, rank);
        elim.swap_rows(pivot, rank);
        let p = work[(rank, col)];
        for r in rank + 1..m {
            let f = work[(r, col)] / p;
            if f != 0.0 {
                let wrow = work.row(rank).into_owned();
                let erow = elim.row(rank).into_owned();
                let mut w = work.row_mut(r);
                w -= wrow * f;
                let mut e = elim.row_mut(r);
                e -= erow * f;
            }
        }
        rank += 1;
    }

    // Zero rows first, then the echelon rows in order.
    let order: Vec<usize> = (rank..m).chain(0..rank).collect();
    let t0 = elim.select_rows(order.iter());
    let t0_inv = t0
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidMatrix("row transform is singular".into()))?;
    let reduced = &t0 * projector;
    let upsilon_t0 = reduced.rows(m - rank, rank).into_owned();
    Ok(RowTransform {
        t0,
        t0_inv,
        upsilon_t0,
        m0: m - rank,
    })
}

/// `||L1' P1 (I - F P1)^+ L2 - L1' (I - P1 F)^+ P1 L2||_F`.
pub fn commutative_law_residual(
    l1: &Mat,
    l2: &Mat,
    p1: &Mat,
    fbar0: &Mat,
    rank_tol: f64,
) -> Result<f64> {
    let n = p1.nrows();
    let eye = Mat::identity(n, n);
    let left = l1.transpose() * p1 * pinv(&(&eye - fbar0 * p1), rank_tol)? * l2;
    let right = l1.transpose() * pinv(&(&eye - p1 * fbar0), rank_tol)? * p1 * l2;
    Ok((left - right).norm())
}

pub fn check_commutative_law(l1: &Mat, l2: &Mat, p1: &Mat, fbar0: &Mat, tol: f64) -> bool {
    commutative_law_residual(l1, l2, p1, fbar0, DEFAULT_RANK_TOL)
        .map(|r| r <= tol)
        .unwrap_or(false)
}

/// `||(I - F P1)^+ L - (I + F (I - P1 F)^+ P1) L||_F`.
pub fn pinv_sum_residual(l: &Mat, p1: &Mat, fbar0: &Mat, rank_tol: f64) -> Result<f64> {
    let n = p1.nrows();
    let eye = Mat::identity(n, n);
    let left = pinv(&(&eye - fbar0 * p1), rank_tol)? * l;
    let right = (&eye + fbar0 * pinv(&(&eye - p1 * fbar0), rank_tol)? * p1) * l;
    Ok((left - right).norm())
}

pub fn check_pinv_sum_formula(l: &Mat, p1: &Mat, fbar0: &Mat, tol: f64) -> bool {
    pinv_sum_residual(l, p1, fbar0, DEFAULT_RANK_TOL)
        .map(|r| r <= tol)
        .unwrap_or(false)
}
