//! Regular/irregular classification and the free-direction decomposition.
//!
//! At every node the weight `W = R + Bbar' P Bbar` (just `R` without
//! diffusion) and the cross term `Gamma0 = B'P + Bbar' P Abar` decide
//! regularity: the problem is regular there iff `Range(Gamma0)` lies in
//! `Range(W)`. The null-space projector `I - W^+ W` is reduced by a row
//! transform whose trailing columns of the inverse, `G0`, inject the free
//! control directions. Everything downstream (steering, costates, the
//! terminal modification) is expressed through the maps built here.

use crate::error::{Error, Result};
use crate::linalg::{
    pinv, range_residual, rank_of, symmetrize, zero_row_transform_with, Mat, PivotRule,
    RowTransform,
};
use crate::problem::{Coefficients, LqProblem, ProblemKind, TimeGrid};
use crate::riccati::MatrixGrid;
use crate::Tolerances;

/// Maps derived from the weight pseudoinverse at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Denotations {
    pub upsilon0: Mat,
    pub gamma0: Mat,
    pub upsilon0_pinv: Mat,
    pub a0: Mat,
    pub abar0: Mat,
    pub d0: Mat,
    pub dbar0: Mat,
    pub f0: Mat,
    pub fbar0: Mat,
}

pub fn denotations(c: &Coefficients, p: &Mat, rank_tol: f64) -> Result<Denotations> {
    let upsilon0 = symmetrize(&(&c.r + c.bbar.transpose() * p * &c.bbar));
    let gamma0 = c.b.transpose() * p + c.bbar.transpose() * p * &c.abar;
    let up = pinv(&upsilon0, rank_tol)?;
    let b_up = &c.b * &up;
    let bbar_up = &c.bbar * &up;
    Ok(Denotations {
        a0: &c.a - &b_up * &gamma0,
        abar0: &c.abar - &bbar_up * &gamma0,
        d0: -(&b_up * c.b.transpose()),
        dbar0: -(&bbar_up * c.b.transpose()),
        f0: -(&b_up * c.bbar.transpose()),
        fbar0: -(&bbar_up * c.bbar.transpose()),
        upsilon0,
        gamma0,
        upsilon0_pinv: up,
    })
}

/// Decomposition at one node: denotations plus the free-direction maps.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDecomposition {
    pub den: Denotations,
    pub transform: RowTransform,
    /// Injection of steering coordinates into control space.
    pub g0: Mat,
    pub b0: Mat,
    pub bbar0: Mat,
    pub c0: Mat,
    /// `||(I - W W^+) Gamma0||_F`.
    pub range_residual: f64,
}

pub fn decompose(
    c: &Coefficients,
    p: &Mat,
    tol: &Tolerances,
    rule: PivotRule,
) -> Result<NodeDecomposition> {
    let den = denotations(c, p, tol.rank)?;
    let m = c.b.ncols();
    let projector = Mat::identity(m, m) - &den.upsilon0_pinv * &den.upsilon0;
    let transform = zero_row_transform_with(&projector, tol.rank, rule)?;
    let b0 = transform.trailing_block(&(&c.b * &projector));
    let bbar0 = transform.trailing_block(&(&c.bbar * &projector));
    let c0 = transform
        .trailing_block(&(den.gamma0.transpose() * &projector))
        .transpose();
    let range_residual = range_residual(&den.gamma0, &den.upsilon0, tol.rank)?;
    Ok(NodeDecomposition {
        g0: transform.injection_block(),
        den,
        transform,
        b0,
        bbar0,
        c0,
        range_residual,
    })
}

/// Closed-loop maps once the terminal modification `P1` is known.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub a1: Mat,
    pub b1: Mat,
    pub abar1: Mat,
    pub bbar1: Mat,
}

impl NodeDecomposition {
    /// `(I - P1 Fbar0)^+`.
    pub fn coupling_inverse(&self, p1: &Mat, rank_tol: f64) -> Result<Mat> {
        let n = p1.nrows();
        pinv(&(Mat::identity(n, n) - p1 * &self.den.fbar0), rank_tol)
    }

    pub fn closed_loop(&self, p1: &Mat, rank_tol: f64) -> Result<ClosedLoop> {
        let d = &self.den;
        let inv = self.coupling_inverse(p1, rank_tol)?;
        let drift = p1 * (&d.abar0 + &d.dbar0 * p1);
        let steer = p1 * &self.bbar0;
        Ok(ClosedLoop {
            a1: &d.a0 + &d.d0 * p1 + &d.f0 * &inv * &drift,
            b1: &self.b0 + &d.f0 * &inv * &steer,
            abar1: &d.abar0 + &d.dbar0 * p1 + &d.fbar0 * &inv * &drift,
            bbar1: &self.bbar0 + &d.fbar0 * &inv * &steer,
        })
    }

    /// `C0 + B0'P1 + Bbar0'(I - P1 Fbar0)^+ P1 (Abar0 + Dbar0 P1)`.
    pub fn pz2(&self, p1: &Mat, rank_tol: f64) -> Result<Mat> {
        let d = &self.den;
        let inv = self.coupling_inverse(p1, rank_tol)?;
        Ok(&self.c0
            + self.b0.transpose() * p1
            + self.bbar0.transpose() * inv * p1 * (&d.abar0 + &d.dbar0 * p1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Regular,
    Irregular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularityReport {
    pub kind: ProblemKind,
    pub grid: TimeGrid,
    pub classification: Vec<Classification>,
    pub nodes: Vec<NodeDecomposition>,
    /// Rank of the weight, constant across the grid.
    pub m0: usize,
    pub pivot_rule: PivotRule,
}

impl RegularityReport {
    pub fn is_irregular(&self) -> bool {
        self.classification.contains(&Classification::Irregular)
    }

    pub fn range_residuals(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.range_residual).collect()
    }

    pub fn free_dim(&self) -> usize {
        self.nodes[0].transform.free_dim()
    }

    pub fn terminal(&self) -> &NodeDecomposition {
        self.nodes.last().expect("report has nodes")
    }

    fn grid_of(&self, f: impl Fn(&NodeDecomposition) -> Mat) -> MatrixGrid {
        MatrixGrid::from_values(self.grid, self.nodes.iter().map(f).collect())
    }

    pub fn b0(&self) -> MatrixGrid {
        self.grid_of(|n| n.b0.clone())
    }

    pub fn bbar0(&self) -> MatrixGrid {
        self.grid_of(|n| n.bbar0.clone())
    }

    pub fn c0(&self) -> MatrixGrid {
        self.grid_of(|n| n.c0.clone())
    }

    pub fn g0(&self) -> MatrixGrid {
        self.grid_of(|n| n.g0.clone())
    }

    /// Per-node CSV: `t,regular,m0,range_residual`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,regular,m0,range_residual\n");
        for (k, node) in self.nodes.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{:e}\n",
                self.grid.time(k),
                self.classification[k] == Classification::Regular,
                node.transform.m0,
                node.range_residual
            ));
        }
        out
    }
}

pub fn classify(p: &LqProblem, pgrid: &MatrixGrid, tol: &Tolerances) -> Result<RegularityReport> {
    classify_with(p, pgrid, tol, PivotRule::default())
}

/// Node-wise range test plus decomposition. The rank of the weight must be
/// constant over the grid.
pub fn classify_with(
    p: &LqProblem,
    pgrid: &MatrixGrid,
    tol: &Tolerances,
    rule: PivotRule,
) -> Result<RegularityReport> {
    let mut nodes = Vec::with_capacity(p.grid.len());
    let mut classification = Vec::with_capacity(p.grid.len());
    for k in 0..p.grid.len() {
        let node = decompose(&p.coefficients_at_node(k), pgrid.node(k), tol, rule)?;
        if let Some(prev) = nodes.last() {
            let prev: &NodeDecomposition = prev;
            if prev.transform.m0 != node.transform.m0 {
                return Err(Error::RankProfileChange {
                    t: p.grid.time(k),
                    before: prev.transform.m0,
                    after: node.transform.m0,
                });
            }
        }
        let scale = node.den.gamma0.norm().max(1.0);
        classification.push(if node.range_residual > tol.residual * scale {
            Classification::Irregular
        } else {
            Classification::Regular
        });
        nodes.push(node);
    }
    Ok(RegularityReport {
        kind: p.kind,
        grid: p.grid,
        m0: nodes[0].transform.m0,
        classification,
        nodes,
        pivot_rule: rule,
    })
}

/// Terminal modification making `B0(T)'[H + P1(T)] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSelection {
    pub p1_t: Mat,
    /// `||B0(T)'[H + P1(T)]||_F`.
    pub constraint_residual: f64,
    /// Dimension of the symmetric matrices `K` with `B0(T)'K = 0`.
    pub family_dimension: usize,
}

/// Default choice `P1(T) = -H + (I - Pi) H (I - Pi)`, with `Pi` the
/// orthogonal projector onto `Range(B0(T))`. Zero for regular problems.
pub fn select_p1_terminal(
    p: &LqProblem,
    report: &RegularityReport,
    tol: &Tolerances,
) -> Result<TerminalSelection> {
    let n = p.n();
    let b0 = &report.terminal().b0;
    let d = n - rank_of(b0, tol.rank).min(n);
    let family_dimension = d * (d + 1) / 2;
    if !report.is_irregular() {
        return Ok(TerminalSelection {
            p1_t: Mat::zeros(n, n),
            constraint_residual: 0.0,
            family_dimension,
        });
    }
    let pi = b0 * pinv(b0, tol.rank)?;
    let comp = Mat::identity(n, n) - pi;
    let p1_t = symmetrize(&(-&p.h + &comp * &p.h * &comp));
    let constraint_residual = (b0.transpose() * (&p.h + &p1_t)).norm();
    Ok(TerminalSelection {
        p1_t,
        constraint_residual,
        family_dimension,
    })
}

/// Basis of the symmetric `K` with `B0(T)'K = 0`; adding any combination
/// to the default `P1(T)` preserves the terminal constraint.
pub fn terminal_family_basis(report: &RegularityReport, tol: &Tolerances) -> Result<Vec<Mat>> {
    let b0 = &report.terminal().b0;
    let n = b0.nrows();
    let comp = Mat::identity(n, n) - b0 * pinv(b0, tol.rank)?;
    let eig = symmetrize(&comp).symmetric_eigen();
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    let mut basis = Vec::new();
    for (a, &i) in cols.iter().enumerate() {
        for &j in &cols[a..] {
            let vi = eig.eigenvectors.column(i);
            let vj = eig.eigenvectors.column(j);
            let k = if i == j {
                vi * vi.transpose()
            } else {
                (vi * vj.transpose() + vj * vi.transpose()) * std::f64::consts::FRAC_1_SQRT_2
            };
            basis.push(k);
        }
    }
    Ok(basis)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedCheck {
    pub holds: bool,
    pub max_residual: f64,
    pub worst_t: f64,
}

/// `||(I - W W^+) Gamma||` along `Pbar`, with `W = R + Bbar' Pbar Bbar` and
/// `Gamma = B' Pbar + Bbar' Pbar Abar`.
pub fn regularized_residual(c: &Coefficients, pbar: &Mat, rank_tol: f64) -> Result<f64> {
    let w = symmetrize(&(&c.r + c.bbar.transpose() * pbar * &c.bbar));
    let gamma = c.b.transpose() * pbar + c.bbar.transpose() * pbar * &c.abar;
    range_residual(&gamma, &w, rank_tol)
}

/// Whether the modified cost with terminal weight `H + P1(T)` is regular
/// along the whole grid.
pub fn check_regularized(
    p: &LqProblem,
    pbar: &MatrixGrid,
    tol: &Tolerances,
) -> Result<RegularizedCheck> {
    let mut worst = (0.0, p.grid.t0);
    let mut holds = true;
    for k in 0..p.grid.len() {
        let c = p.coefficients_at_node(k);
        let r = regularized_residual(&c, pbar.node(k), tol.rank)?;
        let gamma_norm =
            (c.b.transpose() * pbar.node(k) + c.bbar.transpose() * pbar.node(k) * &c.abar).norm();
        if r > tol.residual * gamma_norm.max(1.0) {
            holds = false;
        }
        if r > worst.0 {
            worst = (r, p.grid.time(k));
        }
    }
    Ok(RegularizedCheck {
        holds,
        max_residual: worst.0,
        worst_t: worst.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// `L' = L'(I - P1 Fbar0)^+ (I - P1 Fbar0)`.
    RowSpace,
    /// `[Upsilon0 + Bbar'P1 Bbar]^+ L' = {I - Upsilon0^+ Bbar'(I - P1 Fbar0)^+ P1 Bbar} Upsilon0^+ L'`.
    SumInverse,
    /// `Bbar0'(I - P1 Fbar0)^+ P1 Bbar0 = 0`.
    SteeringNoise,
}

impl Condition {
    pub fn label(&self) -> &'static str {
        match self {
            Condition::RowSpace => "row-space inclusion",
            Condition::SumInverse => "sum-inverse factorization",
            Condition::SteeringNoise => "steering-noise orthogonality",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResidual {
    pub condition: Condition,
    /// Which of `B`, `Abar`, `Bbar` the condition was evaluated for.
    pub operand: &'static str,
    pub max_residual: f64,
    pub worst_t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub residuals: Vec<ConditionResidual>,
    pub tol: f64,
}

impl AssumptionReport {
    pub fn holds(&self) -> bool {
        self.residuals.iter().all(|r| r.max_residual <= self.tol)
    }

    pub fn first_violation(&self) -> Option<Error> {
        self.residuals
            .iter()
            .find(|r| r.max_residual > self.tol)
            .map(|r| Error::StructuralConditionViolated {
                condition: r.condition.label(),
                t: r.worst_t,
                residual: r.max_residual,
            })
    }

    pub fn max_residual(&self, condition: Condition) -> f64 {
        self.residuals
            .iter()
            .filter(|r| r.condition == condition)
            .map(|r| r.max_residual)
            .fold(0.0, f64::max)
    }
}

/// Node-wise residuals of the three structural conditions the stochastic
/// pipeline relies on.
pub fn check_structural_conditions(
    p: &LqProblem,
    report: &RegularityReport,
    p1: &MatrixGrid,
    tol: &Tolerances,
) -> Result<AssumptionReport> {
    let n = p.n();
    let mut out: Vec<ConditionResidual> = Vec::new();
    let mut record = |condition, operand, r: f64, t: f64| {
        match out
            .iter_mut()
            .find(|c| c.condition == condition && c.operand == operand)
        {
            Some(c) => {
                if r > c.max_residual {
                    c.max_residual = r;
                    c.worst_t = t;
                }
            }
            None => out.push(ConditionResidual {
                condition,
                operand,
                max_residual: r,
                worst_t: t,
            }),
        }
    };
    for (k, node) in report.nodes.iter().enumerate() {
        let t = p.grid.time(k);
        let c = p.coefficients_at_node(k);
        let p1k = p1.node(k);
        let coupling = Mat::identity(n, n) - p1k * &node.den.fbar0;
        let inv = pinv(&coupling, tol.rank)?;
        let up = &node.den.upsilon0_pinv;
        let weighted = pinv(
            &symmetrize(&(&node.den.upsilon0 + c.bbar.transpose() * p1k * &c.bbar)),
            tol.rank,
        )?;
        let m = c.b.ncols();
        let factor = Mat::identity(m, m) - up * c.bbar.transpose() * &inv * p1k * &c.bbar;
        for (operand, l) in [("B", &c.b), ("Abar", &c.abar), ("Bbar", &c.bbar)] {
            let lt = l.transpose();
            let r35 = (&lt - &lt * &inv * &coupling).norm();
            record(Condition::RowSpace, operand, r35, t);
            // The weighted form only composes with m-row operands.
            if lt.nrows() == m {
                let r36 = (&weighted * &lt - &factor * up * &lt).norm();
                record(Condition::SumInverse, operand, r36, t);
            }
        }
        let r37 = (node.bbar0.transpose() * &inv * p1k * &node.bbar0).norm();
        record(Condition::SteeringNoise, "Bbar0", r37, t);
    }
    Ok(AssumptionReport {
        residuals: out,
        tol: tol.residual,
    })
}

/// `max_t` norm of `C0 + B0'P1 + Bbar0'(I - P1 Fbar0)^+ P1 (Abar0 + Dbar0 P1)`.
pub fn check_pz2(report: &RegularityReport, p1: &MatrixGrid, tol: &Tolerances) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, node) in report.nodes.iter().enumerate() {
        worst = worst.max(node.pz2(p1.node(k), tol.rank)?.norm());
    }
    Ok(worst)
}

/// `max_t ||Upsilon_T0' pz2 - (I - W W^+) Gamma||` with `W`, `Gamma` built
/// from `P + P1`: the matrix identity linking the transformed necessary
/// condition to regularity of the modified cost.
pub fn pz2_projection_gap(
    p: &LqProblem,
    report: &RegularityReport,
    pgrid: &MatrixGrid,
    p1: &MatrixGrid,
    tol: &Tolerances,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, node) in report.nodes.iter().enumerate() {
        let c = p.coefficients_at_node(k);
        let pbar = pgrid.node(k) + p1.node(k);
        let w = symmetrize(&(&c.r + c.bbar.transpose() * &pbar * &c.bbar));
        let gamma = c.b.transpose() * &pbar + c.bbar.transpose() * &pbar * &c.abar;
        let m = w.nrows();
        let rhs = (Mat::identity(m, m) - &w * pinv(&w, tol.rank)?) * gamma;
        let lhs = node.transform.upsilon_t0.transpose() * node.pz2(p1.node(k), tol.rank)?;
        worst = worst.max((lhs - rhs).norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::linalg::Vector;
    use crate::riccati::{integrate_p, integrate_p1, integrate_pbar};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn singular_example_is_irregular_everywhere() {
        let p = fixtures::singular_example(1000);
        let pg = integrate_p(&p, &tol()).unwrap();
        let report = classify(&p, &pg, &tol()).unwrap();
        assert!(report
            .classification
            .iter()
            .all(|c| *c == Classification::Irregular));
        assert_eq!(report.m0, 1);
        for node in &report.nodes {
            assert_eq!(node.b0, Mat::from_element(1, 1, -1.0));
            assert_eq!(node.g0, Mat::from_column_slice(2, 1, &[0.0, 1.0]));
            assert!(node.range_residual > 0.5);
        }
    }

    #[test]
    fn identity_weight_is_regular() {
        let mut p = fixtures::singular_example(200);
        p.r = Mat::identity(2, 2).into();
        let pg = integrate_p(&p, &tol()).unwrap();
        let report = classify(&p, &pg, &tol()).unwrap();
        assert!(!report.is_irregular());
        assert_eq!(report.m0, 2);
        let sel = select_p1_terminal(&p, &report, &tol()).unwrap();
        assert_eq!(sel.p1_t, Mat::zeros(1, 1));
    }

    #[test]
    fn invertible_stochastic_weight_is_regular() {
        let mut p = fixtures::regular_stochastic_scalar(200);
        p.r = Mat::zeros(1, 1).into();
        let pg = integrate_p(&p, &tol()).unwrap();
        let report = classify(&p, &pg, &tol()).unwrap();
        assert!(!report.is_irregular());
        assert_eq!(report.m0, 1);
    }

    #[test]
    fn singular_example_terminal_selection() {
        let p = fixtures::singular_example(100);
        let pg = integrate_p(&p, &tol()).unwrap();
        let report = classify(&p, &pg, &tol()).unwrap();
        let sel = select_p1_terminal(&p, &report, &tol()).unwrap();
        assert!((sel.p1_t[(0, 0)] + 1.0).abs() < 1e-15);
        assert!(sel.constraint_residual < 1e-15);
        assert_eq!(sel.family_dimension, 0);
    }

    #[test]
    fn degenerate_steering_map_gives_zero_selection() {
        // B0(T) = 0 makes the constraint vacuous: Pi = 0, P1(T) = -H + H.
        let p = fixtures::unreachable_terminal();
        let pg = integrate_p(&p, &tol()).unwrap();
        let mut report = classify(&p, &pg, &tol()).unwrap();
        let n = p.n();
        let last = report.nodes.len() - 1;
        report.nodes[last].b0 = Mat::zeros(n, report.free_dim());
        let sel = select_p1_terminal(&p, &report, &tol()).unwrap();
        assert!(sel.p1_t.norm() < 1e-15);
        assert_eq!(sel.family_dimension, n * (n + 1) / 2);
    }

    #[test]
    fn regularized_check_on_singular_example() {
        let p = fixtures::singular_example(1000);
        let good = integrate_pbar(&p, &Mat::from_element(1, 1, -1.0), &tol()).unwrap();
        assert!(check_regularized(&p, &good, &tol()).unwrap().holds);
        let bad = integrate_pbar(&p, &Mat::zeros(1, 1), &tol()).unwrap();
        let check = check_regularized(&p, &bad, &tol()).unwrap();
        assert!(!check.holds);
        assert!(check.max_residual > 1.0);
    }

    #[test]
    fn decomposition_reconstructs_free_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..5 {
            let p = fixtures::random_irregular(4, 3, 1, seed);
            let pg = integrate_p(&p, &tol()).unwrap();
            let report = classify(&p, &pg, &tol()).unwrap();
            for (k, node) in report.nodes.iter().enumerate().step_by(50) {
                let c = p.coefficients_at_node(k);
                let w = &node.den.upsilon0;
                let proj = Mat::identity(3, 3) - &node.den.upsilon0_pinv * w;
                assert!((&c.b * &node.g0 - &node.b0).norm() < 1e-9);
                for _ in 0..100 {
                    let z = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
                    let lhs = &c.b * (&proj * &z);
                    let rhs = &node.b0 * (&node.transform.upsilon_t0 * &z);
                    assert!((lhs - rhs).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn classification_is_pivot_invariant() {
        let p = fixtures::random_irregular(4, 3, 1, 2);
        let pg = integrate_p(&p, &tol()).unwrap();
        let a = classify_with(&p, &pg, &tol(), PivotRule::LargestAbs).unwrap();
        let b = classify_with(&p, &pg, &tol(), PivotRule::FirstNonzero).unwrap();
        assert_eq!(a.classification, b.classification);
        assert_eq!(a.m0, b.m0);
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            let px = &x.b0 * pinv(&x.b0, 1e-9).unwrap();
            let py = &y.b0 * pinv(&y.b0, 1e-9).unwrap();
            assert!((px - py).norm() < 1e-9);
        }
    }

    #[test]
    fn family_basis_preserves_constraint() {
        let p = fixtures::random_irregular(4, 3, 1, 3);
        let pg = integrate_p(&p, &tol()).unwrap();
        let report = classify(&p, &pg, &tol()).unwrap();
        let sel = select_p1_terminal(&p, &report, &tol()).unwrap();
        let basis = terminal_family_basis(&report, &tol()).unwrap();
        assert_eq!(basis.len(), sel.family_dimension);
        let b0 = &report.terminal().b0;
        for k in &basis {
            assert!((b0.transpose() * k).norm() < 1e-12);
            assert!((k - k.transpose()).norm() < 1e-14);
        }
    }

    #[test]
    fn deterministic_reduction_of_pz2() {
        let p = fixtures::singular_example(1000);
        let pg = integrate_p(&p, &tol()).unwrap();
        let report = classify(&p, &pg, &tol()).unwrap();
        let p1 = integrate_p1(&p, &pg, &Mat::from_element(1, 1, -1.0), &tol()).unwrap();
        assert!(check_pz2(&report, &p1, &tol()).unwrap() < 1e-6);
        for (k, node) in report.nodes.iter().enumerate() {
            assert!((&node.c0 - node.b0.transpose() * pg.node(k)).norm() < 1e-12);
        }
    }

    #[test]
    fn trivial_assumption_checks() {
        let p = fixtures::singular_example(200);
        let mut sto = p.clone();
        sto.kind = ProblemKind::Stochastic;
        sto.abar = Some(Mat::zeros(1, 1).into());
        sto.bbar = Some(Mat::zeros(1, 2).into());
        let pg = integrate_p(&sto, &tol()).unwrap();
        let report = classify(&sto, &pg, &tol()).unwrap();
        let p1 = integrate_p1(&sto, &pg, &Mat::from_element(1, 1, -1.0), &tol()).unwrap();
        let a2 = check_structural_conditions(&sto, &report, &p1, &tol()).unwrap();
        assert!(a2.holds(), "{a2:?}");
        assert!(a2.residuals.iter().all(|r| r.max_residual == 0.0));
    }

    #[test]
    fn steering_noise_violation_is_reported() {
        let p = fixtures::steering_noise_violation(200);
        let pg = integrate_p(&p, &tol()).unwrap();
        let report = classify(&p, &pg, &tol()).unwrap();
        let p1_t = Mat::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.5]);
        let p1 = integrate_p1(&p, &pg, &p1_t, &tol()).unwrap();
        let a2 = check_structural_conditions(&p, &report, &p1, &tol()).unwrap();
        assert!(a2.max_residual(Condition::SteeringNoise) > 0.1);
        assert!(a2.max_residual(Condition::RowSpace) < 1e-12);
        assert!(matches!(
            a2.first_violation(),
            Some(Error::StructuralConditionViolated { .. })
        ));
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let p = fixtures::singular_example(10);
        let pg = integrate_p(&p, &tol()).unwrap();
        let report = classify(&p, &pg, &tol()).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,false,1,"));
    }
}
