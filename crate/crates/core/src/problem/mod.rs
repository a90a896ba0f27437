//! Problem definition, time grid, cost evaluation.

mod io;

pub use io::{
    load_problem, load_problem_file, read_trace_csv, save_problem, save_problem_file,
    trace_to_csv,
};

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, min_eigenvalue, Mat, Vector};

/// Uniform grid on `[t0, t_final]` with `n_steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_final: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_final: f64, n_steps: usize) -> Result<Self> {
        let grid = TimeGrid {
            t0,
            t_final,
            n_steps,
        };
        match grid.problems().first() {
            Some(msg) => Err(Error::InvalidProblem(msg.clone())),
            None => Ok(grid),
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.t0.is_finite() && self.t_final.is_finite()) {
            out.push("grid endpoints must be finite".to_string());
        } else if self.t_final <= self.t0 {
            out.push(format!("T ({}) must exceed t0 ({})", self.t_final, self.t0));
        }
        if self.n_steps < 2 {
            out.push(format!("n_steps must be at least 2, got {}", self.n_steps));
        }
        out
    }

    pub fn step(&self) -> f64 {
        (self.t_final - self.t0) / self.n_steps as f64
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_final
        } else {
            self.t0 + (self.t_final - self.t0) * (k as f64 / self.n_steps as f64)
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Interval index `k` and fraction `theta` with `t = t_k + theta * h`,
    /// clamped to the grid.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = ((t - self.t0) / self.step()).clamp(0.0, self.n_steps as f64);
        let k = (s.floor() as usize).min(self.n_steps - 1);
        (k, s - k as f64)
    }

    pub fn refined(&self, factor: usize) -> TimeGrid {
        TimeGrid {
            n_steps: self.n_steps * factor,
            ..*self
        }
    }
}

/// A time-dependent coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientFn {
    Constant(Mat),
    /// One sample per grid node, linearly interpolated in between.
    Sampled(Vec<Mat>),
}

impl CoefficientFn {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            CoefficientFn::Constant(m) => m.shape(),
            CoefficientFn::Sampled(v) => v.first().map(|m| m.shape()).unwrap_or((0, 0)),
        }
    }

    pub fn at(&self, grid: &TimeGrid, t: f64) -> Mat {
        match self {
            CoefficientFn::Constant(m) => m.clone(),
            CoefficientFn::Sampled(samples) => {
                let (k, theta) = grid.locate(t);
                if theta == 0.0 {
                    samples[k].clone()
                } else {
                    &samples[k] * (1.0 - theta) + &samples[k + 1] * theta
                }
            }
        }
    }

    pub fn at_node(&self, k: usize) -> Mat {
        match self {
            CoefficientFn::Constant(m) => m.clone(),
            CoefficientFn::Sampled(samples) => samples[k].clone(),
        }
    }

    fn samples(&self) -> Vec<&Mat> {
        match self {
            CoefficientFn::Constant(m) => vec![m],
            CoefficientFn::Sampled(v) => v.iter().collect(),
        }
    }
}

impl From<Mat> for CoefficientFn {
    fn from(m: Mat) -> Self {
        CoefficientFn::Constant(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Deterministic,
    Stochastic,
}

/// Finite-horizon LQ problem
/// `dx = (A x + B u) dt + (Abar x + Bbar u) dw`, cost
/// `E[ ∫ x'Qx + u'Ru dt + x(T)' H x(T) ]`. Deterministic problems carry no
/// diffusion terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    pub kind: ProblemKind,
    pub grid: TimeGrid,
    pub x0: Vector,
    pub a: CoefficientFn,
    pub b: CoefficientFn,
    pub q: CoefficientFn,
    pub r: CoefficientFn,
    pub abar: Option<CoefficientFn>,
    pub bbar: Option<CoefficientFn>,
    pub h: Mat,
}

/// All coefficients frozen at one time instant.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub a: Mat,
    pub b: Mat,
    pub abar: Mat,
    pub bbar: Mat,
    pub q: Mat,
    pub r: Mat,
}

impl LqProblem {
    pub fn deterministic(
        grid: TimeGrid,
        x0: Vector,
        a: impl Into<CoefficientFn>,
        b: impl Into<CoefficientFn>,
        q: impl Into<CoefficientFn>,
        r: impl Into<CoefficientFn>,
        h: Mat,
    ) -> Self {
        LqProblem {
            kind: ProblemKind::Deterministic,
            grid,
            x0,
            a: a.into(),
            b: b.into(),
            q: q.into(),
            r: r.into(),
            abar: None,
            bbar: None,
            h,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn stochastic(
        grid: TimeGrid,
        x0: Vector,
        a: impl Into<CoefficientFn>,
        b: impl Into<CoefficientFn>,
        abar: impl Into<CoefficientFn>,
        bbar: impl Into<CoefficientFn>,
        q: impl Into<CoefficientFn>,
        r: impl Into<CoefficientFn>,
        h: Mat,
    ) -> Self {
        LqProblem {
            kind: ProblemKind::Stochastic,
            grid,
            x0,
            a: a.into(),
            b: b.into(),
            q: q.into(),
            r: r.into(),
            abar: Some(abar.into()),
            bbar: Some(bbar.into()),
            h,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.kind == ProblemKind::Stochastic
    }

    pub fn n(&self) -> usize {
        self.a.shape().0
    }

    pub fn m(&self) -> usize {
        self.b.shape().1
    }

    pub fn with_grid(&self, grid: TimeGrid) -> Result<Self> {
        let resample = |c: &CoefficientFn| -> Result<CoefficientFn> {
            match c {
                CoefficientFn::Constant(_) => Ok(c.clone()),
                CoefficientFn::Sampled(_) => Ok(CoefficientFn::Sampled(
                    grid.times().iter().map(|&t| c.at(&self.grid, t)).collect(),
                )),
            }
        };
        if grid.t0 != self.grid.t0 || grid.t_final != self.grid.t_final {
            return Err(Error::InvalidProblem(
                "regridding must keep the horizon".into(),
            ));
        }
        Ok(LqProblem {
            grid,
            a: resample(&self.a)?,
            b: resample(&self.b)?,
            q: resample(&self.q)?,
            r: resample(&self.r)?,
            abar: self.abar.as_ref().map(resample).transpose()?,
            bbar: self.bbar.as_ref().map(resample).transpose()?,
            ..self.clone()
        })
    }

    pub fn coefficients(&self, t: f64) -> Coefficients {
        let n = self.n();
        let m = self.m();
        let g = &self.grid;
        Coefficients {
            a: self.a.at(g, t),
            b: self.b.at(g, t),
            abar: self
                .abar
                .as_ref()
                .map(|c| c.at(g, t))
                .unwrap_or_else(|| Mat::zeros(n, n)),
            bbar: self
                .bbar
                .as_ref()
                .map(|c| c.at(g, t))
                .unwrap_or_else(|| Mat::zeros(n, m)),
            q: self.q.at(g, t),
            r: self.r.at(g, t),
        }
    }

    pub fn coefficients_at_node(&self, k: usize) -> Coefficients {
        let n = self.n();
        let m = self.m();
        Coefficients {
            a: self.a.at_node(k),
            b: self.b.at_node(k),
            abar: self
                .abar
                .as_ref()
                .map(|c| c.at_node(k))
                .unwrap_or_else(|| Mat::zeros(n, n)),
            bbar: self
                .bbar
                .as_ref()
                .map(|c| c.at_node(k))
                .unwrap_or_else(|| Mat::zeros(n, m)),
            q: self.q.at_node(k),
            r: self.r.at_node(k),
        }
    }

    /// Every violated invariant; empty iff the problem is well posed.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for msg in self.grid.problems() {
            report.push("grid", msg);
        }
        let n = self.n();
        let m = self.m();
        if self.x0.len() != n {
            report.push("x0", format!("length {} does not match n = {}", self.x0.len(), n));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            report.push("x0", "non-finite entry");
        }

        let mut coefficients: Vec<(&str, &CoefficientFn, (usize, usize))> = vec![
            ("A", &self.a, (n, n)),
            ("B", &self.b, (n, m)),
            ("Q", &self.q, (n, n)),
            ("R", &self.r, (m, m)),
        ];
        match (self.kind, &self.abar, &self.bbar) {
            (ProblemKind::Stochastic, Some(abar), Some(bbar)) => {
                coefficients.push(("Abar", abar, (n, n)));
                coefficients.push(("Bbar", bbar, (n, m)));
            }
            (ProblemKind::Stochastic, _, _) => {
                report.push("kind", "stochastic problem needs both Abar and Bbar");
            }
            (ProblemKind::Deterministic, None, None) => {}
            (ProblemKind::Deterministic, _, _) => {
                report.push("kind", "deterministic problem must not carry Abar/Bbar");
            }
        }

        for (name, coef, shape) in &coefficients {
            if let CoefficientFn::Sampled(v) = coef {
                if v.len() != self.grid.len() {
                    report.push(
                        name,
                        format!(
                            "{} samples for a grid with {} nodes",
                            v.len(),
                            self.grid.len()
                        ),
                    );
                }
            }
            for (k, sample) in coef.samples().into_iter().enumerate() {
                if sample.shape() != *shape {
                    report.push(
                        name,
                        format!(
                            "sample {k} is {}x{}, expected {}x{}",
                            sample.nrows(),
                            sample.ncols(),
                            shape.0,
                            shape.1
                        ),
                    );
                    break;
                }
                if sample.iter().any(|v| !v.is_finite()) {
                    report.push(name, format!("sample {k} has non-finite entries"));
                    break;
                }
            }
        }
        if self.h.shape() != (n, n) {
            report.push(
                "H",
                format!(
                    "H is {}x{}, expected {}x{}",
                    self.h.nrows(),
                    self.h.ncols(),
                    n,
                    n
                ),
            );
        } else if asymmetry(&self.h) > 1e-9 * self.h.norm().max(1.0) {
            report.push("H", "H not symmetric");
        }

        for (name, coef) in [("Q", &self.q), ("R", &self.r)] {
            for (k, sample) in coef.samples().into_iter().enumerate() {
                if !sample.is_square() || sample.iter().any(|v| !v.is_finite()) {
                    break;
                }
                let scale = sample.norm().max(1.0);
                if asymmetry(sample) > 1e-9 * scale {
                    report.push(name, format!("{name} not symmetric (sample {k})"));
                    break;
                }
                let lam = min_eigenvalue(sample);
                if lam < -1e-9 * scale {
                    report.push(
                        name,
                        format!("{name} not PSD (min eigenvalue {lam:.3e} at sample {k})"),
                    );
                    break;
                }
            }
        }
        report
    }

    pub fn validated(self) -> Result<Self> {
        let report = self.validate();
        if report.is_valid() {
            Ok(self)
        } else {
            Err(Error::InvalidProblem(report.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.to_string(),
            message: message.into(),
        });
    }

    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.message))
            .collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Sampled trajectory of the state and control on the problem grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    /// Brownian increment over `[t_k, t_{k+1}]`, one per step.
    pub noise_increments: Option<Vec<f64>>,
    pub realized_cost: f64,
}

impl SimulationTrace {
    pub fn terminal_state(&self) -> &Vector {
        self.states.last().expect("trace has at least one node")
    }
}

fn running_cost(p: &LqProblem, k: usize, x: &Vector, u: &Vector) -> f64 {
    let q = p.q.at_node(k);
    let r = p.r.at_node(k);
    x.dot(&(q * x)) + u.dot(&(r * u))
}

fn check_alignment(p: &LqProblem, trace: &SimulationTrace) -> Result<()> {
    let len = p.grid.len();
    if trace.times.len() != len || trace.states.len() != len || trace.controls.len() != len {
        return Err(Error::TraceMismatch(format!(
            "expected {} nodes, got times/states/controls = {}/{}/{}",
            len,
            trace.times.len(),
            trace.states.len(),
            trace.controls.len()
        )));
    }
    let slack = 1e-9 * (p.grid.t_final - p.grid.t0);
    for (k, &t) in trace.times.iter().enumerate() {
        if (t - p.grid.time(k)).abs() > slack {
            return Err(Error::TraceMismatch(format!(
                "node {k} at t = {t}, grid has {}",
                p.grid.time(k)
            )));
        }
    }
    let (n, m) = (p.n(), p.m());
    if trace.states.iter().any(|x| x.len() != n) || trace.controls.iter().any(|u| u.len() != m) {
        return Err(Error::TraceMismatch("state/control dimensions".into()));
    }
    Ok(())
}

/// Running cost integrated by the trapezoid rule up to each node.
pub fn cost_to_date(p: &LqProblem, trace: &SimulationTrace) -> Result<Vec<f64>> {
    check_alignment(p, trace)?;
    let h = p.grid.step();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(trace.times.len());
    let mut prev = running_cost(p, 0, &trace.states[0], &trace.controls[0]);
    out.push(0.0);
    for k in 1..trace.times.len() {
        let cur = running_cost(p, k, &trace.states[k], &trace.controls[k]);
        acc += 0.5 * h * (prev + cur);
        out.push(acc);
        prev = cur;
    }
    Ok(out)
}

/// Trapezoidal running cost plus the terminal term.
pub fn evaluate_cost(p: &LqProblem, trace: &SimulationTrace) -> Result<f64> {
    let running = cost_to_date(p, trace)?;
    let x_t = trace.terminal_state();
    Ok(running.last().copied().unwrap_or(0.0) + x_t.dot(&(&p.h * x_t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn singular_example_is_valid() {
        let p = fixtures::singular_example(1000);
        assert!(p.validate().is_valid(), "{}", p.validate());
    }

    #[test]
    fn negative_r_eigenvalue_is_reported() {
        let mut p = fixtures::singular_example(100);
        p.r = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.1]).into();
        let report = p.validate();
        assert!(report.mentions("R not PSD"), "{report}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut p = fixtures::singular_example(100);
        p.h = Mat::identity(2, 2);
        let report = p.validate();
        assert!(!report.is_valid());
        assert!(report.violations.iter().any(|v| v.field == "H"));
    }

    #[test]
    fn grid_invariants() {
        assert!(TimeGrid::new(1.0, 0.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 1).is_err());
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.locate(0.6), (2, 0.3999999999999999));
        assert_eq!(g.locate(1.0).0, 3);
    }

    #[test]
    fn sampled_coefficients_interpolate_linearly() {
        let g = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let c = CoefficientFn::Sampled(vec![
            Mat::from_element(1, 1, 0.0),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 3.0),
        ]);
        assert!((c.at(&g, 0.25)[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((c.at(&g, 0.75)[(0, 0)] - 2.0).abs() < 1e-15);
        assert_eq!(c.at(&g, 1.0)[(0, 0)], 3.0);
    }

    fn constant_trace(p: &LqProblem, x: f64, u: Vector) -> SimulationTrace {
        SimulationTrace {
            times: p.grid.times(),
            states: vec![Vector::from_element(p.n(), x); p.grid.len()],
            controls: vec![u; p.grid.len()],
            noise_increments: None,
            realized_cost: 0.0,
        }
    }

    #[test]
    fn cost_of_constant_state() {
        let g = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let one = Mat::identity(1, 1);
        let p = LqProblem::deterministic(
            g,
            Vector::from_element(1, 1.0),
            one.clone(),
            one.clone(),
            one.clone(),
            one.clone(),
            Mat::zeros(1, 1),
        );
        let trace = constant_trace(&p, 1.0, Vector::zeros(1));
        assert!((evaluate_cost(&p, &trace).unwrap() - 1.0).abs() < 1e-6);
        let zero = constant_trace(&p, 0.0, Vector::zeros(1));
        assert_eq!(evaluate_cost(&p, &zero).unwrap(), 0.0);
    }

    #[test]
    fn cost_of_unpenalized_steering_is_zero() {
        let p = fixtures::singular_example(50);
        // u = [0, u1], x(T) = 0: only the penalized channel and x(T) count.
        let mut trace = constant_trace(&p, 1.0, Vector::from_vec(vec![0.0, 3.0]));
        *trace.states.last_mut().unwrap() = Vector::zeros(1);
        assert_eq!(evaluate_cost(&p, &trace).unwrap(), 0.0);
    }

    #[test]
    fn misaligned_trace_is_rejected() {
        let p = fixtures::singular_example(50);
        let mut trace = constant_trace(&p, 1.0, Vector::zeros(2));
        trace.times.pop();
        assert!(matches!(
            evaluate_cost(&p, &trace),
            Err(Error::TraceMismatch(_))
        ));
    }
}
