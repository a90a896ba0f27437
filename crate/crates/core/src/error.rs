use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("projector is not idempotent (residual {residual:.3e})")]
    InvalidProjector { residual: f64 },

    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("trace does not match the problem: {0}")]
    TraceMismatch(String),

    #[error("finite escape at t = {t}: entry magnitude exceeded {bound:e}")]
    FiniteEscape { t: f64, bound: f64 },

    #[error("rank of the control weight changes at t = {t} (m0 {before} -> {after})")]
    RankProfileChange { t: f64, before: usize, after: usize },

    #[error("modified cost is not regular: residual {residual:.3e} at t = {t}")]
    NotRegularizable { t: f64, residual: f64 },

    #[error("terminal constraint unreachable from x0 (residual {residual:.3e})")]
    TerminalUnreachable { residual: f64 },

    #[error("noise couples into the steering channel at t = {t} (norm {norm:.3e})")]
    UnsupportedNoiseCoupling { t: f64, norm: f64 },

    #[error("structural condition violated: {condition} at t = {t} (residual {residual:.3e})")]
    StructuralConditionViolated {
        condition: &'static str,
        t: f64,
        residual: f64,
    },

    #[error("dense problem too large: {unknowns} unknowns (limit {limit})")]
    TooLarge { unknowns: usize, limit: usize },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
