use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the inference routines.
///
/// Numerical failures carry enough location information (time slice, switch
/// states) for a caller to decide on a recovery policy.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("improper potential{}: precision has eigenvalue {eigenvalue:.6e}", state_suffix(*.state))]
    ImproperPotential {
        eigenvalue: f64,
        state: Option<usize>,
    },

    #[error("singular covariance: smallest eigenvalue {eigenvalue:.6e}")]
    SingularCovariance { eigenvalue: f64 },

    #[error("weight of switch state {state} underflowed (log weight {log_weight})")]
    WeightUnderflow { state: usize, log_weight: f64 },

    #[error("switch state {state} has zero total weight in the mixture")]
    StateVanished { state: usize },

    #[error(
        "two-slice marginal at t={t} is improper for pair ({prev:?}, {next}): eigenvalue {eigenvalue:.6e}"
    )]
    ImproperTwoSlice {
        t: usize,
        prev: Option<usize>,
        next: usize,
        eigenvalue: f64,
    },

    #[error("time index {t} out of range 1..={len}")]
    IndexOutOfRange { t: usize, len: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("enumeration needs {paths} switch paths, limit is {limit}")]
    EnumerationGuard { paths: u128, limit: u128 },

    #[error("inner loop stalled at step size {step:.3e} (F1 = {f1})")]
    InnerStall { step: f64, f1: f64 },

    #[error("outer step at t={t} produced invalid moments: {reason}")]
    OuterProjectionFailure { t: usize, reason: String },

    #[error("point is not a fixed point: constraint residual {residual:.3e} exceeds {limit:.1e}")]
    NotAFixedPoint { residual: f64, limit: f64 },
}

fn state_suffix(state: Option<usize>) -> String {
    match state {
        Some(s) => format!(" in switch state {s}"),
        None => String::new(),
    }
}
