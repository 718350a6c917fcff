use thiserror::Error;

use crate::ou::StabilityReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    /// A non-finite reward, parameter or matvec result was produced.
    #[error("non-finite value in {context}{}", iteration.map(|t| format!(" at iteration {t}")).unwrap_or_default())]
    NonFinite {
        context: String,
        iteration: Option<usize>,
    },

    #[error("unstable configuration: step size {alpha} exceeds 2/lambda_max on modes {:?} (max |1 - alpha*lambda| = {})", report.offending, report.max_abs_contraction)]
    Unstable { alpha: f64, report: StabilityReport },

    #[error("unstable linear system: spectral radius of (I - alpha*H) is {spectral_radius}")]
    UnstableSystem { spectral_radius: f64 },

    #[error("singular curvature: null modes {modes:?} have no stationary variance")]
    NullModes { modes: Vec<usize> },

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("headroom normalization refused: baseline reward {baseline} >= 1")]
    Headroom { baseline: f64 },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("operation not supported by this objective: {0}")]
    Unsupported(String),
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Parameter(msg()))
    }
}
