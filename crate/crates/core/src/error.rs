use thiserror::Error;

use crate::expr::{EvalError, ParseError};

pub type Result<T, E = CbfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CbfError {
    #[error("spec document does not match the schema: {0}")]
    Schema(String),

    #[error("cannot parse `{field}`: {source}")]
    Parse {
        field: String,
        #[source]
        source: ParseError,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid class-K function: {0}")]
    InvalidAlpha(String),

    #[error("safe set is empty on the domain box (no sampled point has h > 0)")]
    EmptySafeSet,

    #[error("evaluation failed at {x:?}: {source}")]
    Eval {
        x: Vec<f64>,
        #[source]
        source: EvalError,
    },

    /// The barrier condition cannot be met at a state of the safe set.
    #[error("CBF condition violated at {x:?}: N = {n_value:e}, |Lg h| = {lgh_norm:e}")]
    CbfViolation {
        x: Vec<f64>,
        n_value: f64,
        lgh_norm: f64,
    },

    #[error("{x:?} is not a discontinuity point: residuals (h, Lf h, |Lg h|) = {residuals:?}")]
    NotAZPoint { x: Vec<f64>, residuals: [f64; 3] },

    #[error("symbolic row `{row}` disagrees with finite differences: {symbolic:?} vs {numeric:?}")]
    CrossCheckFailure {
        row: String,
        symbolic: Vec<f64>,
        numeric: Vec<f64>,
    },

    #[error("barriers disagree in sign at {x:?} (h1 = {h1:e}, h2 = {h2:e}); they do not share a safe set")]
    SignDisagreement { x: Vec<f64>, h1: f64, h2: f64 },

    #[error("controller formula undefined at every sample of the ray")]
    AllUndefined,

    #[error("initial state is outside the safe set (h = {h:e})")]
    InitialStateUnsafe { h: f64 },

    #[error("adaptive step size underflow at t = {t:e}")]
    StepSizeUnderflow { t: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CbfError {
    pub(crate) fn eval(x: &[f64], source: EvalError) -> Self {
        CbfError::Eval {
            x: x.to_vec(),
            source,
        }
    }
}
