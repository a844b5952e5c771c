//! Evaluators: causal effect decomposition, predictive utility and fidelity,
//! and counterfactual fairness metrics.

pub mod causal;
pub mod counterfactual;
pub mod predictive;

use thiserror::Error;

use crate::data::DataError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("label column `{0}` is not binary")]
    NonBinaryLabel(String),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("sensitive level `{0}` absent from the data")]
    MissingLevel(String),
    #[error("joint (z, w) space of {0} cells exceeds the limit")]
    TooManyCells(usize),
    #[error("numeric column `{0}` must be binned before effect estimation")]
    Unbinned(String),
    #[error("classifier does not use feature `{0}`")]
    MissingFeature(String),
    #[error("column `{column}` is incompatible with the fitted encoding")]
    IncompatibleColumn { column: String },
    #[error("repeat {repeat}: {source}")]
    Repeat {
        repeat: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error("empty input")]
    Empty,
    #[error("score vector length {found} does not match {expected} rows")]
    ScoreLength { expected: usize, found: usize },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
