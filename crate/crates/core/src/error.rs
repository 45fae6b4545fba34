use thiserror::Error;

use crate::constraints::ConstraintError;
use crate::lm::LmError;
use crate::tree::TreeError;

/// Failure of a decoding run or one of its steps.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid configuration: {0}")]
    Config(String),
}
