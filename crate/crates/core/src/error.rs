use alloc::string::String;
use alloc::vec::Vec;

use crate::trainer::LossRecord;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("degenerate data: achieved rank {rank} is below the {required} endmembers requested")]
    Degenerate { rank: usize, required: usize },
    #[error("endmember generation failed: {0}")]
    Generation(String),
    #[error("undefined quantity: {0}")]
    Undefined(String),
    #[error("training diverged at iteration {iteration}: {term} is not finite")]
    Divergence {
        iteration: usize,
        term: &'static str,
        /// Loss records completed before the failing iteration.
        history: Vec<LossRecord>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(alloc::format!($($arg)*))
    };
}
pub(crate) use dim_err;
