use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("path uses disabled link {0}")]
    InfeasiblePath(usize),
    #[error("path set has no feasible path")]
    NoFeasiblePath,
    /// OD pairs (origin, destination) with positive demand and no path.
    #[error("infeasible instance: {} demanded OD pair(s) without a path", .0.len())]
    Infeasible(Vec<(usize, usize)>),
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
}
