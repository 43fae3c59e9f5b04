use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("instance validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{0}")]
    Instance(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("sub-problem infeasible at the given mass flow")]
    Infeasible,
    #[error("operation requires an optimal sub-problem result")]
    NotOptimal,
    #[error("no violation to cut: relaxed optimum is zero")]
    NothingToCut,
    #[error("degenerate schedule: zero total flow at node {node} in period {period}")]
    ZeroFlowNode { node: String, period: usize },
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
