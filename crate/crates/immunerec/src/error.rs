//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("meshes do not match: {0}")]
    MeshMismatch(String),

    #[error(
        "Newton iteration did not converge within {max_iter} iterations \
         (last scaled residual {last_residual:e}); residual trace: {trace:?}"
    )]
    NewtonDivergence {
        max_iter: usize,
        last_residual: f64,
        trace: Vec<f64>,
    },

    #[error("singular Newton matrix: |det| = {det:e} below threshold {threshold:e}")]
    SingularJacobian { det: f64, threshold: f64 },

    #[error("solver failed on interval {interval} (t in ({t_left}, {t_right}]): {source}")]
    SolverAtInterval {
        interval: usize,
        t_left: f64,
        t_right: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("misfit undefined at node {node} (t = {t}): {reason}")]
    MisfitDomain { node: usize, t: f64, reason: String },

    #[error("optimizer failed at iteration {iteration}: {source}")]
    OptimizerFailure {
        iteration: usize,
        /// The iterate that triggered the failure, for post-mortem inspection.
        e_values: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error(
        "search direction vanished at iteration {iteration} while |G| = {grad_norm:e} > theta"
    )]
    DegenerateDirection { iteration: usize, grad_norm: f64 },

    #[error("refinement level {level} failed: {source}")]
    LevelFailure {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
