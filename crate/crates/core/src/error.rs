use thiserror::Error;

/// Errors raised by the laboratory.
///
/// Variants follow the failure classes of the experiment pipeline: bad input,
/// geometric or domain violations, discretization limits and solver failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("point outside domain: {0}")]
    Domain(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("construction error: {0}")]
    Construction(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("singular evaluation: {0}")]
    Singularity(String),
    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),
    #[error("solver error: {0}")]
    Solver(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("expression error at {pos}: {msg}")]
    Expr { pos: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
