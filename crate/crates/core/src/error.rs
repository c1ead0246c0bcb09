use std::path::PathBuf;

/// Errors produced anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A physical or model parameter is out of its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Caller-supplied data violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A user could not be placed inside cache-node coverage.
    #[error("user placement failed: {0}")]
    Placement(String),

    /// A feature window was requested before enough history exists.
    #[error("window error: {0}")]
    Window(String),

    /// A trace file could not be parsed.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// The per-slot placement LP did not produce an optimum.
    #[error("solver failure: {0}")]
    Solver(String),

    /// A network was asked for gradients without a recorded forward pass.
    #[error("backward called without a recorded forward pass")]
    NoForwardPass,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter(_) => "parameter",
            Error::Input(_) => "input",
            Error::Shape(_) => "shape",
            Error::Placement(_) => "placement",
            Error::Window(_) => "window",
            Error::Parse { .. } => "parse",
            Error::Solver(_) => "solver",
            Error::NoForwardPass => "no-forward-pass",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
