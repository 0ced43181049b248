use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// Variants are grouped by the failure class the CLI maps onto exit codes:
/// configuration, data, numerical, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("rank {rank} out of range 1..={max}")]
    Rank { rank: usize, max: usize },

    #[error("{0}")]
    Input(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal ratio {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("group s={group} is empty{context}")]
    GroupEmpty { group: u8, context: String },

    #[error("degenerate cell (s={group}, y={label:+}) has no samples")]
    DegenerateCell { group: u8, label: i8 },

    #[error("split `{split}` is missing sensitive group s={group}")]
    Stratification { split: &'static str, group: u8 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: {detail}")]
    Value { row: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
            ErrorClass::Io => 5,
        }
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Rank { .. } => ErrorClass::Config,
            Error::Shape { .. }
            | Error::Input(_)
            | Error::GroupEmpty { .. }
            | Error::DegenerateCell { .. }
            | Error::Stratification { .. }
            | Error::Schema(_)
            | Error::Value { .. }
            | Error::Format { .. } => ErrorClass::Data,
            Error::Invariant(_)
            | Error::Numerical(_)
            | Error::NoConvergence { .. }
            | Error::Diverged { .. } => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Io,
        }
    }
}
