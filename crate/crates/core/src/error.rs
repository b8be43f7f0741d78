use thiserror::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model evaluation, integration, and data handling.
///
/// Variants split into two broad classes used by callers to pick exit codes:
/// [`Error::is_numerical`] distinguishes failures of the computation itself
/// (overflow, degenerate geometry) from invalid inputs or configuration.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had the wrong length for the operation.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A structural parameter was invalid (empty layer list, zero step size, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two agents (or an agent and a wall sample) coincide, so the
    /// interaction direction is undefined.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// The state or costate left the floating-point range during integration.
    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: &'static str, step: usize },

    /// Simulated and reference trajectories do not share a common time grid.
    #[error("time grids incompatible: {0}")]
    GridMismatch(String),

    /// A CSV record could not be parsed.
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: u64, message: String },

    /// Timestamps for one agent were not strictly increasing.
    #[error("timestamps out of order for agent {agent} at line {line}")]
    OutOfOrder { agent: String, line: u64 },

    /// The dataset produced no usable sequences.
    #[error("no usable sequences: {0}")]
    EmptyDataset(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Underlying CSV reader/writer failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical computation itself (as opposed to
    /// invalid inputs, configuration, or data).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Degenerate(_) | Error::NonFinite { .. })
    }
}
