//! Crate-wide error type.

use thiserror::Error;

/// All failure modes of the engine. Variants map onto CLI exit codes:
/// everything except [`Error::Train`] and [`Error::Numeric`] is a
/// user/input error (exit 2); those two are numerical failures (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both offenders.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A bad argument value (zero stride, axis out of range, beta outside [0,1], ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A math-domain violation such as log of a non-positive value.
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract violation (e.g. backward from a non-scalar root).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The episodic protocol cannot be satisfied (class missing from
    /// meta-train, empty instance group, too few domains).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Dataset construction failure (insufficient class population, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary file (IDX or checkpoint), with the byte offset of
    /// the first inconsistency.
    #[error("format error at byte {offset}: {message}")]
    Format { message: String, offset: u64 },

    /// A numerical failure outside the training loop proper.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Training aborted; records the iteration at which it happened.
    #[error("training failed at iteration {iteration}: {message}")]
    Train { iteration: usize, message: String },

    /// Evaluation received unusable inputs (NaN parameters, empty records).
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures that should surface as a numerical error
    /// (CLI exit code 3) rather than an input error (exit code 2).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Train { .. } | Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
