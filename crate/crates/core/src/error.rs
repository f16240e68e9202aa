//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the aggregation pipeline and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation precondition (non-finite input,
    /// out-of-range parameter, shape mismatch, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The gradient covariance has rank zero: every client submitted the
    /// same gradient, so no principal directions exist.
    #[error("degenerate covariance: all gradients identical")]
    DegenerateCovariance,

    /// The two root clients landed in different non-noise clusters, which
    /// the radius construction rules out; signals an upstream bug.
    #[error("root clients carry inconsistent cluster labels {0} and {1}")]
    InconsistentLabels(usize, usize),

    /// A generator loss component evaluated to NaN or infinity.
    #[error("generator loss is non-finite")]
    NonFiniteLoss,

    /// An aggregation was requested over an empty index set.
    #[error("cannot aggregate an empty selection")]
    EmptySelection,

    /// The min-max scale search could not find any feasible scaling.
    #[error("no feasible perturbation scale found")]
    SearchFailed,

    /// An experiment configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem or serialization failure while reading/writing artifacts.
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
