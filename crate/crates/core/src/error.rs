use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which side of a teacher/student pair a value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Teacher,
    Student,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Teacher => f.write_str("teacher"),
            Side::Student => f.write_str("student"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, found {found})")]
    Dimension {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("lattice shapes differ: teacher is {teacher}, student is {student}; per-node soft distillation needs identical T x (U+1) x (K+1), full-sum distillation does not")]
    LatticeShape { teacher: String, student: String },

    #[error("non-finite value {value} in lattice at (t={t}, u={u}, k={k})")]
    NonFiniteLattice {
        t: usize,
        u: usize,
        k: usize,
        value: f64,
    },

    #[error("lattice node (t={t}, u={u}) is not normalized: logsumexp = {logsumexp:e}")]
    NotNormalized { t: usize, u: usize, logsumexp: f64 },

    #[error("label {label} at position {position} is outside the vocabulary of size {vocab}")]
    LabelOutOfRange {
        label: usize,
        position: usize,
        vocab: usize,
    },

    #[error("enumeration too large: {what} = {size} exceeds the limit {limit}")]
    EnumerationLimit {
        what: &'static str,
        size: u128,
        limit: u128,
    },

    #[error("non-finite {side} input: {value}")]
    NonFiniteInput { side: Side, value: f64 },

    #[error("non-finite loss {value} on utterance {utt_id}")]
    NonFiniteLoss { utt_id: String, value: f64 },

    #[error("non-finite parameter gradient on utterance {utt_id}")]
    NonFiniteGradient { utt_id: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing {what} for utterance {utt_id}")]
    Missing { what: &'static str, utt_id: String },

    #[error("malformed {format} at {location}: {message}")]
    Format {
        format: &'static str,
        location: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dimension(
        what: &'static str,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Dimension {
            what,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        format: &'static str,
        location: impl ToString,
        message: impl ToString,
    ) -> Self {
        Error::Format {
            format,
            location: location.to_string(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input or configuration rather
    /// than a failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::LatticeShape { .. }
                | Error::Dimension { .. }
                | Error::LabelOutOfRange { .. }
        )
    }
}
