use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::CycleStepRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: parse error{}: {message}", fmt_index(*.index))]
    Parse { path: PathBuf, index: Option<usize>, message: String },

    #[error("integrity error: {message}{}", fmt_ids(.ids))]
    Integrity { message: String, ids: Vec<u64> },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("shape error in {role}: expected {expected}, got {actual}")]
    Shape { role: &'static str, expected: String, actual: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Divergence { iteration: u64, record: Box<CycleStepRecord> },

    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn integrity(message: impl Into<String>, ids: Vec<u64>) -> Self {
        Error::Integrity { message: message.into(), ids }
    }

    pub fn shape(role: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape { role, expected: expected.to_string(), actual: actual.to_string() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Argument(_) | Error::Config(_) => 2,
            Error::Divergence { .. } => 3,
            Error::Integrity { .. } => 4,
            _ => 1,
        }
    }
}

fn fmt_index(index: Option<usize>) -> String {
    index.map(|i| format!(" at record {i}")).unwrap_or_default()
}

fn fmt_ids(ids: &[u64]) -> String {
    if ids.is_empty() {
        return String::new();
    }
    let list: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
    format!(" (ids: {})", list.join(", "))
}
