use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range calendar date. `field` names the part
    /// that failed (`format`, `year`, `month` or `day`).
    #[error("invalid date {text:?}: {field} {reason}")]
    Date {
        text: String,
        field: &'static str,
        reason: String,
    },

    #[error("unknown domain {0:?}; accepted domains: DIAGNOSIS, LAB, MEDICATION, PROCEDURE, OBSERVATION, IMMUNIZATION, DERIVED")]
    UnknownDomain(String),

    #[error("invalid field {field}: {reason}")]
    Field { field: &'static str, reason: String },

    #[error("{}:{line}: {message}", path.display())]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("rules: {0}")]
    Rules(String),

    #[error("build: {0}")]
    Build(String),

    #[error("{}: {reason}", file.display())]
    Store { file: PathBuf, reason: String },

    #[error("event not found: {reference:?}{}", near_matches(.near))]
    NotFound { reference: String, near: Vec<String> },

    #[error("data directory has no {0} index; rebuild with a build mode that includes it")]
    MissingIndex(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index capped at {cap} days; requested day difference range {lo}..{hi}")]
    CapExceeded { cap: u32, lo: i32, hi: i32 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn near_matches(near: &[String]) -> String {
    if near.is_empty() {
        String::new()
    } else {
        format!("; near matches: {}", near.join(", "))
    }
}

impl Error {
    pub(crate) fn store(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Store {
            file: file.into(),
            reason: reason.into(),
        }
    }
}
