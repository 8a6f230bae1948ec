use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    External,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("dangling reference: {kind} `{id}` does not resolve to a loaded change")]
    DanglingReference { kind: &'static str, id: String },

    #[error("hunk {hunk}: {message}")]
    Diff { hunk: usize, message: String },

    #[error("cannot apply hunk {hunk} at line {line}: {message}")]
    Apply {
        hunk: usize,
        line: usize,
        message: String,
    },

    #[error("cannot materialize change `{0}`: before text is absent and the diff is not a full-file diff")]
    CannotMaterialize(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unparseable claims: {0}")]
    UnparseableClaims(String),

    #[error("analyzer unavailable: `{0}` could not be started")]
    AnalyzerUnavailable(String),

    #[error("analyzer `{tool}` timed out after {secs} s")]
    AnalyzerTimeout { tool: String, secs: u64 },

    #[error("analyzer `{tool}` failed: {message}")]
    Analyzer { tool: String, message: String },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("alignment failure, unmatched ids: {0:?}")]
    Alignment(Vec<String>),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Context { source, .. } => source.class(),
            Error::AnalyzerUnavailable(_)
            | Error::AnalyzerTimeout { .. }
            | Error::Analyzer { .. }
            | Error::Transport { .. }
            | Error::Protocol(_) => ErrorClass::External,
            _ => ErrorClass::Data,
        }
    }
}

/// `e` followed by each of its sources, joined by `: `.
pub fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        let msg = s.to_string();
        if !out.ends_with(&msg) {
            out.push_str(": ");
            out.push_str(&msg);
        }
        cur = s.source();
    }
    out
}
