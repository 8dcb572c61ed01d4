use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("duplicate column identifier {name:?} in table {table:?}")]
    DuplicateColumn { table: String, name: String },

    #[error("duplicate table id {0:?}")]
    DuplicateTable(String),

    #[error("empty catalog")]
    EmptyCatalog,

    #[error("catalog side mismatch: expected {expected}, file declares {found}")]
    SideMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unknown column {0}")]
    UnknownColumn(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("call timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("backend returned an empty reply")]
    EmptyReply,

    #[error("scripted backend has no rule matching the prompt (prompt starts with {0:?})")]
    NoScriptRule(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("budget too small: need at least {required} characters, got {budget}")]
    BudgetTooSmall { required: usize, budget: usize },

    #[error("no choice found in reply: {0}")]
    NoChoice(String),

    #[error("invalid choice {0}: not among the candidates")]
    InvalidChoice(String),

    #[error("decision reply unparseable after retry: {reason}")]
    DecisionUnparseable {
        reason: String,
        prompt_snapshot: String,
    },

    #[error("missing result for query {0}")]
    MissingResult(String),

    #[error("{stage} {index}: {source}")]
    Stage {
        stage: &'static str,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("table {table:?}: {source}")]
    Table {
        table: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str, index: usize) -> Self {
        Error::Stage {
            stage,
            index,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input rather than a fault in the engine
    /// or one of its backends.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::DuplicateColumn { .. }
            | Error::DuplicateTable(_)
            | Error::EmptyCatalog
            | Error::SideMismatch { .. }
            | Error::Io { .. }
            | Error::UnknownColumn(_)
            | Error::InvalidParams(_)
            | Error::BudgetTooSmall { .. }
            | Error::NoScriptRule(_)
            | Error::MissingResult(_)
            | Error::Json(_) => true,
            Error::Stage { source, .. } | Error::Table { source, .. } => source.is_user_error(),
            _ => false,
        }
    }

    /// Transport-level failures that a retry may cure.
    pub(crate) fn is_retryable(&self) -> bool {
        matches!(self, Error::Timeout { .. } | Error::Transport(_))
    }
}
