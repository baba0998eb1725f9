use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON, with the 1-based line and column of the failure and
    /// the offending line itself.
    #[error("{path}:{line}:{column}: {message}\n    {snippet}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String, snippet: String },

    #[error("service `{service}`: {message}")]
    Schema { service: String, message: String },

    #[error("dialogue `{dialogue_id}`{}: {message}", turn.map(|t| format!(" turn {t}")).unwrap_or_default())]
    Dialogue { dialogue_id: String, turn: Option<usize>, message: String },

    #[error("question needs {needed} positions but the first region holds {max_hist_len}")]
    QuestionTooLong { needed: usize, max_hist_len: usize },

    #[error("intent region needs {needed} positions but max_intent_len is {max_intent_len}")]
    IntentRegionOverflow { needed: usize, max_intent_len: usize },

    #[error("assembled input needs {needed} positions but max_seq_len is {max_seq_len}")]
    SequenceOverflow { needed: usize, max_seq_len: usize },

    #[error("slot has {values} possible values but at most {max} are supported")]
    TooManyValues { values: usize, max: usize },

    #[error("{0}")]
    Labels(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid span: {0}")]
    Span(String),

    #[error("{0}")]
    Head(String),

    #[error("backward called without a recorded forward pass")]
    NoForwardRecord,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training: {0}")]
    Training(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Builds a parse error from a serde_json failure, quoting the line it
    /// points at.
    pub(crate) fn json(path: impl Into<PathBuf>, text: &str, err: &serde_json::Error) -> Self {
        let line = err.line();
        let snippet = text
            .lines()
            .nth(line.saturating_sub(1))
            .map(|l| l.chars().take(160).collect::<String>())
            .unwrap_or_default();
        Error::Parse { path: path.into(), line, column: err.column(), message: err.to_string(), snippet }
    }

    /// True for errors caused by input data rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Schema { .. }
            | Error::Dialogue { .. }
            | Error::Labels(_)
            | Error::Checkpoint(_)
            | Error::QuestionTooLong { .. }
            | Error::IntentRegionOverflow { .. }
            | Error::SequenceOverflow { .. }
            | Error::TooManyValues { .. } => true,
            Error::Context { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context_with(self, f: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
