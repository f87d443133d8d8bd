use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure categories raised by the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    /// Layout or dimension mismatch. `block` names the offending array.
    #[error("shape error in `{block}`: {detail}")]
    Shape { block: String, detail: String },

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values, negative Fisher entries, counter overflow.
    #[error("numeric error in `{block}`: {detail}")]
    Numeric { block: String, detail: String },

    /// Invalid arguments or incompatible option combinations.
    #[error("usage error: {0}")]
    Usage(String),

    /// Operation requested in a state that cannot support it.
    #[error("state error: {0}")]
    State(String),

    /// Task sequence violates its scenario contract (CIL or DIL).
    #[error("scenario error: {0}")]
    Scenario(String),

    /// CSV ingestion failure; `line` is 1-based and counts the header.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Wraps an error with the index of the task that produced it.
    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(block: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            block: block.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(block: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            block: block.into(),
            detail: detail.into(),
        }
    }

    /// Attach a task index, keeping the innermost category reachable via [`Error::root`].
    pub fn in_task(self, task: usize) -> Self {
        match self {
            e @ Error::Task { .. } => e,
            e => Error::Task {
                task,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping task-context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Task { source, .. } => source.root(),
            e => e,
        }
    }
}
