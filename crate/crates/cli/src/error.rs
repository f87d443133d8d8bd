use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<CliError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] cmm_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        CliError::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at(self, path: impl Into<PathBuf>) -> Self {
        match self {
            e @ (CliError::Io { .. } | CliError::File { .. }) => e,
            e => CliError::File {
                path: path.into(),
                source: Box::new(e),
            },
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        use cmm_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Format { .. } => 5,
            CliError::File { source, .. } => source.exit_code(),
            CliError::Io { .. } => 3,
            CliError::Json(_) => 3,
            CliError::Core(e) => match e.root() {
                E::Usage(_) => 2,
                E::Numeric { .. } => 4,
                _ => 3,
            },
        }
    }
}
