use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] mmssl::Error),

    #[error("{path}: {source}")]
    Input {
        path: String,
        #[source]
        source: mmssl::Error,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Clap(#[from] clap::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use mmssl::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Clap(e) => e.exit_code(),
            CliError::Io(_) | CliError::Json(_) => EXIT_IO,
            CliError::CheckFailed(_) => EXIT_NUMERIC,
            CliError::Core(e) | CliError::Input { source: e, .. } => match e {
                E::Config(_) | E::Stratification(_) => EXIT_USAGE,
                E::Io(_) | E::Format(_) | E::Parse { .. } => EXIT_IO,
                E::Divergence { .. } => EXIT_NUMERIC,
                _ => EXIT_OTHER,
            },
        }
    }
}

/// Attaches the offending path to a load failure.
pub fn at_path(path: &std::path::Path) -> impl FnOnce(mmssl::Error) -> CliError + '_ {
    move |source| CliError::Input {
        path: path.display().to_string(),
        source,
    }
}
