use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] caseprompt_core::Error),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Machine-readable failure record written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub status: &'static str,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        use caseprompt_core::Error as E;
        match self {
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                E::Io { .. } => "io",
                E::MalformedRecord { .. } | E::EmptyCorpus(_) | E::DuplicateId(_) => "corpus",
                E::Auth(_) | E::RetriesExhausted { .. } | E::Provider(_) | E::MissingFixture(_) => {
                    "provider"
                }
                E::Artifact { .. } | E::Json(_) => "artifact",
                _ => "invalid",
            },
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            status: "error",
            kind: self.kind(),
            message: self.to_string(),
        }
    }
}
