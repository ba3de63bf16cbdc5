use std::path::PathBuf;

/// Errors raised by the harness library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}: no records")]
    EmptyCorpus(PathBuf),
    #[error("cannot build an index over zero documents")]
    EmptyIndex,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("query `{query}`: no {wanted} training case available for slot {slot}")]
    MissingSimilarCase {
        query: String,
        wanted: &'static str,
        slot: usize,
    },
    #[error("only {available} of {requested} eligible demonstrations")]
    DemonstrationShortfall { requested: usize, available: usize },
    #[error("template: {0}")]
    Template(String),
    #[error("scripted fixture has no entry for case `{0}`")]
    MissingFixture(String),
    #[error("provider authentication failed: {0}")]
    Auth(String),
    #[error("provider gave up after {attempts} attempts: {message}")]
    RetriesExhausted { attempts: u32, message: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("missing result for pattern `{0}`")]
    MissingPattern(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
