use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load `{field}`: {reason}")]
    Load { field: String, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate prompt pair: text direction norm {0:e} is below 1e-8")]
    DegeneratePrompt(f64),

    #[error("invalid prompt pair: {0}")]
    InvalidPrompt(String),

    #[error("embedding backend `{0}` is unavailable; set `backend.kind = \"stub\"` to run offline")]
    BackendUnavailable(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("container error: {0}")]
    Container(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("aborted at step {step}: non-finite {what}; snapshot written to {snapshot}")]
    Aborted {
        step: usize,
        what: String,
        snapshot: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Aborted { .. } => 3,
            _ => 2,
        }
    }
}

impl From<zip::result::ZipError> for Error {
    fn from(e: zip::result::ZipError) -> Self {
        Error::Container(e.to_string())
    }
}
