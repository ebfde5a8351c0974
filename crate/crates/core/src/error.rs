use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum GtlError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("class {label} has {available} records, needs at least {required}")]
    InsufficientRecords {
        label: u32,
        available: usize,
        required: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GtlError>;

impl GtlError {
    pub(crate) fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| GtlError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        GtlError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
