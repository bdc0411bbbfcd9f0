use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate generation: {0}")]
    DegenerateGeneration(String),
    #[error("format error in {file}: {msg}")]
    Format { file: String, msg: String },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("state error: {0}")]
    State(String),
    #[error("version error: {0}")]
    Version(String),
    #[error("training aborted at step {step}: non-finite gradient in `{param}`")]
    NumericAbort { step: u64, param: String },
    #[error("sink failed after {emitted} tokens: {msg}")]
    Sink { emitted: usize, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(file: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format { file: file.into(), msg: msg.into() }
    }
}

/// Reads a UTF-8 text file; undecodable bytes are a format error.
pub(crate) fn read_text(path: &std::path::Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        Error::format(name, format!("invalid UTF-8 at byte offset {}", e.utf8_error().valid_up_to()))
    })
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
