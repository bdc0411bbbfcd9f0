use tinytune::Error;

/// Failures surfaced by the command line, each with an exit code and a
/// short category printed as `error[<category>]: <message>`.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },
    #[error("{0}")]
    Lib(#[from] Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FORMAT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Format { .. } => "format",
            CliError::Lib(e) => match e {
                Error::Format { .. } => "format",
                Error::Version(_) => "version",
                Error::Io { .. } => "io",
                Error::NumericAbort { .. } | Error::NonFinite { .. } => "numeric",
                Error::Config(_) => "config",
                Error::Contract(_) => "contract",
                Error::Conflict(_) => "conflict",
                Error::Length(_) => "length",
                Error::State(_) => "state",
                Error::DegenerateInput(_) | Error::DegenerateBatch(_) | Error::DegenerateGeneration(_) => "degenerate",
                Error::Sink { .. } => "output",
                Error::Dimension(_) | Error::Index(_) => "internal",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "format" | "version" | "io" => EXIT_FORMAT,
            "numeric" => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }

    /// The single diagnostic line written to stderr.
    pub fn line(&self) -> String {
        let msg: String = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {msg}", self.category())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
