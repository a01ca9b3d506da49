use std::fmt;

/// Command failure, carrying its exit code class.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, mismatched dimensions.
    Usage(String),
    Io(String),
    /// Non-finite loss or parameters during training.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<conspace::Error> for CliError {
    fn from(e: conspace::Error) -> Self {
        use conspace::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } | E::Format { .. } | E::Truncated { .. } | E::Json { .. } | E::Csv { .. } => CliError::Io(msg),
            E::Diverged { .. } | E::NonFinite(_) | E::StaleTrace => CliError::Numeric(msg),
            E::Shape(_) | E::InvalidArgument(_) | E::ZeroNorm(_) => CliError::Usage(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
