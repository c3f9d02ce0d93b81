use std::process::ExitCode;

/// Usage and validation problems exit with 1, everything else with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Self::Usage(_) => ExitCode::from(1),
            Self::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl From<lowlight::Error> for CliError {
    fn from(e: lowlight::Error) -> Self {
        use lowlight::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::OutOfRange(_)
            | E::TooSmall { .. }
            | E::MissingFile(_)
            | E::UnsupportedFormat(_)
            | E::Config(_)
            | E::Dataset(_) => Self::Usage(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
