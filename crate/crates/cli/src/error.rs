use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or inputs; exit code 1.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] wishart_sde::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 0 success, 1 usage or configuration, 2 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() || matches!(e, wishart_sde::Error::Training(_)) => 2,
            _ => 1,
        }
    }
}
