use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("provenance check failed: {0}")]
    Provenance(String),

    #[error(transparent)]
    Core(#[from] nearfar_core::Error),
}

impl CliError {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

pub type CliResult<T> = Result<T, CliError>;
