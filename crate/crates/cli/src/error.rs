use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{module}: {source}")]
    Numeric { module: &'static str, source: varcurv::Error },
    #[error("verify: {0}")]
    Verify(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Tags core errors with the module that raised them.
pub trait Context<T> {
    fn module(self, module: &'static str) -> CliResult<T>;
}

impl<T> Context<T> for varcurv::Result<T> {
    fn module(self, module: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Numeric { module, source })
    }
}
