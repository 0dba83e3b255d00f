use std::path::Path;

/// Error taxonomy shared across the pipeline. The variant name doubles as
/// the machine-parseable reason prefix on the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A referenced file or directory could not be read.
    #[error("load error: {0}")]
    Load(String),
    /// An artifact parsed but violated its format contract.
    #[error("schema error: {0}")]
    Schema(String),
    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// An operation was called outside its domain (empty set, dimension mismatch).
    #[error("domain error: {0}")]
    Domain(String),
    /// An embedding provider failed or returned malformed data.
    #[error("provider error: {0}")]
    Provider(String),
    /// A language-model backend failed or returned unusable output.
    #[error("llm error: {0}")]
    Llm(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn load(path: &Path, msg: &str) -> Self {
        Error::Load(format!("{}: {msg}", path.display()))
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn provider(msg: impl Into<String>) -> Self {
        Error::Provider(msg.into())
    }

    pub fn llm(msg: impl Into<String>) -> Self {
        Error::Llm(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
