/// Failure of a command, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad configuration, arguments or input artifacts; exit code 2.
    #[error("{0}")]
    Config(String),
    /// Failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Runtime(_) => 1,
        }
    }
}

impl From<evifed_core::Error> for HarnessError {
    fn from(e: evifed_core::Error) -> Self {
        match e {
            evifed_core::Error::Config(msg) => HarnessError::Config(msg),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
