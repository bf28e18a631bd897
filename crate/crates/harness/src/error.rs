use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Process exit codes of the CLI.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CAPABILITY: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("capability error: {0}")]
    Capability(String),
    /// Some cells of a stage failed; the rest completed.
    #[error("{} cell(s) failed:\n  {}", failures.len(), failures.join("\n  "))]
    Partial { failures: Vec<String> },
    #[error(transparent)]
    Core(#[from] xconsist_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        use xconsist_core::Error as E;
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Capability(_) => EXIT_CAPABILITY,
            HarnessError::Core(E::Config(_) | E::Dataset(_)) => EXIT_CONFIG,
            HarnessError::Core(E::Capability(_)) => EXIT_CAPABILITY,
            _ => EXIT_PARTIAL,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn json(path: &std::path::Path, source: serde_json::Error) -> Self {
        HarnessError::Json {
            path: path.display().to_string(),
            source,
        }
    }
}
