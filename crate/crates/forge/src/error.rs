use std::path::{Path, PathBuf};

use ser_forge_core::Error as CoreError;

/// Everything that can go wrong outside the numerical core.
#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// WAV container problems; the message names the offending field.
    #[error("{path}: format error: {message}")]
    Wav { path: PathBuf, message: String },
    #[error("{path}:{line}: format error: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    /// Invalid configuration; the message names the field.
    #[error("config error: {0}")]
    Config(String),
    /// Per-utterance failures collected during a batch job.
    #[error("{} of {} utterances failed: {}", failures.len(), total, failures.iter().map(|(u, e)| format!("{u}: {e}")).collect::<Vec<_>>().join("; "))]
    Batch { total: usize, failures: Vec<(String, String)> },
}

impl ForgeError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        ForgeError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            ForgeError::Config(_) | ForgeError::Core(CoreError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;
