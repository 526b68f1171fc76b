//! Datasets, experiment configs, verification suites and sweeps around the
//! `ifso` core crate. The `ifso` binary in `main.rs` is a thin CLI over this.

pub mod config;
pub mod datasets;
pub mod experiment;
pub mod report;
pub mod sweep;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] ifso::Error),
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<LabError> },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl LabError {
    /// 1 for bad input or configuration, 2 for anything that failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Invalid(_) | LabError::Json(_) | LabError::Core(ifso::Error::Config(_)) => 1,
            LabError::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, LabError>;
}

impl<T, E: Into<LabError>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, LabError> {
        self.map_err(|e| LabError::Stage { stage, source: Box::new(e.into()) })
    }
}

/// Writes `contents` to `dir/name`, creating `dir` if needed.
pub fn write_file(dir: &std::path::Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), LabError> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| LabError::io(&path, e))
}
