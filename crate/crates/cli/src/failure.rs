use std::fmt;

use grayrank_core::Error as CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Other = 1,
    Config = 2,
    MissingArtifact = 3,
    Data = 4,
    Version = 5,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn config(message: impl Into<String>) -> anyhow::Error {
    Failure {
        kind: ExitKind::Config,
        message: message.into(),
    }
    .into()
}

pub fn missing(artifact: &str, stage: &str) -> anyhow::Error {
    Failure {
        kind: ExitKind::MissingArtifact,
        message: format!("missing artifact {artifact}; run `grayrank {stage}` first"),
    }
    .into()
}

pub fn exit_kind(err: &anyhow::Error) -> ExitKind {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::InvalidConfig(_) => ExitKind::Config,
                CoreError::VersionMismatch { .. } => ExitKind::Version,
                CoreError::Parse { .. } | CoreError::InvalidInput(_) | CoreError::Json(_) => ExitKind::Data,
                CoreError::StaleCache { .. } | CoreError::Io { .. } => ExitKind::Other,
            };
        }
    }
    ExitKind::Other
}
