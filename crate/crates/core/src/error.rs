use std::path::PathBuf;

use crate::provider::ProviderError;
use crate::registry::{RegistryError, ResourceKind};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("-{0} and -{1} cannot be specified at the same time")]
    MutuallyExclusive(&'static str, &'static str),
    #[error("no {0} given and none configured (run `configure` first)")]
    MissingDefault(&'static str),
    #[error("no configuration at {0} (run `configure` first)")]
    NotConfigured(PathBuf),
    #[error("already configured at {0} (use -force to reset)")]
    AlreadyConfigured(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("project `{project}` has not been synchronised to {node} (expected {path})")]
    ProjectNotSynced {
        project: String,
        node: String,
        path: PathBuf,
    },
    #[error("no script given; candidates: {}", if candidates.is_empty() { "(none found)".to_string() } else { candidates.join(", ") })]
    MissingScript { candidates: Vec<String> },
    #[error("script `{0}` not found in the synchronised project")]
    ScriptNotFound(String),
    #[error("{processes} processes requested but only {capacity} cores available")]
    Oversubscribed { processes: usize, capacity: usize },
    #[error("job exited with status {0}")]
    JobFailed(i32),
    #[error("node {node} is unreachable: {reason}")]
    NodeUnreachable { node: String, reason: String },
}

impl Error {
    /// True when the failure is a resource lock held by someone else.
    pub fn is_in_use(&self) -> bool {
        matches!(self, Error::Registry(RegistryError::InUse { .. }))
    }

    pub fn is_unknown(&self, kind: ResourceKind) -> bool {
        matches!(self, Error::Registry(RegistryError::Unknown { kind: k, .. }) if *k == kind)
    }
}
