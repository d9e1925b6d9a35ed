//! Cloud provider abstraction.
//!
//! The rest of the platform only talks to a [`Provider`]. The shipped
//! implementation is [`LocalSim`], which emulates instances as sandbox
//! directories on the local host. [`RemoteCloud`] is a compile-time
//! placeholder for a real cloud adapter and refuses every call.

mod localsim;
mod remote;

pub use localsim::{FaultPoint, DEFAULT_IMAGE, LocalSim, LocalSimOptions, ProviderEvent};
pub use remote::RemoteCloud;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Mount point of an attached (or shared) volume inside an instance.
pub const VOLUME_MOUNT_PATH: &str = "/mnt/ebs";
/// Home directory of the root user inside an instance.
pub const HOME_PATH: &str = "/root";

pub type Result<T, E = ProviderError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("unknown volume `{0}`")]
    UnknownVolume(String),
    #[error("unknown snapshot `{0}`")]
    UnknownSnapshot(String),
    #[error("instance `{0}` is not running")]
    InstanceNotRunning(String),
    #[error("volume `{volume}` is busy (attached to `{instance}`)")]
    VolumeBusy { volume: String, instance: String },
    #[error("volume `{0}` is not attached")]
    VolumeNotAttached(String),
    #[error("instance `{0}` has no attached volume")]
    NoAttachedVolume(String),
    #[error("instance `{0}` already has a volume mounted")]
    MountPointBusy(String),
    #[error("capacity exhausted: {requested} requested, {available} available")]
    CapacityExhausted { requested: usize, available: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("injected fault at {0:?}")]
    InjectedFault(FaultPoint),
    #[error("operation not supported by provider `{0}`")]
    Unsupported(String),
    #[error("provider state is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceState {
    Pending,
    Running,
    Terminated,
}

impl InstanceState {
    /// Legal lifecycle moves: pending → running → terminated.
    pub fn can_become(self, next: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, next),
            (Pending, Running) | (Pending, Terminated) | (Running, Terminated)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceHandle {
    pub provider_id: String,
    pub public_address: String,
    pub instance_type: String,
    pub tags: BTreeMap<String, String>,
    pub state: InstanceState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHandle {
    pub volume_id: String,
    pub size: u64,
    pub source_snapshot: Option<String>,
    pub attached_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHandle {
    pub snapshot_id: String,
    /// Content address (`sha256:<hex>`) of the snapshot tree.
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageHandle {
    pub image_id: String,
    pub description: String,
}

/// Live resources known to a provider.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    pub instances: Vec<InstanceHandle>,
    pub volumes: Vec<VolumeHandle>,
    pub snapshots: Vec<SnapshotHandle>,
    pub images: Vec<ImageHandle>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// A process to start inside an instance. `workdir` is instance-relative;
/// `stdout`/`stderr` are instance-relative capture files.
#[derive(Debug, Clone)]
pub struct SpawnSpec {
    pub argv: Vec<String>,
    pub workdir: PathBuf,
    pub env: Vec<(String, String)>,
    pub stdout: PathBuf,
    pub stderr: PathBuf,
}

/// Simulated delays charged by LocalSim against its clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProvisioningModel {
    pub per_instance_boot: Duration,
    pub per_volume_attach: Duration,
    pub share_setup_per_worker: Duration,
    /// Time for an instance to reach `terminated` after the request.
    pub per_terminate: Duration,
    /// Relative jitter in `[0, 1)` applied to every delay.
    pub jitter: f64,
}

impl ProvisioningModel {
    pub fn zero() -> Self {
        Self {
            per_instance_boot: Duration::ZERO,
            per_volume_attach: Duration::ZERO,
            share_setup_per_worker: Duration::ZERO,
            per_terminate: Duration::ZERO,
            jitter: 0.0,
        }
    }

    /// Delays chosen so that an 8-node cluster takes about 7 simulated
    /// minutes to create and a 16-node cluster about 8 minutes.
    ///
    /// Cluster creation costs two launches (master, then workers), one
    /// attach and one share setup per worker:
    /// `2 * 180 + 7.5 + 7 * 7.5 = 420 s`, `2 * 180 + 7.5 + 15 * 7.5 = 480 s`.
    pub fn cloud_emulation() -> Self {
        Self {
            per_instance_boot: Duration::from_secs(180),
            per_volume_attach: Duration::from_millis(7_500),
            share_setup_per_worker: Duration::from_millis(7_500),
            per_terminate: Duration::from_secs(60),
            jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.jitter) || !self.jitter.is_finite() {
            return Err(ProviderError::InvalidRequest(format!(
                "jitter must be in [0, 1), got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

impl Default for ProvisioningModel {
    fn default() -> Self {
        Self::zero()
    }
}

/// Number of cores for a known instance type; unknown types get one core.
pub fn cores_for_type(instance_type: &str) -> usize {
    match instance_type {
        "m2.xlarge" => 2,
        "m2.2xlarge" => 4,
        "m2.4xlarge" => 8,
        "local.1" => 1,
        "local.2" => 2,
        "local.4" => 4,
        _ => 1,
    }
}

/// Operations every provider backend offers.
///
/// Calls on distinct resources may run concurrently; calls on the same
/// resource are serialized by the implementation.
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;

    fn launch_instances(
        &self,
        count: usize,
        instance_type: &str,
        image: &str,
        tags: &BTreeMap<String, String>,
    ) -> Result<Vec<InstanceHandle>>;

    /// Request termination. Unknown ids are an error; already terminated
    /// ids are ignored.
    fn terminate_instances(&self, ids: &[String]) -> Result<()>;

    /// Block until the listed instances have finished terminating.
    fn wait_terminated(&self, ids: &[String]) -> Result<()>;

    fn describe_instance(&self, id: &str) -> Result<InstanceHandle>;

    fn create_snapshot_from_dir(&self, source: &Path) -> Result<SnapshotHandle>;

    fn delete_snapshot(&self, snapshot_id: &str) -> Result<()>;

    fn create_volume_from_snapshot(&self, snapshot_id: &str) -> Result<VolumeHandle>;

    fn describe_volume(&self, volume_id: &str) -> Result<VolumeHandle>;

    fn delete_volume(&self, volume_id: &str) -> Result<()>;

    fn attach_volume(&self, volume_id: &str, instance_id: &str) -> Result<()>;

    fn detach_volume(&self, volume_id: &str) -> Result<()>;

    /// Export the master's attached volume to every worker at [`VOLUME_MOUNT_PATH`].
    fn share_volume_with(&self, master: &str, workers: &[String]) -> Result<()>;

    fn unshare_volume(&self, master: &str, workers: &[String]) -> Result<()>;

    /// Run a command to completion inside an instance.
    fn exec_on(&self, instance_id: &str, argv: &[String], workdir: &Path) -> Result<ExecResult>;

    /// Start a command inside an instance without waiting for it.
    fn spawn_on(&self, instance_id: &str, spec: &SpawnSpec) -> Result<Child>;

    /// Command that opens an interactive shell inside the instance.
    fn login_command(&self, instance_id: &str) -> Result<Command>;

    /// Host-visible location of an instance-relative path, for backends
    /// whose instances share the analyst's filesystem.
    fn host_path(&self, instance_id: &str, path: &Path) -> Result<PathBuf>;

    fn describe_all(&self) -> Result<Inventory>;

    /// Total simulated provisioning time charged so far.
    fn simulated_elapsed(&self) -> Duration {
        Duration::ZERO
    }
}
