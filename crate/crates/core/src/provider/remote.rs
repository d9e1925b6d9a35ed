use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use super::{
    ExecResult, InstanceHandle, Inventory, Provider, ProviderError, Result, SnapshotHandle,
    SpawnSpec, VolumeHandle,
};

/// Placeholder for a real cloud backend. It exists so the provider seam is
/// exercised at compile time; every operation reports `Unsupported`.
#[derive(Debug, Clone)]
pub struct RemoteCloud {
    name: String,
}

impl RemoteCloud {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }

    fn unsupported<T>(&self) -> Result<T> {
        Err(ProviderError::Unsupported(self.name.clone()))
    }
}

impl Provider for RemoteCloud {
    fn name(&self) -> &str {
        &self.name
    }

    fn launch_instances(
        &self,
        _count: usize,
        _instance_type: &str,
        _image: &str,
        _tags: &BTreeMap<String, String>,
    ) -> Result<Vec<InstanceHandle>> {
        self.unsupported()
    }

    fn terminate_instances(&self, _ids: &[String]) -> Result<()> {
        self.unsupported()
    }

    fn wait_terminated(&self, _ids: &[String]) -> Result<()> {
        self.unsupported()
    }

    fn describe_instance(&self, _id: &str) -> Result<InstanceHandle> {
        self.unsupported()
    }

    fn create_snapshot_from_dir(&self, _source: &Path) -> Result<SnapshotHandle> {
        self.unsupported()
    }

    fn delete_snapshot(&self, _snapshot_id: &str) -> Result<()> {
        self.unsupported()
    }

    fn create_volume_from_snapshot(&self, _snapshot_id: &str) -> Result<VolumeHandle> {
        self.unsupported()
    }

    fn describe_volume(&self, _volume_id: &str) -> Result<VolumeHandle> {
        self.unsupported()
    }

    fn delete_volume(&self, _volume_id: &str) -> Result<()> {
        self.unsupported()
    }

    fn attach_volume(&self, _volume_id: &str, _instance_id: &str) -> Result<()> {
        self.unsupported()
    }

    fn detach_volume(&self, _volume_id: &str) -> Result<()> {
        self.unsupported()
    }

    fn share_volume_with(&self, _master: &str, _workers: &[String]) -> Result<()> {
        self.unsupported()
    }

    fn unshare_volume(&self, _master: &str, _workers: &[String]) -> Result<()> {
        self.unsupported()
    }

    fn exec_on(&self, _instance_id: &str, _argv: &[String], _workdir: &Path) -> Result<ExecResult> {
        self.unsupported()
    }

    fn spawn_on(&self, _instance_id: &str, _spec: &SpawnSpec) -> Result<Child> {
        self.unsupported()
    }

    fn login_command(&self, _instance_id: &str) -> Result<Command> {
        self.unsupported()
    }

    fn host_path(&self, _instance_id: &str, _path: &Path) -> Result<PathBuf> {
        self.unsupported()
    }

    fn describe_all(&self) -> Result<Inventory> {
        self.unsupported()
    }
}
