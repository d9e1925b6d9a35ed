use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::symlink;
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    ExecResult, ImageHandle, InstanceHandle, InstanceState, Inventory, Provider, ProviderError,
    ProvisioningModel, Result, SnapshotHandle, SpawnSpec, VolumeHandle, HOME_PATH,
    VOLUME_MOUNT_PATH,
};
use crate::fsutil::{self, FileLock};

/// Image every fresh LocalSim root offers.
pub const DEFAULT_IMAGE: &str = "ami-localsim";

const STATE_FILE: &str = "state.json";
const LOCK_FILE: &str = "state.lock";

/// Places where a test can make LocalSim fail on purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultPoint {
    Launch,
    CreateVolume,
    Attach,
    Share,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderEvent {
    pub seq: u64,
    pub action: String,
    pub resource: String,
}

#[derive(Debug, Clone)]
pub struct LocalSimOptions {
    pub model: ProvisioningModel,
    /// Maximum number of live instances.
    pub capacity: usize,
    /// Keep sandboxes of terminated instances for post-mortem inspection.
    pub retain_terminated: bool,
    /// Seed for provisioning jitter.
    pub seed: u64,
}

impl Default for LocalSimOptions {
    fn default() -> Self {
        Self {
            model: ProvisioningModel::zero(),
            capacity: 256,
            retain_terminated: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceEntry {
    handle: InstanceHandle,
    /// Simulated time (ns) at which termination completes.
    terminated_at: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SimState {
    next_seq: u64,
    clock_ns: u64,
    instances: BTreeMap<String, InstanceEntry>,
    volumes: BTreeMap<String, VolumeHandle>,
    snapshots: BTreeMap<String, SnapshotHandle>,
    images: BTreeMap<String, ImageHandle>,
    /// master id → worker ids that mount the master's volume.
    shares: BTreeMap<String, Vec<String>>,
    events: Vec<ProviderEvent>,
}

impl SimState {
    fn next_id(&mut self, prefix: &str) -> String {
        self.next_seq += 1;
        format!("{prefix}-{:06}", self.next_seq)
    }

    fn log(&mut self, action: &str, resource: &str) {
        let seq = self.events.len() as u64;
        self.events.push(ProviderEvent {
            seq,
            action: action.to_string(),
            resource: resource.to_string(),
        });
    }

    fn running(&self, id: &str) -> Result<&InstanceEntry> {
        let entry = self
            .instances
            .get(id)
            .ok_or_else(|| ProviderError::UnknownInstance(id.to_string()))?;
        if entry.handle.state != InstanceState::Running {
            return Err(ProviderError::InstanceNotRunning(id.to_string()));
        }
        Ok(entry)
    }

    fn live_instances(&self) -> usize {
        self.instances
            .values()
            .filter(|e| e.handle.state != InstanceState::Terminated)
            .count()
    }

    fn volume_on(&self, instance: &str) -> Option<&VolumeHandle> {
        self.volumes
            .values()
            .find(|v| v.attached_to.as_deref() == Some(instance))
    }
}

/// Local simulator: instances are sandbox directories under
/// `<root>/instances/<id>/`, volumes live in `<root>/volumes/<id>/` and
/// snapshots in `<root>/snapshots/<id>/`. State is persisted in
/// `<root>/state.json` so separate CLI invocations see the same cloud.
pub struct LocalSim {
    root: PathBuf,
    options: LocalSimOptions,
    guard: Mutex<()>,
    faults: Mutex<Vec<(FaultPoint, usize)>>,
    exec_counter: AtomicU64,
}

impl LocalSim {
    pub fn open(root: impl Into<PathBuf>, options: LocalSimOptions) -> Result<Self> {
        options.model.validate()?;
        let root = root.into();
        for sub in ["instances", "volumes", "snapshots"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let sim = Self {
            root,
            options,
            guard: Mutex::new(()),
            faults: Mutex::new(Vec::new()),
            exec_counter: AtomicU64::new(0),
        };
        sim.with_state(|st| {
            if st.images.is_empty() {
                st.images.insert(
                    DEFAULT_IMAGE.to_string(),
                    ImageHandle {
                        image_id: DEFAULT_IMAGE.to_string(),
                        description: "LocalSim base image".to_string(),
                    },
                );
            }
            Ok(())
        })?;
        Ok(sim)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn options(&self) -> &LocalSimOptions {
        &self.options
    }

    pub fn register_image(&self, image_id: &str, description: &str) -> Result<()> {
        self.with_state(|st| {
            st.images.insert(
                image_id.to_string(),
                ImageHandle {
                    image_id: image_id.to_string(),
                    description: description.to_string(),
                },
            );
            Ok(())
        })
    }

    /// Make the `(skip + 1)`-th future call at `point` fail.
    pub fn inject_fault(&self, point: FaultPoint, skip: usize) {
        self.faults.lock().unwrap().push((point, skip));
    }

    pub fn clear_faults(&self) {
        self.faults.lock().unwrap().clear();
    }

    /// Simulate an instance dying outside the platform's control.
    pub fn crash_instance(&self, id: &str) -> Result<()> {
        self.with_state(|st| {
            let clock = st.clock_ns;
            let entry = st
                .instances
                .get_mut(id)
                .ok_or_else(|| ProviderError::UnknownInstance(id.to_string()))?;
            if entry.handle.state == InstanceState::Terminated {
                return Ok(());
            }
            entry.handle.state = InstanceState::Terminated;
            entry.terminated_at = Some(clock);
            self.release_instance(st, id)?;
            st.log("crash", id);
            Ok(())
        })
    }

    pub fn events(&self) -> Result<Vec<ProviderEvent>> {
        self.with_state(|st| Ok(st.events.clone()))
    }

    pub fn sandbox_dir(&self, id: &str) -> PathBuf {
        self.root.join("instances").join(id)
    }

    pub fn volume_dir(&self, id: &str) -> PathBuf {
        self.root.join("volumes").join(id)
    }

    /// Sandboxes currently present on disk.
    pub fn sandbox_count(&self) -> Result<usize> {
        Ok(fs::read_dir(self.root.join("instances"))?.count())
    }

    fn take_fault(&self, point: FaultPoint) -> Result<()> {
        let mut faults = self.faults.lock().unwrap();
        if let Some(pos) = faults.iter().position(|(p, _)| *p == point) {
            if faults[pos].1 == 0 {
                faults.remove(pos);
                return Err(ProviderError::InjectedFault(point));
            }
            faults[pos].1 -= 1;
        }
        Ok(())
    }

    fn with_state<T>(&self, f: impl FnOnce(&mut SimState) -> Result<T>) -> Result<T> {
        let _local = self.guard.lock().unwrap_or_else(|e| e.into_inner());
        let _lock = FileLock::exclusive(&self.root.join(LOCK_FILE))?;
        let path = self.root.join(STATE_FILE);
        let mut state: SimState = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| ProviderError::Corrupt(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => SimState::default(),
            Err(e) => return Err(e.into()),
        };
        let before = serde_json::to_vec(&state).expect("state serializes");
        let out = f(&mut state);
        let after = serde_json::to_vec(&state).expect("state serializes");
        if before != after {
            fsutil::atomic_write(&path, &after)?;
        }
        out
    }

    fn delay(&self, st: &SimState, base: Duration, salt: &str) -> u64 {
        let base = base.as_nanos() as f64;
        if self.options.model.jitter == 0.0 {
            return base as u64;
        }
        let mut h = self.options.seed ^ st.next_seq.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for b in salt.bytes() {
            h = splitmix64(h ^ u64::from(b));
        }
        let u = (splitmix64(h) >> 11) as f64 / (1u64 << 53) as f64;
        (base * (1.0 + self.options.model.jitter * u)) as u64
    }

    fn advance(&self, st: &mut SimState, base: Duration, salt: &str) {
        let d = self.delay(st, base, salt);
        st.clock_ns += d;
    }

    /// Detach volumes and drop shares involving a terminated instance.
    fn release_instance(&self, st: &mut SimState, id: &str) -> Result<()> {
        for vol in st.volumes.values_mut() {
            if vol.attached_to.as_deref() == Some(id) {
                vol.attached_to = None;
            }
        }
        if let Some(workers) = st.shares.remove(id) {
            for w in workers {
                let _ = fs::remove_file(self.mount_point(&w));
            }
        }
        for workers in st.shares.values_mut() {
            workers.retain(|w| w != id);
        }
        let sandbox = self.sandbox_dir(id);
        let _ = fs::remove_file(self.mount_point(id));
        if !self.options.retain_terminated && sandbox.exists() {
            fs::remove_dir_all(&sandbox)?;
        }
        Ok(())
    }

    fn mount_point(&self, id: &str) -> PathBuf {
        self.resolve(id, Path::new(VOLUME_MOUNT_PATH))
    }

    fn resolve(&self, id: &str, path: &Path) -> PathBuf {
        let mut out = self.sandbox_dir(id);
        for comp in path.components() {
            match comp {
                Component::Normal(c) => out.push(c),
                Component::ParentDir if out != self.sandbox_dir(id) => {
                    out.pop();
                }
                _ => {}
            }
        }
        out
    }

    fn sandbox_env(&self, id: &str) -> Vec<(String, String)> {
        vec![
            (
                "HOME".to_string(),
                self.resolve(id, Path::new(HOME_PATH)).display().to_string(),
            ),
            ("DESKCLOUD_INSTANCE".to_string(), id.to_string()),
            (
                "DESKCLOUD_SANDBOX".to_string(),
                self.sandbox_dir(id).display().to_string(),
            ),
        ]
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Provider for LocalSim {
    fn name(&self) -> &str {
        "localsim"
    }

    fn launch_instances(
        &self,
        count: usize,
        instance_type: &str,
        image: &str,
        tags: &BTreeMap<String, String>,
    ) -> Result<Vec<InstanceHandle>> {
        if count == 0 {
            return Err(ProviderError::InvalidRequest(
                "instance count must be at least 1".into(),
            ));
        }
        self.take_fault(FaultPoint::Launch)?;
        self.with_state(|st| {
            if !st.images.contains_key(image) {
                return Err(ProviderError::UnknownImage(image.to_string()));
            }
            let live = st.live_instances();
            let available = self.options.capacity.saturating_sub(live);
            if count > available {
                return Err(ProviderError::CapacityExhausted {
                    requested: count,
                    available,
                });
            }
            let mut handles = Vec::with_capacity(count);
            for _ in 0..count {
                let id = st.next_id("i");
                let sandbox = self.sandbox_dir(&id);
                for sub in ["root", "mnt", "tmp", "var/log"] {
                    fs::create_dir_all(sandbox.join(sub))?;
                }
                let mut handle = InstanceHandle {
                    provider_id: id.clone(),
                    public_address: format!("localsim://{id}"),
                    instance_type: instance_type.to_string(),
                    tags: tags.clone(),
                    state: InstanceState::Pending,
                };
                st.log("launch", &id);
                debug_assert!(handle.state.can_become(InstanceState::Running));
                handle.state = InstanceState::Running;
                st.instances.insert(
                    id,
                    InstanceEntry {
                        handle: handle.clone(),
                        terminated_at: None,
                    },
                );
                handles.push(handle);
            }
            // Boots run in parallel: one boot delay per launch request.
            self.advance(st, self.options.model.per_instance_boot, "boot");
            Ok(handles)
        })
    }

    fn terminate_instances(&self, ids: &[String]) -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        self.with_state(|st| {
            for id in ids {
                if !st.instances.contains_key(id) {
                    return Err(ProviderError::UnknownInstance(id.clone()));
                }
            }
            for id in ids {
                let done = st.clock_ns + self.delay(st, self.options.model.per_terminate, id);
                let entry = st.instances.get_mut(id).expect("checked above");
                if entry.handle.state == InstanceState::Terminated {
                    continue;
                }
                entry.handle.state = InstanceState::Terminated;
                entry.terminated_at = Some(done);
                self.release_instance(st, id)?;
                st.log("terminate", id);
            }
            Ok(())
        })
    }

    fn wait_terminated(&self, ids: &[String]) -> Result<()> {
        self.with_state(|st| {
            let mut until = st.clock_ns;
            for id in ids {
                let entry = st
                    .instances
                    .get(id)
                    .ok_or_else(|| ProviderError::UnknownInstance(id.clone()))?;
                match entry.terminated_at {
                    Some(t) => until = until.max(t),
                    None => return Err(ProviderError::InvalidRequest(format!(
                        "instance `{id}` was not asked to terminate"
                    ))),
                }
            }
            st.clock_ns = until;
            Ok(())
        })
    }

    fn describe_instance(&self, id: &str) -> Result<InstanceHandle> {
        self.with_state(|st| {
            st.instances
                .get(id)
                .map(|e| e.handle.clone())
                .ok_or_else(|| ProviderError::UnknownInstance(id.to_string()))
        })
    }

    fn create_snapshot_from_dir(&self, source: &Path) -> Result<SnapshotHandle> {
        if !source.is_dir() {
            return Err(ProviderError::InvalidRequest(format!(
                "snapshot source {} is not a directory",
                source.display()
            )));
        }
        self.with_state(|st| {
            let id = st.next_id("snap");
            let dir = self.root.join("snapshots").join(&id);
            fsutil::copy_tree(source, &dir)?;
            let handle = SnapshotHandle {
                snapshot_id: id.clone(),
                payload: format!("sha256:{}", fsutil::tree_digest(&dir)?),
            };
            st.snapshots.insert(id.clone(), handle.clone());
            st.log("create_snapshot", &id);
            Ok(handle)
        })
    }

    fn delete_snapshot(&self, snapshot_id: &str) -> Result<()> {
        self.with_state(|st| {
            st.snapshots
                .remove(snapshot_id)
                .ok_or_else(|| ProviderError::UnknownSnapshot(snapshot_id.to_string()))?;
            let dir = self.root.join("snapshots").join(snapshot_id);
            if dir.exists() {
                fs::remove_dir_all(dir)?;
            }
            st.log("delete_snapshot", snapshot_id);
            Ok(())
        })
    }

    fn create_volume_from_snapshot(&self, snapshot_id: &str) -> Result<VolumeHandle> {
        self.take_fault(FaultPoint::CreateVolume)?;
        self.with_state(|st| {
            if !st.snapshots.contains_key(snapshot_id) {
                return Err(ProviderError::UnknownSnapshot(snapshot_id.to_string()));
            }
            let id = st.next_id("vol");
            let dir = self.volume_dir(&id);
            fsutil::copy_tree(&self.root.join("snapshots").join(snapshot_id), &dir)?;
            let handle = VolumeHandle {
                volume_id: id.clone(),
                size: fsutil::tree_size(&dir)?,
                source_snapshot: Some(snapshot_id.to_string()),
                attached_to: None,
            };
            st.volumes.insert(id.clone(), handle.clone());
            st.log("create_volume", &id);
            Ok(handle)
        })
    }

    fn describe_volume(&self, volume_id: &str) -> Result<VolumeHandle> {
        self.with_state(|st| {
            st.volumes
                .get(volume_id)
                .cloned()
                .ok_or_else(|| ProviderError::UnknownVolume(volume_id.to_string()))
        })
    }

    fn delete_volume(&self, volume_id: &str) -> Result<()> {
        self.with_state(|st| {
            let vol = st
                .volumes
                .get(volume_id)
                .ok_or_else(|| ProviderError::UnknownVolume(volume_id.to_string()))?;
            if let Some(inst) = &vol.attached_to {
                return Err(ProviderError::VolumeBusy {
                    volume: volume_id.to_string(),
                    instance: inst.clone(),
                });
            }
            st.volumes.remove(volume_id);
            let dir = self.volume_dir(volume_id);
            if dir.exists() {
                fs::remove_dir_all(dir)?;
            }
            st.log("delete_volume", volume_id);
            Ok(())
        })
    }

    fn attach_volume(&self, volume_id: &str, instance_id: &str) -> Result<()> {
        self.take_fault(FaultPoint::Attach)?;
        self.with_state(|st| {
            st.running(instance_id)?;
            let vol = st
                .volumes
                .get(volume_id)
                .ok_or_else(|| ProviderError::UnknownVolume(volume_id.to_string()))?;
            if let Some(inst) = &vol.attached_to {
                return Err(ProviderError::VolumeBusy {
                    volume: volume_id.to_string(),
                    instance: inst.clone(),
                });
            }
            let mount = self.mount_point(instance_id);
            if mount.symlink_metadata().is_ok() {
                return Err(ProviderError::MountPointBusy(instance_id.to_string()));
            }
            symlink(self.volume_dir(volume_id), &mount)?;
            st.volumes.get_mut(volume_id).unwrap().attached_to = Some(instance_id.to_string());
            self.advance(st, self.options.model.per_volume_attach, volume_id);
            st.log("attach", volume_id);
            Ok(())
        })
    }

    fn detach_volume(&self, volume_id: &str) -> Result<()> {
        self.with_state(|st| {
            let vol = st
                .volumes
                .get(volume_id)
                .ok_or_else(|| ProviderError::UnknownVolume(volume_id.to_string()))?;
            let inst = vol
                .attached_to
                .clone()
                .ok_or_else(|| ProviderError::VolumeNotAttached(volume_id.to_string()))?;
            if let Some(workers) = st.shares.remove(&inst) {
                for w in workers {
                    let _ = fs::remove_file(self.mount_point(&w));
                }
            }
            let _ = fs::remove_file(self.mount_point(&inst));
            st.volumes.get_mut(volume_id).unwrap().attached_to = None;
            self.advance(st, self.options.model.per_volume_attach, volume_id);
            st.log("detach", volume_id);
            Ok(())
        })
    }

    fn share_volume_with(&self, master: &str, workers: &[String]) -> Result<()> {
        self.take_fault(FaultPoint::Share)?;
        self.with_state(|st| {
            st.running(master)?;
            let vol = st
                .volume_on(master)
                .ok_or_else(|| ProviderError::NoAttachedVolume(master.to_string()))?
                .volume_id
                .clone();
            for w in workers {
                st.running(w)?;
                if w == master {
                    return Err(ProviderError::InvalidRequest(
                        "master cannot share with itself".into(),
                    ));
                }
            }
            for w in workers {
                let mount = self.mount_point(w);
                if mount.symlink_metadata().is_ok() {
                    return Err(ProviderError::MountPointBusy(w.clone()));
                }
                symlink(self.volume_dir(&vol), &mount)?;
                let entry = st.shares.entry(master.to_string()).or_default();
                if !entry.contains(w) {
                    entry.push(w.clone());
                }
                self.advance(st, self.options.model.share_setup_per_worker, w);
                st.log("share", w);
            }
            Ok(())
        })
    }

    fn unshare_volume(&self, master: &str, workers: &[String]) -> Result<()> {
        self.with_state(|st| {
            let shared = st.shares.entry(master.to_string()).or_default();
            for w in workers {
                if let Some(pos) = shared.iter().position(|x| x == w) {
                    shared.remove(pos);
                    let _ = fs::remove_file(self.mount_point(w));
                }
            }
            if shared.is_empty() {
                st.shares.remove(master);
            }
            for w in workers {
                st.log("unshare", w);
            }
            Ok(())
        })
    }

    fn exec_on(&self, instance_id: &str, argv: &[String], workdir: &Path) -> Result<ExecResult> {
        if argv.is_empty() {
            return Err(ProviderError::InvalidRequest("empty command".into()));
        }
        let n = self.exec_counter.fetch_add(1, Ordering::Relaxed);
        let tag = format!("exec-{}-{n}", std::process::id());
        let spec = SpawnSpec {
            argv: argv.to_vec(),
            workdir: workdir.to_path_buf(),
            env: Vec::new(),
            stdout: PathBuf::from(format!("/var/log/{tag}.out")),
            stderr: PathBuf::from(format!("/var/log/{tag}.err")),
        };
        let exit_code = match self.spawn_on(instance_id, &spec) {
            Ok(mut child) => child.wait()?.code().unwrap_or(-1),
            Err(ProviderError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::write(
                    self.resolve(instance_id, &spec.stderr),
                    format!("{}: command not found\n", argv[0]),
                )?;
                127
            }
            Err(e) => return Err(e),
        };
        let read = |p: &Path| fs::read_to_string(self.resolve(instance_id, p)).unwrap_or_default();
        Ok(ExecResult {
            exit_code,
            stdout: read(&spec.stdout),
            stderr: read(&spec.stderr),
        })
    }

    fn spawn_on(&self, instance_id: &str, spec: &SpawnSpec) -> Result<Child> {
        if spec.argv.is_empty() {
            return Err(ProviderError::InvalidRequest("empty command".into()));
        }
        self.with_state(|st| st.running(instance_id).map(|_| ()))?;
        let cwd = self.resolve(instance_id, &spec.workdir);
        if !cwd.is_dir() {
            return Err(ProviderError::InvalidRequest(format!(
                "working directory {} does not exist on {instance_id}",
                spec.workdir.display()
            )));
        }
        let open = |p: &Path| -> Result<fs::File> {
            let host = self.resolve(instance_id, p);
            if let Some(dir) = host.parent() {
                fs::create_dir_all(dir)?;
            }
            Ok(fs::File::create(host)?)
        };
        let mut cmd = Command::new(&spec.argv[0]);
        cmd.args(&spec.argv[1..])
            .process_group(0)
            .current_dir(cwd)
            .stdin(Stdio::null())
            .stdout(open(&spec.stdout)?)
            .stderr(open(&spec.stderr)?);
        for (k, v) in self.sandbox_env(instance_id).into_iter().chain(spec.env.clone()) {
            cmd.env(k, v);
        }
        Ok(cmd.spawn()?)
    }

    fn login_command(&self, instance_id: &str) -> Result<Command> {
        self.with_state(|st| st.running(instance_id).map(|_| ()))?;
        let shell = std::env::var("SHELL").unwrap_or_else(|_| "/bin/sh".to_string());
        let mut cmd = Command::new(shell);
        cmd.current_dir(self.resolve(instance_id, Path::new(HOME_PATH)));
        for (k, v) in self.sandbox_env(instance_id) {
            cmd.env(k, v);
        }
        Ok(cmd)
    }

    fn host_path(&self, instance_id: &str, path: &Path) -> Result<PathBuf> {
        self.with_state(|st| st.running(instance_id).map(|_| ()))?;
        Ok(self.resolve(instance_id, path))
    }

    fn describe_all(&self) -> Result<Inventory> {
        self.with_state(|st| {
            Ok(Inventory {
                instances: st
                    .instances
                    .values()
                    .filter(|e| e.handle.state != InstanceState::Terminated)
                    .map(|e| e.handle.clone())
                    .collect(),
                volumes: st.volumes.values().cloned().collect(),
                snapshots: st.snapshots.values().cloned().collect(),
                images: st.images.values().cloned().collect(),
            })
        })
    }

    fn simulated_elapsed(&self) -> Duration {
        self.with_state(|st| Ok(Duration::from_nanos(st.clock_ns)))
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim() -> (tempfile::TempDir, LocalSim) {
        let dir = tempfile::tempdir().unwrap();
        let sim = LocalSim::open(dir.path().join("sim"), LocalSimOptions::default()).unwrap();
        (dir, sim)
    }

    fn launch(sim: &LocalSim, n: usize) -> Vec<String> {
        sim.launch_instances(n, "m2.2xlarge", DEFAULT_IMAGE, &BTreeMap::new())
            .unwrap()
            .into_iter()
            .map(|h| h.provider_id)
            .collect()
    }

    fn snapshot_with(sim: &LocalSim, name: &str, body: &str) -> SnapshotHandle {
        let src = tempfile::tempdir().unwrap();
        fs::write(src.path().join(name), body).unwrap();
        sim.create_snapshot_from_dir(src.path()).unwrap()
    }

    #[test]
    fn launch_returns_distinct_running_handles() {
        let (_d, sim) = sim();
        let handles = sim
            .launch_instances(10, "m2.4xlarge", DEFAULT_IMAGE, &BTreeMap::new())
            .unwrap();
        assert_eq!(handles.len(), 10);
        let mut ids: Vec<_> = handles.iter().map(|h| h.provider_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(handles.iter().all(|h| h.state == InstanceState::Running));
        assert!(handles.iter().all(|h| sim.sandbox_dir(&h.provider_id).is_dir()));
        assert_eq!(handles[0].public_address, format!("localsim://{}", ids[0]));
    }

    #[test]
    fn launch_rejects_unknown_image_and_capacity() {
        let dir = tempfile::tempdir().unwrap();
        let sim = LocalSim::open(
            dir.path(),
            LocalSimOptions {
                capacity: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let err = sim
            .launch_instances(3, "m2.2xlarge", "missing-image", &BTreeMap::new())
            .unwrap_err();
        assert!(matches!(err, ProviderError::UnknownImage(_)));
        let err = sim
            .launch_instances(3, "m2.2xlarge", DEFAULT_IMAGE, &BTreeMap::new())
            .unwrap_err();
        assert!(matches!(err, ProviderError::CapacityExhausted { .. }));
        assert!(sim.describe_all().unwrap().instances.is_empty());
    }

    #[test]
    fn terminate_is_idempotent_and_removes_sandbox() {
        let (_d, sim) = sim();
        let ids = launch(&sim, 1);
        sim.terminate_instances(&[]).unwrap();
        sim.terminate_instances(&[ids[0].clone(), ids[0].clone()])
            .unwrap();
        sim.terminate_instances(&ids).unwrap();
        let events = sim.events().unwrap();
        assert_eq!(events.iter().filter(|e| e.action == "terminate").count(), 1);
        assert!(!sim.sandbox_dir(&ids[0]).exists());
        assert_eq!(
            sim.describe_instance(&ids[0]).unwrap().state,
            InstanceState::Terminated
        );
        assert!(matches!(
            sim.terminate_instances(&["i-nope".into()]),
            Err(ProviderError::UnknownInstance(_))
        ));
    }

    #[test]
    fn retained_sandboxes_survive_termination() {
        let dir = tempfile::tempdir().unwrap();
        let sim = LocalSim::open(
            dir.path(),
            LocalSimOptions {
                retain_terminated: true,
                ..Default::default()
            },
        )
        .unwrap();
        let ids = launch(&sim, 1);
        sim.terminate_instances(&ids).unwrap();
        assert!(sim.sandbox_dir(&ids[0]).is_dir());
    }

    #[test]
    fn volumes_copy_snapshot_payload() {
        let (_d, sim) = sim();
        let snap = snapshot_with(&sim, "data.csv", "1,2,3\n");
        let v1 = sim.create_volume_from_snapshot(&snap.snapshot_id).unwrap();
        let v2 = sim.create_volume_from_snapshot(&snap.snapshot_id).unwrap();
        assert_ne!(v1.volume_id, v2.volume_id);
        assert_eq!(v1.attached_to, None);
        let d1 = fsutil::tree_digest(&sim.volume_dir(&v1.volume_id)).unwrap();
        let d2 = fsutil::tree_digest(&sim.volume_dir(&v2.volume_id)).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(snap.payload, format!("sha256:{d1}"));
        assert!(matches!(
            sim.create_volume_from_snapshot("snap-missing"),
            Err(ProviderError::UnknownSnapshot(_))
        ));
    }

    #[test]
    fn attach_detach_state_machine() {
        let (_d, sim) = sim();
        let ids = launch(&sim, 2);
        let snap = snapshot_with(&sim, "f", "x");
        let v = sim.create_volume_from_snapshot(&snap.snapshot_id).unwrap();
        sim.attach_volume(&v.volume_id, &ids[0]).unwrap();
        let err = sim.attach_volume(&v.volume_id, &ids[1]).unwrap_err();
        assert!(matches!(err, ProviderError::VolumeBusy { .. }));
        let mounted = sim.host_path(&ids[0], Path::new("/mnt/ebs/f")).unwrap();
        assert_eq!(fs::read_to_string(mounted).unwrap(), "x");
        sim.detach_volume(&v.volume_id).unwrap();
        assert!(!sim.host_path(&ids[0], Path::new("/mnt/ebs/f")).unwrap().exists());
        sim.attach_volume(&v.volume_id, &ids[1]).unwrap();
        assert_eq!(
            sim.describe_volume(&v.volume_id).unwrap().attached_to,
            Some(ids[1].clone())
        );
        let v2 = sim.create_volume_from_snapshot(&snap.snapshot_id).unwrap();
        assert!(matches!(
            sim.detach_volume(&v2.volume_id),
            Err(ProviderError::VolumeNotAttached(_))
        ));
    }

    #[test]
    fn shared_volume_is_visible_on_workers() {
        let (_d, sim) = sim();
        let ids = launch(&sim, 4);
        let snap = snapshot_with(&sim, "seed", "s");
        let v = sim.create_volume_from_snapshot(&snap.snapshot_id).unwrap();
        let (master, workers) = (ids[0].clone(), ids[1..].to_vec());
        assert!(matches!(
            sim.share_volume_with(&master, &workers),
            Err(ProviderError::NoAttachedVolume(_))
        ));
        sim.attach_volume(&v.volume_id, &master).unwrap();
        sim.share_volume_with(&master, &[]).unwrap();
        sim.share_volume_with(&master, &workers).unwrap();
        let payload: Vec<u8> = (0..=255u8).collect();
        fs::write(
            sim.host_path(&master, Path::new("/mnt/ebs/blob")).unwrap(),
            &payload,
        )
        .unwrap();
        for w in &workers {
            let seen = fs::read(sim.host_path(w, Path::new("/mnt/ebs/blob")).unwrap()).unwrap();
            assert_eq!(seen, payload);
        }
        sim.unshare_volume(&master, &workers).unwrap();
        assert!(!sim.host_path(&workers[0], Path::new("/mnt/ebs/blob")).unwrap().exists());
    }

    #[test]
    fn exec_captures_output_and_rejects_dead_instances() {
        let (_d, sim) = sim();
        let ids = launch(&sim, 1);
        let r = sim.exec_on(&ids[0], &["true".into()], Path::new("/")).unwrap();
        assert_eq!(r.exit_code, 0);
        let r = sim
            .exec_on(
                &ids[0],
                &["sh".into(), "-c".into(), "echo hi".into()],
                Path::new("/"),
            )
            .unwrap();
        assert_eq!(r.stdout, "hi\n");
        let r = sim
            .exec_on(&ids[0], &["no-such-binary-xyz".into()], Path::new("/"))
            .unwrap();
        assert_ne!(r.exit_code, 0);
        let r = sim
            .exec_on(&ids[0], &["sh".into(), "-c".into(), "pwd".into()], Path::new("/root"))
            .unwrap();
        assert_eq!(r.stdout.trim(), sim.sandbox_dir(&ids[0]).join("root").display().to_string());
        sim.terminate_instances(&ids).unwrap();
        assert!(matches!(
            sim.exec_on(&ids[0], &["true".into()], Path::new("/")),
            Err(ProviderError::InstanceNotRunning(_))
        ));
    }

    #[test]
    fn describe_all_tracks_lifecycle() {
        let (_d, sim) = sim();
        let inv = sim.describe_all().unwrap();
        assert!(inv.instances.is_empty() && inv.volumes.is_empty() && inv.snapshots.is_empty());
        let ids = launch(&sim, 2);
        assert_eq!(sim.describe_all().unwrap().instances.len(), 2);
        sim.terminate_instances(&ids[..1]).unwrap();
        let inv = sim.describe_all().unwrap();
        assert_eq!(inv.instances.len(), 1);
        assert_eq!(inv.instances[0].provider_id, ids[1]);
    }

    #[test]
    fn state_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let ids = {
            let sim = LocalSim::open(dir.path(), LocalSimOptions::default()).unwrap();
            launch(&sim, 3)
        };
        let sim = LocalSim::open(dir.path(), LocalSimOptions::default()).unwrap();
        assert_eq!(sim.describe_all().unwrap().instances.len(), 3);
        sim.terminate_instances(&ids).unwrap();
    }

    #[test]
    fn terminate_cost_overlaps_and_is_awaited() {
        let dir = tempfile::tempdir().unwrap();
        let sim = LocalSim::open(
            dir.path(),
            LocalSimOptions {
                model: ProvisioningModel::cloud_emulation(),
                ..Default::default()
            },
        )
        .unwrap();
        let ids = launch(&sim, 3);
        let t0 = sim.simulated_elapsed();
        assert_eq!(t0, Duration::from_secs(180));
        sim.terminate_instances(&ids[1..]).unwrap();
        sim.terminate_instances(&ids[..1]).unwrap();
        sim.wait_terminated(&ids).unwrap();
        assert_eq!(sim.simulated_elapsed() - t0, Duration::from_secs(60));
    }

    #[test]
    fn jitter_is_bounded_and_reproducible() {
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut model = ProvisioningModel::cloud_emulation();
            model.jitter = 0.5;
            let sim = LocalSim::open(
                dir.path(),
                LocalSimOptions {
                    model,
                    seed: 42,
                    ..Default::default()
                },
            )
            .unwrap();
            launch(&sim, 2);
            sim.simulated_elapsed()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a >= Duration::from_secs(180) && a < Duration::from_secs(270));
    }

    #[test]
    fn injected_fault_fires_once() {
        let (_d, sim) = sim();
        sim.inject_fault(FaultPoint::Launch, 1);
        launch(&sim, 1);
        assert!(matches!(
            sim.launch_instances(1, "t", DEFAULT_IMAGE, &BTreeMap::new()),
            Err(ProviderError::InjectedFault(FaultPoint::Launch))
        ));
        launch(&sim, 1);
    }
}
