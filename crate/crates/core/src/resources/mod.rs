//! Instance and cluster lifecycle: launch, volume handling, registration
//! and orderly teardown.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::platform::{pick, Platform};
use crate::provider::{Provider, ProviderError};
use crate::registry::{
    validate_name, ClusterRecord, GlobalConfig, InstanceRecord, RegistryError, ResourceKind,
};

/// Where new nodes record the library packages they were provisioned with.
pub const LIBRARY_MANIFEST: &str = "/etc/deskcloud/libraries.txt";

#[derive(Debug, Clone, Default)]
pub struct CreateInstance {
    pub iname: Option<String>,
    pub ebsvol: Option<String>,
    pub snap: Option<String>,
    pub instance_type: Option<String>,
    pub desc: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct CreateCluster {
    pub cname: Option<String>,
    pub csize: Option<usize>,
    pub ebsvol: Option<String>,
    pub snap: Option<String>,
    pub instance_type: Option<String>,
    pub desc: Option<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TerminateAll {
    pub instances: bool,
    pub clusters: bool,
    pub ebsvolumes: bool,
    pub snapshots: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub resource: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TerminateAllSummary {
    pub instances: Vec<String>,
    pub clusters: Vec<String>,
    pub volumes: Vec<String>,
    pub snapshots: Vec<String>,
    pub skipped: Vec<Skipped>,
    pub failures: Vec<Skipped>,
}

impl TerminateAllSummary {
    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
            && self.clusters.is_empty()
            && self.volumes.is_empty()
            && self.snapshots.is_empty()
            && self.skipped.is_empty()
            && self.failures.is_empty()
    }
}

/// A volume picked for a new resource, remembering whether we created it
/// (and so must delete it on rollback).
struct PreparedVolume {
    id: String,
    created: bool,
}

fn prepare_volume(
    provider: &dyn Provider,
    config: &GlobalConfig,
    ebsvol: Option<&str>,
    snap: Option<&str>,
) -> Result<PreparedVolume> {
    match (ebsvol, snap) {
        (Some(_), Some(_)) => Err(Error::MutuallyExclusive("ebsvol", "snap")),
        (Some(vol), None) => {
            let handle = provider.describe_volume(vol)?;
            if let Some(inst) = handle.attached_to {
                return Err(ProviderError::VolumeBusy {
                    volume: vol.to_string(),
                    instance: inst,
                }
                .into());
            }
            Ok(PreparedVolume {
                id: vol.to_string(),
                created: false,
            })
        }
        (None, snap) => {
            let snap = pick(snap, &config.default_snapshot, "snapshot")?;
            let handle = provider.create_volume_from_snapshot(&snap)?;
            Ok(PreparedVolume {
                id: handle.volume_id,
                created: true,
            })
        }
    }
}

/// Best-effort teardown after a failed create. Errors are logged, never
/// returned, so the original failure is what the caller sees.
fn rollback(provider: &dyn Provider, launched: &[String], volume: Option<&PreparedVolume>) {
    if !launched.is_empty() {
        if let Err(e) = provider.terminate_instances(launched) {
            warn!("rollback: terminating {launched:?} failed: {e}");
        } else if let Err(e) = provider.wait_terminated(launched) {
            warn!("rollback: waiting for {launched:?} failed: {e}");
        }
    }
    if let Some(vol) = volume {
        if let Ok(handle) = provider.describe_volume(&vol.id) {
            if handle.attached_to.is_some() {
                let _ = provider.detach_volume(&vol.id);
            }
        }
        if vol.created {
            if let Err(e) = provider.delete_volume(&vol.id) {
                warn!("rollback: deleting volume {} failed: {e}", vol.id);
            }
        }
    }
}

fn install_libraries(provider: &dyn Provider, ids: &[String], libs: &[String]) -> Result<()> {
    if libs.is_empty() {
        return Ok(());
    }
    let mut manifest = libs.join("\n");
    manifest.push('\n');
    for id in ids {
        let path = provider.host_path(id, Path::new(LIBRARY_MANIFEST))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, &manifest)?;
    }
    Ok(())
}

fn ensure_absent(p: &Platform, kind: ResourceKind, name: &str) -> Result<()> {
    let state = p.state()?;
    let present = match kind {
        ResourceKind::Instance => state.instances.contains_key(name),
        ResourceKind::Cluster => state.clusters.contains_key(name),
    };
    if present {
        return Err(RegistryError::Duplicate {
            kind,
            name: name.to_string(),
        }
        .into());
    }
    Ok(())
}

pub fn create_instance(p: &Platform, req: &CreateInstance) -> Result<InstanceRecord> {
    if req.ebsvol.is_some() && req.snap.is_some() {
        return Err(Error::MutuallyExclusive("ebsvol", "snap"));
    }
    let config = p.state()?.config;
    let name = pick(req.iname.as_deref(), &config.default_instance_name, "instance name")?;
    validate_name(&name)?;
    let _guard = p.registry.lifecycle_lock(ResourceKind::Instance, &name)?;
    ensure_absent(p, ResourceKind::Instance, &name)?;
    let instance_type = pick(
        req.instance_type.as_deref(),
        &config.default_instance_type,
        "instance type",
    )?;
    let image = pick(None, &config.default_image, "image")?;
    let provider = p.provider.as_ref();

    let volume = prepare_volume(provider, &config, req.ebsvol.as_deref(), req.snap.as_deref())?;
    let tags = BTreeMap::from([("Name".to_string(), name.clone())]);
    let handle = match provider.launch_instances(1, &instance_type, &image, &tags) {
        Ok(mut h) => h.remove(0),
        Err(e) => {
            rollback(provider, &[], Some(&volume));
            return Err(e.into());
        }
    };
    let launched = vec![handle.provider_id.clone()];
    let record = InstanceRecord {
        name: name.clone(),
        public_address: handle.public_address.clone(),
        volume_id: Some(volume.id.clone()),
        description: req.desc.clone().unwrap_or_default(),
        in_use: false,
        provider_id: handle.provider_id.clone(),
    };
    let finish = || -> Result<()> {
        provider.attach_volume(&volume.id, &handle.provider_id)?;
        install_libraries(provider, &launched, &config.library_packages)?;
        p.registry.register_instance(record.clone())?;
        Ok(())
    };
    if let Err(e) = finish() {
        rollback(provider, &launched, Some(&volume));
        return Err(e);
    }
    info!("instance {name} ({}) created", handle.provider_id);
    Ok(record)
}

pub fn terminate_instance(
    p: &Platform,
    iname: Option<&str>,
    deletevol: bool,
) -> Result<InstanceRecord> {
    let record = p.instance(iname)?;
    let _guard = p
        .registry
        .lifecycle_lock(ResourceKind::Instance, &record.name)?;
    let record = p.instance(Some(&record.name))?;
    if record.in_use {
        return Err(RegistryError::InUse {
            kind: ResourceKind::Instance,
            name: record.name.clone(),
        }
        .into());
    }
    let provider = p.provider.as_ref();
    if let Some(vol) = &record.volume_id {
        detach_if_attached_to(provider, vol, &record.provider_id)?;
    }
    let ids = vec![record.provider_id.clone()];
    provider.terminate_instances(&ids)?;
    provider.wait_terminated(&ids)?;
    p.registry.deregister_instance(&record.name)?;
    if deletevol {
        if let Some(vol) = &record.volume_id {
            provider.delete_volume(vol)?;
        }
    }
    info!("instance {} terminated", record.name);
    Ok(record)
}

fn detach_if_attached_to(provider: &dyn Provider, volume: &str, instance: &str) -> Result<()> {
    match provider.describe_volume(volume) {
        Ok(h) if h.attached_to.as_deref() == Some(instance) => {
            provider.detach_volume(volume)?;
            Ok(())
        }
        Ok(_) => Ok(()),
        Err(ProviderError::UnknownVolume(_)) => {
            warn!("volume {volume} no longer exists");
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn create_cluster(p: &Platform, req: &CreateCluster) -> Result<ClusterRecord> {
    if req.ebsvol.is_some() && req.snap.is_some() {
        return Err(Error::MutuallyExclusive("ebsvol", "snap"));
    }
    let config = p.state()?.config;
    let name = pick(req.cname.as_deref(), &config.default_cluster_name, "cluster name")?;
    validate_name(&name)?;
    let size = match req.csize {
        Some(n) => n,
        None if config.default_cluster_size > 0 => config.default_cluster_size,
        None => return Err(Error::MissingDefault("cluster size")),
    };
    if size == 0 {
        return Err(Error::InvalidArgument("cluster size must be at least 1".into()));
    }
    let _guard = p.registry.lifecycle_lock(ResourceKind::Cluster, &name)?;
    ensure_absent(p, ResourceKind::Cluster, &name)?;
    let instance_type = pick(
        req.instance_type.as_deref(),
        &config.default_instance_type,
        "instance type",
    )?;
    let image = pick(None, &config.default_image, "image")?;
    let provider = p.provider.as_ref();

    let volume = prepare_volume(provider, &config, req.ebsvol.as_deref(), req.snap.as_deref())?;
    let mut launched: Vec<String> = Vec::with_capacity(size);
    let mut addresses: Vec<String> = Vec::with_capacity(size);
    let build = |launched: &mut Vec<String>, addresses: &mut Vec<String>| -> Result<()> {
        let master_tags = BTreeMap::from([("Name".to_string(), format!("{name}_Master"))]);
        for h in provider.launch_instances(1, &instance_type, &image, &master_tags)? {
            launched.push(h.provider_id);
            addresses.push(h.public_address);
        }
        if size > 1 {
            let worker_tags = BTreeMap::from([("Name".to_string(), format!("{name}_Workers"))]);
            for h in provider.launch_instances(size - 1, &instance_type, &image, &worker_tags)? {
                launched.push(h.provider_id);
                addresses.push(h.public_address);
            }
        }
        provider.attach_volume(&volume.id, &launched[0])?;
        provider.share_volume_with(&launched[0], &launched[1..])?;
        install_libraries(provider, launched, &config.library_packages)?;
        p.registry.register_cluster(ClusterRecord {
            name: name.clone(),
            size,
            master_address: addresses[0].clone(),
            worker_addresses: addresses[1..].to_vec(),
            volume_id: Some(volume.id.clone()),
            description: req.desc.clone().unwrap_or_default(),
            in_use: false,
            provider_ids: launched.clone(),
        })?;
        Ok(())
    };
    if let Err(e) = build(&mut launched, &mut addresses) {
        rollback(provider, &launched, Some(&volume));
        return Err(e);
    }
    info!("cluster {name} created with {size} nodes");
    p.cluster(Some(&name))
}

pub fn terminate_cluster(
    p: &Platform,
    cname: Option<&str>,
    deletevol: bool,
) -> Result<ClusterRecord> {
    let record = p.cluster(cname)?;
    let _guard = p
        .registry
        .lifecycle_lock(ResourceKind::Cluster, &record.name)?;
    let record = p.cluster(Some(&record.name))?;
    if record.in_use {
        return Err(RegistryError::InUse {
            kind: ResourceKind::Cluster,
            name: record.name.clone(),
        }
        .into());
    }
    let provider = p.provider.as_ref();
    let master = record.master_id().to_string();
    let workers = record.worker_ids().to_vec();
    provider.unshare_volume(&master, &workers)?;
    provider.terminate_instances(&workers)?;
    if let Some(vol) = &record.volume_id {
        detach_if_attached_to(provider, vol, &master)?;
    }
    provider.terminate_instances(std::slice::from_ref(&master))?;
    provider.wait_terminated(&record.provider_ids)?;
    p.registry.deregister_cluster(&record.name)?;
    if deletevol {
        if let Some(vol) = &record.volume_id {
            provider.delete_volume(vol)?;
        }
    }
    info!("cluster {} terminated", record.name);
    Ok(record)
}

/// Sweep whole classes of resources. Locked resources and the default
/// snapshot are skipped and reported; individual failures are collected.
pub fn terminate_all(p: &Platform, what: TerminateAll) -> Result<TerminateAllSummary> {
    let mut summary = TerminateAllSummary::default();
    let provider = p.provider.as_ref();
    let state = p.state()?;

    if what.clusters {
        for (name, rec) in &state.clusters {
            if rec.in_use {
                summary.skipped.push(Skipped {
                    resource: format!("cluster {name}"),
                    reason: "in use".into(),
                });
                continue;
            }
            match terminate_cluster(p, Some(name), false) {
                Ok(_) => summary.clusters.push(name.clone()),
                Err(e) => summary.failures.push(Skipped {
                    resource: format!("cluster {name}"),
                    reason: e.to_string(),
                }),
            }
        }
    }

    if what.instances {
        for (name, rec) in &state.instances {
            if rec.in_use {
                summary.skipped.push(Skipped {
                    resource: format!("instance {name}"),
                    reason: "in use".into(),
                });
                continue;
            }
            match terminate_instance(p, Some(name), false) {
                Ok(_) => summary.instances.push(name.clone()),
                Err(e) => summary.failures.push(Skipped {
                    resource: format!("instance {name}"),
                    reason: e.to_string(),
                }),
            }
        }
        // Instances the provider runs that no registry record owns.
        let state = p.state()?;
        let owned: BTreeSet<&str> = state
            .instances
            .values()
            .map(|r| r.provider_id.as_str())
            .chain(
                state
                    .clusters
                    .values()
                    .flat_map(|c| c.provider_ids.iter().map(String::as_str)),
            )
            .collect();
        let orphans: Vec<String> = provider
            .describe_all()?
            .instances
            .into_iter()
            .map(|h| h.provider_id)
            .filter(|id| !owned.contains(id.as_str()))
            .collect();
        if !orphans.is_empty() {
            match provider
                .terminate_instances(&orphans)
                .and_then(|_| provider.wait_terminated(&orphans))
            {
                Ok(()) => summary.instances.extend(orphans),
                Err(e) => summary.failures.push(Skipped {
                    resource: format!("instances {orphans:?}"),
                    reason: e.to_string(),
                }),
            }
        }
    }

    if what.ebsvolumes {
        for vol in provider.describe_all()?.volumes {
            if let Some(inst) = &vol.attached_to {
                summary.skipped.push(Skipped {
                    resource: format!("volume {}", vol.volume_id),
                    reason: format!("attached to {inst}"),
                });
                continue;
            }
            match provider.delete_volume(&vol.volume_id) {
                Ok(()) => summary.volumes.push(vol.volume_id),
                Err(e) => summary.failures.push(Skipped {
                    resource: format!("volume {}", vol.volume_id),
                    reason: e.to_string(),
                }),
            }
        }
    }

    if what.snapshots {
        for snap in provider.describe_all()?.snapshots {
            if snap.snapshot_id == state.config.default_snapshot {
                summary.skipped.push(Skipped {
                    resource: format!("snapshot {}", snap.snapshot_id),
                    reason: "default snapshot in config".into(),
                });
                continue;
            }
            match provider.delete_snapshot(&snap.snapshot_id) {
                Ok(()) => summary.snapshots.push(snap.snapshot_id),
                Err(e) => summary.failures.push(Skipped {
                    resource: format!("snapshot {}", snap.snapshot_id),
                    reason: e.to_string(),
                }),
            }
        }
    }
    Ok(summary)
}

/// Registered names whose provider ids are not all running. Empty means
/// the registry and the provider agree.
pub fn incoherent_records(p: &Platform) -> Result<Vec<String>> {
    use crate::provider::InstanceState;
    let state = p.state()?;
    let running = |id: &str| {
        p.provider
            .describe_instance(id)
            .map(|h| h.state == InstanceState::Running)
            .unwrap_or(false)
    };
    let mut bad = Vec::new();
    for rec in state.instances.values() {
        if !running(&rec.provider_id) {
            bad.push(format!("instance {}", rec.name));
        }
    }
    for rec in state.clusters.values() {
        if !rec.provider_ids.iter().all(|id| running(id)) {
            bad.push(format!("cluster {}", rec.name));
        }
    }
    Ok(bad)
}
