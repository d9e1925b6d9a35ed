use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::provider::{LocalSim, LocalSimOptions, Provider, ProvisioningModel, RemoteCloud};
use crate::registry::{
    ClusterRecord, GlobalConfig, InstanceRecord, Registry, RegistryError, RegistryState, ResourceKind,
};

/// Provider profile with zero provisioning delays.
pub const PROFILE_LOCALSIM: &str = "localsim";
/// Provider profile whose delays emulate real cloud start-up times.
pub const PROFILE_LOCALSIM_CLOUD: &str = "localsim-cloud";

/// A registry paired with the provider that backs its resources.
#[derive(Clone)]
pub struct Platform {
    pub registry: Registry,
    pub provider: Arc<dyn Provider>,
}

impl Platform {
    pub fn new(registry: Registry, provider: Arc<dyn Provider>) -> Self {
        Self { registry, provider }
    }

    /// Build the provider named by the registry's `provider_profile`.
    pub fn from_registry(registry: Registry) -> Result<Self> {
        let state = registry.load()?;
        let provider = provider_for_profile(&state.config.provider_profile, registry.dir())?;
        Ok(Self::new(registry, provider))
    }

    pub fn state(&self) -> Result<RegistryState> {
        Ok(self.registry.load()?)
    }

    pub fn instance(&self, name: Option<&str>) -> Result<InstanceRecord> {
        let state = self.state()?;
        let name = pick(name, &state.config.default_instance_name, "instance name")?;
        state
            .instances
            .get(&name)
            .cloned()
            .ok_or_else(|| unknown(ResourceKind::Instance, &name))
    }

    pub fn cluster(&self, name: Option<&str>) -> Result<ClusterRecord> {
        let state = self.state()?;
        let name = pick(name, &state.config.default_cluster_name, "cluster name")?;
        state
            .clusters
            .get(&name)
            .cloned()
            .ok_or_else(|| unknown(ResourceKind::Cluster, &name))
    }
}

/// Location of the LocalSim cloud that belongs to a registry directory.
pub fn localsim_root(registry_dir: &Path) -> PathBuf {
    registry_dir.join("localsim")
}

pub fn provider_for_profile(profile: &str, registry_dir: &Path) -> Result<Arc<dyn Provider>> {
    let model = match profile {
        PROFILE_LOCALSIM | "" => ProvisioningModel::zero(),
        PROFILE_LOCALSIM_CLOUD => ProvisioningModel::cloud_emulation(),
        other => return Ok(Arc::new(RemoteCloud::new(other))),
    };
    let options = LocalSimOptions {
        model,
        ..Default::default()
    };
    Ok(Arc::new(LocalSim::open(localsim_root(registry_dir), options)?))
}

pub(crate) fn pick(given: Option<&str>, default: &str, what: &'static str) -> Result<String> {
    match given {
        Some(v) if !v.is_empty() => Ok(v.to_string()),
        _ if !default.is_empty() => Ok(default.to_string()),
        _ => Err(Error::MissingDefault(what)),
    }
}

pub(crate) fn unknown(kind: ResourceKind, name: &str) -> Error {
    Error::Registry(RegistryError::Unknown {
        kind,
        name: name.to_string(),
    })
}

/// Create (or with `force`, reset) the registry with LocalSim defaults and
/// seed a default snapshot.
pub fn configure(registry: &Registry, profile: &str, force: bool) -> Result<Platform> {
    if registry.is_configured() && !force {
        return Err(Error::AlreadyConfigured(registry.dir().to_path_buf()));
    }
    let provider = provider_for_profile(profile, registry.dir())?;
    configure_with_provider(registry, profile, provider, force)
}

/// Like [`configure`] but with a caller-supplied provider instance.
pub fn configure_with_provider(
    registry: &Registry,
    profile: &str,
    provider: Arc<dyn Provider>,
    force: bool,
) -> Result<Platform> {
    if registry.is_configured() && !force {
        return Err(Error::AlreadyConfigured(registry.dir().to_path_buf()));
    }
    let seed = tempfile::tempdir()?;
    std::fs::write(
        seed.path().join("README.txt"),
        "Default shared data volume. Large, rarely changing inputs go here.\n",
    )?;
    let snapshot = provider.create_snapshot_from_dir(seed.path())?;
    registry.update(|st| {
        st.config = GlobalConfig {
            provider_profile: profile.to_string(),
            default_image: crate::provider::DEFAULT_IMAGE.to_string(),
            default_instance_type: "m2.2xlarge".to_string(),
            default_snapshot: snapshot.snapshot_id.clone(),
            default_instance_name: "hpc_instance".to_string(),
            default_cluster_name: "hpc_cluster".to_string(),
            default_cluster_size: 2,
            key_paths: [(
                "localsim_root".to_string(),
                localsim_root(registry.dir()).display().to_string(),
            )]
            .into_iter()
            .collect(),
            library_packages: Vec::new(),
        };
        Ok(())
    })?;
    Ok(Platform::new(registry.clone(), provider))
}
