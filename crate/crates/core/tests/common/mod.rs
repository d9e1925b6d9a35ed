#![allow(dead_code)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use deskcloud::provider::{LocalSim, LocalSimOptions, ProvisioningModel};
use deskcloud::registry::Registry;
use deskcloud::{configure_with_provider, localsim_root, Platform, PROFILE_LOCALSIM};

pub struct TestEnv {
    pub dir: tempfile::TempDir,
    pub sim: Arc<LocalSim>,
    pub platform: Platform,
}

impl TestEnv {
    pub fn new() -> Self {
        Self::with_model(ProvisioningModel::zero())
    }

    pub fn with_model(model: ProvisioningModel) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let home = dir.path().join("home");
        let registry = Registry::open(&home);
        let sim = Arc::new(
            LocalSim::open(
                localsim_root(&home),
                LocalSimOptions {
                    model,
                    ..Default::default()
                },
            )
            .unwrap(),
        );
        let platform = configure_with_provider(&registry, PROFILE_LOCALSIM, sim.clone(), false).unwrap();
        Self { dir, sim, platform }
    }

    pub fn home(&self) -> PathBuf {
        self.dir.path().join("home")
    }

    /// A project directory next to the registry with the given scripts
    /// (name, shell body) and data files.
    pub fn project(&self, name: &str, scripts: &[(&str, &str)], data: &[(&str, &str)]) -> PathBuf {
        let root = self.dir.path().join("analyst").join(name);
        fs::create_dir_all(root.join("results")).unwrap();
        for (script, body) in scripts {
            write_script(&root.join(script), body);
        }
        for (file, body) in data {
            let path = root.join(file);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(path, body).unwrap();
        }
        root
    }
}

pub fn write_script(path: &Path, body: &str) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, format!("#!/bin/sh\n{body}\n")).unwrap();
    let mut perms = fs::metadata(path).unwrap().permissions();
    perms.set_mode(0o755);
    fs::set_permissions(path, perms).unwrap();
}
