//! Analyst-side configuration and resource registry.
//!
//! Four files live in one directory (`$P2RAC_HOME`, default `~/.p2rac`):
//!
//! * `config.ini`    global defaults used by every command
//! * `instances.ini` one section per registered instance
//! * `clusters.ini`  one section per registered cluster
//! * `rlibs.txt`     library packages installed on new nodes, one per line
//!
//! Every write goes through a temp-file-and-rename, and all access is
//! serialized by an advisory lock file next to the registry.

mod ini;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fsutil::{self, FileLock};
use ini::{IniError, Section};

pub const HOME_ENV: &str = "P2RAC_HOME";
pub const CONFIG_FILE: &str = "config.ini";
pub const INSTANCES_FILE: &str = "instances.ini";
pub const CLUSTERS_FILE: &str = "clusters.ini";
pub const LIBRARIES_FILE: &str = "rlibs.txt";
const LOCK_FILE: &str = ".registry.lock";

pub type Result<T, E = RegistryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Instance,
    Cluster,
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceKind::Instance => "instance",
            ResourceKind::Cluster => "cluster",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: duplicate section [{name}]")]
    DuplicateSection {
        file: String,
        line: usize,
        name: String,
    },
    #[error("{kind} `{name}` already exists")]
    Duplicate { kind: ResourceKind, name: String },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: ResourceKind, name: String },
    #[error("{kind} `{name}` is in use")]
    InUse { kind: ResourceKind, name: String },
    #[error("invalid registry state: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalConfig {
    pub provider_profile: String,
    pub default_image: String,
    pub default_instance_type: String,
    pub default_snapshot: String,
    pub default_instance_name: String,
    pub default_cluster_name: String,
    pub default_cluster_size: usize,
    pub key_paths: BTreeMap<String, String>,
    pub library_packages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub name: String,
    pub public_address: String,
    pub volume_id: Option<String>,
    pub description: String,
    pub in_use: bool,
    pub provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub name: String,
    pub size: usize,
    pub master_address: String,
    pub worker_addresses: Vec<String>,
    pub volume_id: Option<String>,
    pub description: String,
    pub in_use: bool,
    /// Master first, then workers in the same order as `worker_addresses`.
    pub provider_ids: Vec<String>,
}

impl ClusterRecord {
    pub fn master_id(&self) -> &str {
        &self.provider_ids[0]
    }

    pub fn worker_ids(&self) -> &[String] {
        &self.provider_ids[1..]
    }
}

/// An immutable snapshot of everything the registry holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryState {
    pub config: GlobalConfig,
    pub instances: BTreeMap<String, InstanceRecord>,
    pub clusters: BTreeMap<String, ClusterRecord>,
}

/// Names become INI section headers, so keep them to a safe alphabet.
pub fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(RegistryError::Invalid(format!(
            "resource name `{name}` must be non-empty and use only [A-Za-z0-9_.-]"
        )))
    }
}

impl RegistryState {
    pub fn validate(&self) -> Result<()> {
        for (key, rec) in &self.instances {
            validate_name(key)?;
            if key != &rec.name {
                return Err(RegistryError::Invalid(format!(
                    "instance keyed `{key}` is named `{}`",
                    rec.name
                )));
            }
            check_optional_id(&rec.volume_id)?;
        }
        for (key, rec) in &self.clusters {
            validate_name(key)?;
            if key != &rec.name {
                return Err(RegistryError::Invalid(format!(
                    "cluster keyed `{key}` is named `{}`",
                    rec.name
                )));
            }
            if rec.size < 1 || rec.size != 1 + rec.worker_addresses.len() {
                return Err(RegistryError::Invalid(format!(
                    "cluster `{key}` has size {} but {} workers",
                    rec.size,
                    rec.worker_addresses.len()
                )));
            }
            if rec.provider_ids.len() != rec.size {
                return Err(RegistryError::Invalid(format!(
                    "cluster `{key}` lists {} provider ids for size {}",
                    rec.provider_ids.len(),
                    rec.size
                )));
            }
            if rec
                .worker_addresses
                .iter()
                .chain(&rec.provider_ids)
                .any(|s| s.is_empty())
            {
                return Err(RegistryError::Invalid(format!(
                    "cluster `{key}` has an empty address or id"
                )));
            }
            check_optional_id(&rec.volume_id)?;
        }
        Ok(())
    }

    pub fn in_use(&self, kind: ResourceKind, name: &str) -> Result<bool> {
        match kind {
            ResourceKind::Instance => self.instances.get(name).map(|r| r.in_use),
            ResourceKind::Cluster => self.clusters.get(name).map(|r| r.in_use),
        }
        .ok_or_else(|| RegistryError::Unknown {
            kind,
            name: name.to_string(),
        })
    }

    fn set_in_use(&mut self, kind: ResourceKind, name: &str, in_use: bool) -> Result<()> {
        let flag = match kind {
            ResourceKind::Instance => self.instances.get_mut(name).map(|r| &mut r.in_use),
            ResourceKind::Cluster => self.clusters.get_mut(name).map(|r| &mut r.in_use),
        }
        .ok_or_else(|| RegistryError::Unknown {
            kind,
            name: name.to_string(),
        })?;
        *flag = in_use;
        Ok(())
    }
}

fn check_optional_id(id: &Option<String>) -> Result<()> {
    if matches!(id.as_deref(), Some("")) {
        return Err(RegistryError::Invalid("empty volume id".into()));
    }
    Ok(())
}

/// Handle on the registry directory.
#[derive(Debug, Clone)]
pub struct Registry {
    dir: PathBuf,
}

impl Registry {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `$P2RAC_HOME`, falling back to `~/.p2rac`.
    pub fn default_dir() -> PathBuf {
        if let Some(dir) = std::env::var_os(HOME_ENV) {
            return PathBuf::from(dir);
        }
        let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
        home.join(".p2rac")
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn is_configured(&self) -> bool {
        self.dir.join(CONFIG_FILE).is_file()
    }

    pub fn load(&self) -> Result<RegistryState> {
        let _lock = FileLock::shared(&self.dir.join(LOCK_FILE))?;
        self.read_unlocked()
    }

    pub fn save(&self, state: &RegistryState) -> Result<()> {
        state.validate()?;
        let _lock = FileLock::exclusive(&self.dir.join(LOCK_FILE))?;
        self.write_unlocked(state)
    }

    /// Read-modify-write under the exclusive lock. Nothing is written if
    /// `f` fails.
    pub fn update<T>(&self, f: impl FnOnce(&mut RegistryState) -> Result<T>) -> Result<T> {
        let _lock = FileLock::exclusive(&self.dir.join(LOCK_FILE))?;
        let mut state = self.read_unlocked()?;
        let out = f(&mut state)?;
        state.validate()?;
        self.write_unlocked(&state)?;
        Ok(out)
    }

    pub fn register_instance(&self, record: InstanceRecord) -> Result<()> {
        validate_name(&record.name)?;
        self.update(|st| {
            if st.instances.contains_key(&record.name) {
                return Err(RegistryError::Duplicate {
                    kind: ResourceKind::Instance,
                    name: record.name.clone(),
                });
            }
            st.instances.insert(record.name.clone(), record);
            Ok(())
        })
    }

    pub fn register_cluster(&self, record: ClusterRecord) -> Result<()> {
        validate_name(&record.name)?;
        self.update(|st| {
            if st.clusters.contains_key(&record.name) {
                return Err(RegistryError::Duplicate {
                    kind: ResourceKind::Cluster,
                    name: record.name.clone(),
                });
            }
            st.clusters.insert(record.name.clone(), record);
            Ok(())
        })
    }

    pub fn deregister_instance(&self, name: &str) -> Result<InstanceRecord> {
        self.update(|st| {
            st.instances.remove(name).ok_or_else(|| RegistryError::Unknown {
                kind: ResourceKind::Instance,
                name: name.to_string(),
            })
        })
    }

    pub fn deregister_cluster(&self, name: &str) -> Result<ClusterRecord> {
        self.update(|st| {
            st.clusters.remove(name).ok_or_else(|| RegistryError::Unknown {
                kind: ResourceKind::Cluster,
                name: name.to_string(),
            })
        })
    }

    pub fn set_lock(&self, kind: ResourceKind, name: &str, in_use: bool) -> Result<()> {
        self.update(|st| st.set_in_use(kind, name, in_use))
    }

    /// Atomically flip `in_use` from false to true; fails with `InUse` if
    /// someone else holds it.
    pub fn try_acquire(&self, kind: ResourceKind, name: &str) -> Result<()> {
        self.update(|st| {
            if st.in_use(kind, name)? {
                return Err(RegistryError::InUse {
                    kind,
                    name: name.to_string(),
                });
            }
            st.set_in_use(kind, name, true)
        })
    }

    /// Per-name lock serializing lifecycle operations on one resource.
    pub fn lifecycle_lock(&self, kind: ResourceKind, name: &str) -> Result<FileLock> {
        validate_name(name)?;
        Ok(FileLock::exclusive(
            &self.dir.join("locks").join(format!("{kind}-{name}.lock")),
        )?)
    }

    /// Lock serializing data transfers that touch one provider instance.
    pub fn node_lock(&self, provider_id: &str) -> Result<FileLock> {
        validate_name(provider_id)?;
        Ok(FileLock::exclusive(
            &self.dir.join("locks").join(format!("sync-{provider_id}.lock")),
        )?)
    }

    fn read_unlocked(&self) -> Result<RegistryState> {
        let mut state = RegistryState::default();
        if let Some(sections) = self.read_ini(CONFIG_FILE)? {
            state.config = config_from_sections(&sections)?;
        }
        if let Some(text) = read_optional(&self.dir.join(LIBRARIES_FILE))? {
            state.config.library_packages = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect();
        }
        if let Some(sections) = self.read_ini(INSTANCES_FILE)? {
            for s in &sections {
                let rec = instance_from_section(s)?;
                state.instances.insert(rec.name.clone(), rec);
            }
        }
        if let Some(sections) = self.read_ini(CLUSTERS_FILE)? {
            for s in &sections {
                let rec = cluster_from_section(s)?;
                state.clusters.insert(rec.name.clone(), rec);
            }
        }
        Ok(state)
    }

    fn write_unlocked(&self, state: &RegistryState) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        let config = ini::render("global settings", &config_to_sections(&state.config));
        fsutil::atomic_write(&self.dir.join(CONFIG_FILE), config.as_bytes())?;
        let instances: Vec<Section> = state.instances.values().map(instance_to_section).collect();
        fsutil::atomic_write(
            &self.dir.join(INSTANCES_FILE),
            ini::render("registered instances", &instances).as_bytes(),
        )?;
        let clusters: Vec<Section> = state.clusters.values().map(cluster_to_section).collect();
        fsutil::atomic_write(
            &self.dir.join(CLUSTERS_FILE),
            ini::render("registered clusters", &clusters).as_bytes(),
        )?;
        let mut libs = String::new();
        for lib in &state.config.library_packages {
            libs.push_str(lib);
            libs.push('\n');
        }
        fsutil::atomic_write(&self.dir.join(LIBRARIES_FILE), libs.as_bytes())?;
        Ok(())
    }

    fn read_ini(&self, file: &str) -> Result<Option<Vec<Section>>> {
        let Some(text) = read_optional(&self.dir.join(file))? else {
            return Ok(None);
        };
        ini::parse(&text).map(Some).map_err(|e| match e {
            IniError::Syntax { line, message } => RegistryError::Parse {
                file: file.to_string(),
                line,
                message,
            },
            IniError::DuplicateSection { line, name } => RegistryError::DuplicateSection {
                file: file.to_string(),
                line,
                name,
            },
        })
    }
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(text)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

struct Fields<'a> {
    file: &'static str,
    section: &'a Section,
}

impl Fields<'_> {
    fn err(&self, message: String) -> RegistryError {
        RegistryError::Parse {
            file: self.file.to_string(),
            line: self.section.line,
            message: format!("[{}]: {message}", self.section.name),
        }
    }

    fn string(&self, key: &str) -> Result<String> {
        let raw = self
            .section
            .get(key)
            .ok_or_else(|| self.err(format!("missing key `{key}`")))?;
        ini::unescape(raw).map_err(|m| self.err(m))
    }

    fn string_or_default(&self, key: &str) -> Result<String> {
        match self.section.get(key) {
            Some(raw) => ini::unescape(raw).map_err(|m| self.err(m)),
            None => Ok(String::new()),
        }
    }

    fn optional(&self, key: &str) -> Result<Option<String>> {
        self.section
            .get(key)
            .map(|raw| ini::unescape(raw).map_err(|m| self.err(m)))
            .transpose()
    }

    fn list(&self, key: &str) -> Result<Vec<String>> {
        let raw = self
            .section
            .get(key)
            .ok_or_else(|| self.err(format!("missing key `{key}`")))?;
        ini::unescape_list(raw).map_err(|m| self.err(m))
    }

    fn boolean(&self, key: &str) -> Result<bool> {
        match self.string(key)?.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(self.err(format!("`{key}` must be true or false, found `{other}`"))),
        }
    }

    fn number(&self, key: &str) -> Result<usize> {
        let raw = self.string(key)?;
        raw.parse()
            .map_err(|_| self.err(format!("`{key}` must be a non-negative integer, found `{raw}`")))
    }
}

fn config_to_sections(cfg: &GlobalConfig) -> Vec<Section> {
    let mut global = Section::new("global");
    global.push("provider_profile", ini::escape(&cfg.provider_profile));
    global.push("default_image", ini::escape(&cfg.default_image));
    global.push("default_instance_type", ini::escape(&cfg.default_instance_type));
    global.push("default_snapshot", ini::escape(&cfg.default_snapshot));
    global.push("default_instance_name", ini::escape(&cfg.default_instance_name));
    global.push("default_cluster_name", ini::escape(&cfg.default_cluster_name));
    global.push("default_cluster_size", cfg.default_cluster_size.to_string());
    let mut keys = Section::new("key_paths");
    for (k, v) in &cfg.key_paths {
        keys.push(k, ini::escape(v));
    }
    vec![global, keys]
}

fn config_from_sections(sections: &[Section]) -> Result<GlobalConfig> {
    let mut cfg = GlobalConfig::default();
    for s in sections {
        let f = Fields {
            file: CONFIG_FILE,
            section: s,
        };
        match s.name.as_str() {
            "global" => {
                cfg.provider_profile = f.string_or_default("provider_profile")?;
                cfg.default_image = f.string_or_default("default_image")?;
                cfg.default_instance_type = f.string_or_default("default_instance_type")?;
                cfg.default_snapshot = f.string_or_default("default_snapshot")?;
                cfg.default_instance_name = f.string_or_default("default_instance_name")?;
                cfg.default_cluster_name = f.string_or_default("default_cluster_name")?;
                cfg.default_cluster_size = match s.get("default_cluster_size") {
                    Some(_) => f.number("default_cluster_size")?,
                    None => 0,
                };
            }
            "key_paths" => {
                for (k, _) in &s.entries {
                    cfg.key_paths.insert(k.clone(), f.string(k)?);
                }
            }
            other => return Err(f.err(format!("unknown section `{other}`"))),
        }
    }
    Ok(cfg)
}

fn instance_to_section(rec: &InstanceRecord) -> Section {
    let mut s = Section::new(&rec.name);
    s.push("public_address", ini::escape(&rec.public_address));
    if let Some(v) = &rec.volume_id {
        s.push("volume_id", ini::escape(v));
    }
    s.push("description", ini::escape(&rec.description));
    s.push("in_use", rec.in_use.to_string());
    s.push("provider_id", ini::escape(&rec.provider_id));
    s
}

fn instance_from_section(s: &Section) -> Result<InstanceRecord> {
    let f = Fields {
        file: INSTANCES_FILE,
        section: s,
    };
    Ok(InstanceRecord {
        name: s.name.clone(),
        public_address: f.string("public_address")?,
        volume_id: f.optional("volume_id")?,
        description: f.string_or_default("description")?,
        in_use: f.boolean("in_use")?,
        provider_id: f.string("provider_id")?,
    })
}

fn cluster_to_section(rec: &ClusterRecord) -> Section {
    let mut s = Section::new(&rec.name);
    s.push("size", rec.size.to_string());
    s.push("master_address", ini::escape(&rec.master_address));
    s.push("worker_addresses", ini::escape_list(&rec.worker_addresses));
    if let Some(v) = &rec.volume_id {
        s.push("volume_id", ini::escape(v));
    }
    s.push("description", ini::escape(&rec.description));
    s.push("in_use", rec.in_use.to_string());
    s.push("provider_ids", ini::escape_list(&rec.provider_ids));
    s
}

fn cluster_from_section(s: &Section) -> Result<ClusterRecord> {
    let f = Fields {
        file: CLUSTERS_FILE,
        section: s,
    };
    let rec = ClusterRecord {
        name: s.name.clone(),
        size: f.number("size")?,
        master_address: f.string("master_address")?,
        worker_addresses: f.list("worker_addresses")?,
        volume_id: f.optional("volume_id")?,
        description: f.string_or_default("description")?,
        in_use: f.boolean("in_use")?,
        provider_ids: f.list("provider_ids")?,
    };
    if rec.size != 1 + rec.worker_addresses.len() {
        return Err(f.err(format!(
            "size {} does not match {} worker addresses",
            rec.size,
            rec.worker_addresses.len()
        )));
    }
    Ok(rec)
}
