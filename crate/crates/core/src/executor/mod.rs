//! Run job scripts on instances and clusters under an exclusive lock.
//!
//! A job script is invoked as
//! `<script> <run_dir> <role> <rank> <world_size> <node_file>` where `role`
//! is `single`, `master` or `worker`. On a cluster the master is rank 0 and
//! worker `k` (0-based) is rank `k + 1`; workers are placed on nodes with
//! [`schedule_slots`]. The node file lists `rank<TAB>node_tag<TAB>endpoint`
//! for every rank, endpoints being `127.0.0.1:<port>` addresses reserved
//! for the run.

mod monitor;
mod schedule;

pub use monitor::{supervise, ExitInfo, SupervisePolicy};
pub use schedule::{schedule_slots, Policy, SlotAssignment};

use std::fmt;
use std::fs;
use std::net::TcpListener;
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path, PathBuf};
use std::process::Child;
use std::time::Duration;

use log::{info, warn};

use crate::datasync::{self, Project, RUN_DIR_ENV};
use crate::platform::Platform;
use crate::provider::{cores_for_type, InstanceState, ProviderError, SpawnSpec};
use crate::registry::{Registry, ResourceKind};
use crate::{Error, Result};

/// Name of the node file written into each node's run directory.
pub const NODE_FILE: &str = "nodes.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Single,
    Master,
    Worker,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Single => "single",
            Role::Master => "master",
            Role::Worker => "worker",
        })
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Role::Single),
            "master" => Ok(Role::Master),
            "worker" => Ok(Role::Worker),
            other => Err(Error::InvalidArgument(format!("unknown role `{other}`"))),
        }
    }
}

/// Asks the user to pick a script from the candidates; `None` cancels.
pub type ScriptPrompt<'a> = &'a dyn Fn(&[String]) -> Option<String>;

pub struct RunOptions<'a> {
    pub projectdir: Option<PathBuf>,
    pub rscript: Option<String>,
    pub runname: String,
    pub policy: Policy,
    /// Number of worker processes; defaults to one per core of the cluster.
    pub processes: Option<usize>,
    /// Time workers may outlive a successful master before being killed.
    pub grace: Duration,
    pub timeout: Option<Duration>,
    /// Interactive script chooser. Without one a missing script is an error.
    pub prompt: Option<ScriptPrompt<'a>>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            projectdir: None,
            rscript: None,
            runname: String::new(),
            policy: Policy::default(),
            processes: None,
            grace: Duration::from_secs(5),
            timeout: None,
            prompt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessOutcome {
    pub rank: usize,
    pub role: Role,
    pub node_tag: String,
    pub exit: ExitInfo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    /// 0 iff every process exited 0; otherwise the master's code if it
    /// failed, else the first failing worker's code.
    pub exit_code: i32,
    /// Run directory on the master (host path).
    pub run_dir: PathBuf,
    pub processes: Vec<ProcessOutcome>,
}

/// Holds a resource's `in_use` flag for the lifetime of a run.
pub struct RunLock<'a> {
    registry: &'a Registry,
    kind: ResourceKind,
    name: String,
}

impl<'a> RunLock<'a> {
    pub fn acquire(registry: &'a Registry, kind: ResourceKind, name: &str) -> Result<Self> {
        registry.try_acquire(kind, name)?;
        Ok(Self {
            registry,
            kind,
            name: name.to_string(),
        })
    }
}

impl Drop for RunLock<'_> {
    fn drop(&mut self) {
        // TODO: carry an ownership token so a guard cannot clear a lock that
        // was manually released and then taken by another run.
        if let Err(e) = self.registry.set_lock(self.kind, &self.name, false) {
            warn!("could not release lock on {} `{}`: {e}", self.kind, self.name);
        }
    }
}

fn project_for(opts: &RunOptions) -> Result<Project> {
    match &opts.projectdir {
        Some(dir) => Project::open(dir),
        None => Project::open(&std::env::current_dir()?),
    }
}

fn check_relative(script: &str) -> Result<PathBuf> {
    let path = PathBuf::from(script);
    if script.is_empty() || path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(Error::InvalidArgument(format!(
            "script `{script}` must be a path inside the project"
        )));
    }
    Ok(path)
}

fn choose_script(remote_project: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let script = match &opts.rscript {
        Some(s) => s.clone(),
        None => {
            let candidates = Project::open(remote_project)?.script_names();
            match opts.prompt {
                Some(prompt) if !candidates.is_empty() => prompt(&candidates)
                    .ok_or(Error::MissingScript { candidates })?,
                _ => return Err(Error::MissingScript { candidates }),
            }
        }
    };
    let rel = check_relative(&script)?;
    if !remote_project.join(&rel).is_file() {
        return Err(Error::ScriptNotFound(script));
    }
    Ok(rel)
}

/// Command prefix for a script: run directly when executable, otherwise
/// through an interpreter chosen by extension.
fn script_argv(host_script: &Path) -> Result<Vec<String>> {
    let path = host_script.display().to_string();
    let mode = fs::metadata(host_script)?.permissions().mode();
    if mode & 0o111 != 0 {
        return Ok(vec![path]);
    }
    let interpreter = match host_script.extension().and_then(|e| e.to_str()) {
        Some("R") | Some("r") => "Rscript",
        Some("py") => "python3",
        _ => "sh",
    };
    Ok(vec![interpreter.to_string(), path])
}

fn unreachable(tag: &str, e: ProviderError) -> Error {
    Error::NodeUnreachable {
        node: tag.to_string(),
        reason: e.to_string(),
    }
}

fn reserve_endpoint() -> Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    Ok(listener.local_addr()?.to_string())
}

struct Launch<'a> {
    p: &'a Platform,
    project: &'a Project,
    runname: &'a str,
    script: &'a Path,
    node_file: &'a str,
    world_size: usize,
}

impl Launch<'_> {
    fn spawn(&self, id: &str, tag: &str, role: Role, rank: usize) -> Result<Child> {
        let host = |path: &Path| self.p.provider.host_path(id, path).map_err(|e| unreachable(tag, e));
        let remote_run = datasync::remote_run_path(self.project, self.runname);
        let run_dir = host(&remote_run)?;
        let mut argv = script_argv(&host(&datasync::remote_project_path(self.project).join(self.script))?)?;
        argv.extend([
            run_dir.display().to_string(),
            role.to_string(),
            rank.to_string(),
            self.world_size.to_string(),
            run_dir.join(self.node_file).display().to_string(),
        ]);
        let spec = SpawnSpec {
            argv,
            workdir: datasync::remote_project_path(self.project),
            env: vec![(RUN_DIR_ENV.to_string(), run_dir.display().to_string())],
            stdout: remote_run.join(format!("{role}-{rank}.out")),
            stderr: remote_run.join(format!("{role}-{rank}.err")),
        };
        self.p.provider.spawn_on(id, &spec).map_err(|e| match e {
            ProviderError::Io(io) => Error::Io(io),
            other => unreachable(tag, other),
        })
    }
}

fn kill_all(children: Vec<Child>) {
    let policy = SupervisePolicy {
        master: None,
        grace: Duration::ZERO,
        timeout: Some(Duration::ZERO),
    };
    supervise(children, policy);
}

fn aggregate(processes: &[ProcessOutcome]) -> i32 {
    processes
        .iter()
        .find(|p| p.rank == 0 && !p.exit.success())
        .or_else(|| processes.iter().find(|p| !p.exit.success()))
        .map_or(0, |p| p.exit.code)
}

/// Run a script on a single instance.
pub fn run_on_instance(p: &Platform, iname: Option<&str>, opts: &RunOptions) -> Result<RunOutcome> {
    let record = p.instance(iname)?;
    let _lock = RunLock::acquire(&p.registry, ResourceKind::Instance, &record.name)?;
    let project = project_for(opts)?;
    let id = record.provider_id.as_str();
    let tag = record.name.as_str();
    let remote_project = p
        .provider
        .host_path(id, &datasync::remote_project_path(&project))
        .map_err(|e| unreachable(tag, e))?;
    if !remote_project.is_dir() {
        return Err(Error::ProjectNotSynced {
            project: project.name.clone(),
            node: tag.to_string(),
            path: datasync::remote_project_path(&project),
        });
    }
    let script = choose_script(&remote_project, opts)?;
    let run_dir = prepare_run_dir(p, id, tag, &project, &opts.runname)?;
    fs::write(run_dir.join(NODE_FILE), format!("0\t{tag}\t-\n"))?;

    let launch = Launch {
        p,
        project: &project,
        runname: &opts.runname,
        script: &script,
        node_file: NODE_FILE,
        world_size: 1,
    };
    info!("running {} on instance {tag} as run {}", script.display(), opts.runname);
    let child = launch.spawn(id, tag, Role::Single, 0)?;
    let exits = supervise(
        vec![child],
        SupervisePolicy {
            master: Some(0),
            grace: opts.grace,
            timeout: opts.timeout,
        },
    );
    let processes = vec![ProcessOutcome {
        rank: 0,
        role: Role::Single,
        node_tag: tag.to_string(),
        exit: exits[0],
    }];
    Ok(RunOutcome {
        exit_code: aggregate(&processes),
        run_dir,
        processes,
    })
}

fn prepare_run_dir(p: &Platform, id: &str, tag: &str, project: &Project, runname: &str) -> Result<PathBuf> {
    if runname.is_empty() || check_relative(runname)?.components().count() != 1 {
        return Err(Error::InvalidArgument(format!("invalid run name `{runname}`")));
    }
    let dir = p
        .provider
        .host_path(id, &datasync::remote_run_path(project, runname))
        .map_err(|e| unreachable(tag, e))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Run a script on a cluster: one master process on the master node plus
/// worker processes placed by the scheduling policy.
pub fn run_on_cluster(p: &Platform, cname: Option<&str>, opts: &RunOptions) -> Result<RunOutcome> {
    let cluster = p.cluster(cname)?;
    let _lock = RunLock::acquire(&p.registry, ResourceKind::Cluster, &cluster.name)?;
    let project = project_for(opts)?;
    let nodes = datasync::cluster_nodes(&cluster);

    let mut instance_type = None;
    for (tag, id) in &nodes {
        let handle = p.provider.describe_instance(id).map_err(|e| unreachable(tag, e))?;
        if handle.state != InstanceState::Running {
            return Err(Error::NodeUnreachable {
                node: tag.clone(),
                reason: format!("instance {id} is {:?}", handle.state),
            });
        }
        instance_type.get_or_insert(handle.instance_type);
    }
    let cores = cores_for_type(instance_type.as_deref().unwrap_or_default());

    let (master_tag, master_id) = &nodes[0];
    let remote_project_rel = datasync::remote_project_path(&project);
    let master_project = p
        .provider
        .host_path(master_id, &remote_project_rel)
        .map_err(|e| unreachable(master_tag, e))?;
    if !master_project.is_dir() {
        return Err(Error::ProjectNotSynced {
            project: project.name.clone(),
            node: master_tag.clone(),
            path: remote_project_rel,
        });
    }
    let script = choose_script(&master_project, opts)?;

    let workers = opts.processes.unwrap_or(nodes.len() * cores);
    let slots = schedule_slots(nodes.len(), cores, workers, opts.policy)?;
    let mut table = vec![(0usize, 0usize, reserve_endpoint()?)];
    for &(k, node) in &slots.slots {
        table.push((k + 1, node, reserve_endpoint()?));
    }
    let node_file: String = table
        .iter()
        .map(|(rank, node, ep)| format!("{rank}\t{}\t{ep}\n", nodes[*node].0))
        .collect();

    let mut run_dir = PathBuf::new();
    for (i, (tag, id)) in nodes.iter().enumerate() {
        let dir = prepare_run_dir(p, id, tag, &project, &opts.runname)?;
        fs::write(dir.join(NODE_FILE), &node_file)?;
        if i == 0 {
            run_dir = dir;
            continue;
        }
        let node_project = p
            .provider
            .host_path(id, &remote_project_rel)
            .map_err(|e| unreachable(tag, e))?;
        let node_script = node_project.join(&script);
        if !node_script.is_file() {
            fs::create_dir_all(node_script.parent().expect("script has a parent"))?;
            fs::copy(master_project.join(&script), &node_script)?;
        }
    }

    let launch = Launch {
        p,
        project: &project,
        runname: &opts.runname,
        script: &script,
        node_file: NODE_FILE,
        world_size: table.len(),
    };
    info!(
        "running {} on cluster {} as run {}: 1 master + {workers} workers ({:?})",
        script.display(),
        cluster.name,
        opts.runname,
        opts.policy
    );
    let mut children = Vec::with_capacity(table.len());
    let mut meta = Vec::with_capacity(table.len());
    for (rank, node, _) in &table {
        let (tag, id) = &nodes[*node];
        let role = if *rank == 0 { Role::Master } else { Role::Worker };
        match launch.spawn(id, tag, role, *rank) {
            Ok(child) => {
                children.push(child);
                meta.push((*rank, role, tag.clone()));
            }
            Err(e) => {
                kill_all(children);
                return Err(e);
            }
        }
    }
    let exits = supervise(
        children,
        SupervisePolicy {
            master: Some(0),
            grace: opts.grace,
            timeout: opts.timeout,
        },
    );
    let processes: Vec<_> = meta
        .into_iter()
        .zip(exits)
        .map(|((rank, role, node_tag), exit)| ProcessOutcome {
            rank,
            role,
            node_tag,
            exit,
        })
        .collect();
    Ok(RunOutcome {
        exit_code: aggregate(&processes),
        run_dir,
        processes,
    })
}

/// Parse a node file into `(rank, node_tag, endpoint)` rows.
pub fn read_node_file(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut parts = line.split('\t');
            let (Some(rank), Some(tag), Some(ep), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::InvalidArgument(format!("malformed node file line `{line}`")));
            };
            let rank = rank
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad rank in `{line}`")))?;
            Ok((rank, tag.to_string(), ep.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_prefers_master_failure() {
        let mk = |rank, code| ProcessOutcome {
            rank,
            role: if rank == 0 { Role::Master } else { Role::Worker },
            node_tag: "n".into(),
            exit: ExitInfo {
                code,
                signal: None,
                killed: false,
            },
        };
        assert_eq!(aggregate(&[mk(0, 0), mk(1, 0)]), 0);
        assert_eq!(aggregate(&[mk(0, 0), mk(1, 4), mk(2, 5)]), 4);
        assert_eq!(aggregate(&[mk(0, 3), mk(1, 4)]), 3);
    }

    #[test]
    fn scripts_must_stay_inside_the_project() {
        assert!(check_relative("run.sh").is_ok());
        assert!(check_relative("bin/run.sh").is_ok());
        for bad in ["", "/bin/sh", "../x", "a/../../b", "./x"] {
            assert!(check_relative(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn interpreter_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path().join("model.R");
        fs::write(&r, "").unwrap();
        assert_eq!(script_argv(&r).unwrap()[0], "Rscript");
        let x = dir.path().join("job");
        fs::write(&x, "").unwrap();
        fs::set_permissions(&x, fs::Permissions::from_mode(0o755)).unwrap();
        assert_eq!(script_argv(&x).unwrap(), vec![x.display().to_string()]);
    }

    #[test]
    fn node_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(NODE_FILE);
        fs::write(&path, "0\tmaster\t127.0.0.1:5000\n1\tworker-1\t127.0.0.1:5001\n").unwrap();
        let rows = read_node_file(&path).unwrap();
        assert_eq!(rows[1], (1, "worker-1".to_string(), "127.0.0.1:5001".to_string()));
        fs::write(&path, "0\tmaster\n").unwrap();
        assert!(read_node_file(&path).is_err());
    }
}
