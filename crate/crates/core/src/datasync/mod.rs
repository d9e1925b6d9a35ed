//! Differential project transfer to instances and result gathering back to
//! the analyst's machine.
//!
//! A file is copied when it is missing at the destination, when sizes
//! differ, or when modification times differ. Files whose size and mtime
//! both match are compared by content digest before being skipped. Copied
//! files receive the source mtime so the next pass sees them as current.
//! Deletions at the source are never propagated.

mod project;

pub use project::{Project, RESULTS_DIR};

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use walkdir::WalkDir;

use crate::fsutil::file_digest;
use crate::platform::Platform;
use crate::provider::HOME_PATH;
use crate::registry::ClusterRecord;
use crate::{Error, Result};

/// Environment variable carrying the run directory to job processes.
pub const RUN_DIR_ENV: &str = "DESKCLOUD_RUN_DIR";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncReport {
    pub files_examined: usize,
    pub files_transferred: usize,
    pub bytes_transferred: u64,
    /// Source entries that could not be read or written, with the reason.
    pub errors: Vec<(PathBuf, String)>,
}

impl SyncReport {
    fn absorb(&mut self, other: SyncReport) {
        self.files_examined += other.files_examined;
        self.files_transferred += other.files_transferred;
        self.bytes_transferred += other.bytes_transferred;
        self.errors.extend(other.errors);
    }
}

/// Outcome of one node's share of a multi-node transfer.
#[derive(Debug)]
pub struct NodeSync {
    pub node_tag: String,
    pub provider_id: String,
    pub outcome: Result<SyncReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatherScope {
    #[default]
    FromMaster,
    FromWorkers,
    FromAll,
}

/// Where gathered results landed and what each node contributed.
#[derive(Debug)]
pub struct Gathered {
    pub path: PathBuf,
    pub nodes: Vec<NodeSync>,
    /// Node tags that had no directory for the requested run.
    pub missing: Vec<String>,
}

impl Gathered {
    pub fn found_any(&self) -> bool {
        self.nodes.iter().any(|n| n.outcome.is_ok())
    }
}

/// Mirror the host directory `src` into the host directory `dst`.
pub fn sync_tree(src: &Path, dst: &Path) -> io::Result<SyncReport> {
    if !fs::metadata(src)?.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{} is not a directory", src.display()),
        ));
    }
    fs::create_dir_all(dst)?;
    let mut report = SyncReport::default();
    for entry in WalkDir::new(src).follow_links(true).sort_by_file_name().min_depth(1) {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                let path = e.path().map(Path::to_path_buf).unwrap_or_default();
                report.errors.push((path, e.to_string()));
                continue;
            }
        };
        let rel = entry.path().strip_prefix(src).expect("walk stays under root");
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            if let Err(e) = fs::create_dir_all(&target) {
                report.errors.push((rel.to_path_buf(), e.to_string()));
            }
            continue;
        }
        if !entry.file_type().is_file() {
            continue;
        }
        report.files_examined += 1;
        match sync_file(entry.path(), &target) {
            Ok(Some(bytes)) => {
                report.files_transferred += 1;
                report.bytes_transferred += bytes;
            }
            Ok(None) => {}
            Err(e) => report.errors.push((rel.to_path_buf(), e.to_string())),
        }
    }
    Ok(report)
}

/// Copy one file if it differs; returns the bytes copied, or `None` if skipped.
fn sync_file(src: &Path, dst: &Path) -> io::Result<Option<u64>> {
    let meta = fs::metadata(src)?;
    let mtime = meta.modified()?;
    if let Ok(existing) = fs::metadata(dst) {
        if existing.is_file()
            && existing.len() == meta.len()
            && existing.modified()? == mtime
            && file_digest(src)? == file_digest(dst)?
        {
            return Ok(None);
        }
    }
    let dir = dst.parent().expect("destination has a parent");
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    let bytes = io::copy(&mut fs::File::open(src)?, tmp.as_file_mut())?;
    let file = tmp.as_file();
    file.set_permissions(fs::Permissions::from_mode(meta.permissions().mode()))?;
    file.set_modified(mtime)?;
    tmp.persist(dst).map_err(|e| e.error)?;
    Ok(Some(bytes))
}

/// Mirror `src` to the instance-relative path `dst` on `target`.
///
/// Transfers to the same instance are serialized across processes.
pub fn sync_dir(p: &Platform, src: &Path, dst: &Path, target: &str) -> Result<SyncReport> {
    let host_dst = p.provider.host_path(target, dst)?;
    let _guard = p.registry.node_lock(target)?;
    let report = sync_tree(src, &host_dst)?;
    debug!(
        "sync {} -> {target}:{}: {}/{} files, {} bytes",
        src.display(),
        dst.display(),
        report.files_transferred,
        report.files_examined,
        report.bytes_transferred
    );
    Ok(report)
}

/// Instance-relative location of a project on a node.
pub fn remote_project_path(project: &Project) -> PathBuf {
    Path::new(HOME_PATH).join(&project.name)
}

/// Instance-relative location of a run's results on a node.
pub fn remote_run_path(project: &Project, runname: &str) -> PathBuf {
    remote_project_path(project).join(RESULTS_DIR).join(runname)
}

/// `(node tag, provider id)` for each node of a cluster, master first.
pub fn cluster_nodes(cluster: &ClusterRecord) -> Vec<(String, String)> {
    let mut nodes = vec![("master".to_string(), cluster.master_id().to_string())];
    nodes.extend(
        cluster
            .worker_ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (format!("worker-{}", i + 1), id.clone())),
    );
    nodes
}

fn project_for(projectdir: Option<&Path>) -> Result<Project> {
    match projectdir {
        Some(dir) => Project::open(dir),
        None => Project::open(&std::env::current_dir()?),
    }
}

pub fn send_to_instance(
    p: &Platform,
    iname: Option<&str>,
    projectdir: Option<&Path>,
) -> Result<SyncReport> {
    let record = p.instance(iname)?;
    let project = project_for(projectdir)?;
    sync_dir(p, &project.root, &remote_project_path(&project), &record.provider_id)
}

pub fn send_to_master(
    p: &Platform,
    cname: Option<&str>,
    projectdir: Option<&Path>,
) -> Result<SyncReport> {
    let cluster = p.cluster(cname)?;
    let project = project_for(projectdir)?;
    sync_dir(p, &project.root, &remote_project_path(&project), cluster.master_id())
}

/// Mirror the project onto every node of a cluster concurrently. Per-node
/// failures are reported in the returned list rather than aborting the rest.
pub fn send_to_cluster_nodes(
    p: &Platform,
    cname: Option<&str>,
    projectdir: Option<&Path>,
) -> Result<Vec<NodeSync>> {
    let cluster = p.cluster(cname)?;
    let project = project_for(projectdir)?;
    let dst = remote_project_path(&project);
    let nodes = cluster_nodes(&cluster);
    Ok(std::thread::scope(|s| {
        let handles: Vec<_> = nodes
            .into_iter()
            .map(|(tag, id)| {
                let (project, dst) = (&project, &dst);
                s.spawn(move || NodeSync {
                    outcome: sync_dir(p, &project.root, dst, &id),
                    node_tag: tag,
                    provider_id: id,
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sync thread panicked"))
            .collect()
    }))
}

fn check_runname(runname: &str) -> Result<()> {
    let ok = !runname.is_empty()
        && runname != "."
        && runname != ".."
        && runname
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "run name `{runname}` must be non-empty and use only letters, digits, `_`, `-` and `.`"
        )))
    }
}

/// Local directory that receives gathered results for a run.
pub fn gathered_run_dir(project: &Project, runname: &str) -> PathBuf {
    project
        .root
        .parent()
        .unwrap_or_else(|| Path::new("/"))
        .join(format!("{}_results", project.name))
        .join(runname)
}

fn gather(p: &Platform, project: &Project, runname: &str, nodes: &[(String, String)]) -> Result<Gathered> {
    check_runname(runname)?;
    let local = gathered_run_dir(project, runname);
    fs::create_dir_all(&local)?;
    let remote = remote_run_path(project, runname);
    let mut gathered = Gathered {
        path: local.clone(),
        nodes: Vec::new(),
        missing: Vec::new(),
    };
    for (tag, id) in nodes {
        let outcome = p
            .provider
            .host_path(id, &remote)
            .map_err(Error::from)
            .and_then(|host| {
                if !host.is_dir() {
                    return Ok(None);
                }
                let _guard = p.registry.node_lock(id)?;
                Ok(Some(sync_tree(&host, &local.join(tag))?))
            });
        match outcome {
            Ok(None) => gathered.missing.push(tag.clone()),
            Ok(Some(report)) => gathered.nodes.push(NodeSync {
                node_tag: tag.clone(),
                provider_id: id.clone(),
                outcome: Ok(report),
            }),
            Err(e) => gathered.nodes.push(NodeSync {
                node_tag: tag.clone(),
                provider_id: id.clone(),
                outcome: Err(e),
            }),
        }
    }
    if !gathered.found_any() {
        warn!(
            "no results for run `{runname}` on {}; created empty {}",
            nodes.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>().join(", "),
            local.display()
        );
    }
    Ok(gathered)
}

/// Gather a run's results from the scoped cluster nodes into
/// `<parent>/<project>_results/<runname>/<node-tag>/`.
pub fn get_results(
    p: &Platform,
    cname: Option<&str>,
    projectdir: Option<&Path>,
    runname: &str,
    scope: GatherScope,
) -> Result<Gathered> {
    check_runname(runname)?;
    let cluster = p.cluster(cname)?;
    let project = project_for(projectdir)?;
    let nodes = cluster_nodes(&cluster);
    let chosen: Vec<_> = match scope {
        GatherScope::FromMaster => nodes[..1].to_vec(),
        GatherScope::FromWorkers => nodes[1..].to_vec(),
        GatherScope::FromAll => nodes,
    };
    gather(p, &project, runname, &chosen)
}

/// Gather a run's results from a single instance; the node tag is the
/// instance name.
pub fn get_results_from_instance(
    p: &Platform,
    iname: Option<&str>,
    projectdir: Option<&Path>,
    runname: &str,
) -> Result<Gathered> {
    check_runname(runname)?;
    let record = p.instance(iname)?;
    let project = project_for(projectdir)?;
    gather(p, &project, runname, &[(record.name.clone(), record.provider_id.clone())])
}

/// Sum of the successful per-node reports.
pub fn total(nodes: &[NodeSync]) -> SyncReport {
    let mut sum = SyncReport::default();
    for n in nodes {
        if let Ok(r) = &n.outcome {
            sum.absorb(r.clone());
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsutil::{content_manifest, tree_digest};
    use proptest::prelude::*;
    use std::time::{Duration, SystemTime};

    fn fixture(n: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..n {
            let sub = dir.path().join(format!("d{}", i % 7));
            fs::create_dir_all(&sub).unwrap();
            fs::write(sub.join(format!("f{i}.dat")), format!("payload {i}").repeat(i + 1)).unwrap();
        }
        dir
    }

    #[test]
    fn cold_copy_then_idempotent_then_one_change() {
        let src = fixture(100);
        let dst = tempfile::tempdir().unwrap();
        let first = sync_tree(src.path(), dst.path()).unwrap();
        assert_eq!((first.files_examined, first.files_transferred), (100, 100));
        assert!(first.errors.is_empty());
        let digest = tree_digest(dst.path()).unwrap();

        let second = sync_tree(src.path(), dst.path()).unwrap();
        assert_eq!(second.files_transferred, 0);
        assert_eq!(second.bytes_transferred, 0);
        assert_eq!(tree_digest(dst.path()).unwrap(), digest);

        let changed = src.path().join("d3/f10.dat");
        fs::write(&changed, "new content").unwrap();
        let third = sync_tree(src.path(), dst.path()).unwrap();
        assert_eq!(third.files_transferred, 1);
        assert_eq!(third.bytes_transferred, 11);
        assert_eq!(
            file_digest(&dst.path().join("d3/f10.dat")).unwrap(),
            file_digest(&changed).unwrap()
        );
        assert_eq!(content_manifest(src.path()).unwrap(), content_manifest(dst.path()).unwrap());
    }

    #[test]
    fn same_size_same_mtime_different_content_is_detected() {
        let src = fixture(3);
        let dst = tempfile::tempdir().unwrap();
        sync_tree(src.path(), dst.path()).unwrap();
        let path = src.path().join("d1/f1.dat");
        let mtime = fs::metadata(&path).unwrap().modified().unwrap();
        let len = fs::metadata(&path).unwrap().len() as usize;
        fs::write(&path, "X".repeat(len)).unwrap();
        fs::File::options().write(true).open(&path).unwrap().set_modified(mtime).unwrap();
        let r = sync_tree(src.path(), dst.path()).unwrap();
        assert_eq!(r.files_transferred, 1);
        assert_eq!(fs::read(dst.path().join("d1/f1.dat")).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn touched_file_is_recopied_and_mtime_is_carried() {
        let src = fixture(2);
        let dst = tempfile::tempdir().unwrap();
        sync_tree(src.path(), dst.path()).unwrap();
        let path = src.path().join("d0/f0.dat");
        let later = SystemTime::now() + Duration::from_secs(5);
        fs::File::options().write(true).open(&path).unwrap().set_modified(later).unwrap();
        assert_eq!(sync_tree(src.path(), dst.path()).unwrap().files_transferred, 1);
        assert_eq!(
            fs::metadata(dst.path().join("d0/f0.dat")).unwrap().modified().unwrap(),
            later
        );
    }

    #[test]
    fn deletions_are_not_propagated() {
        let src = fixture(4);
        let dst = tempfile::tempdir().unwrap();
        sync_tree(src.path(), dst.path()).unwrap();
        fs::remove_file(src.path().join("d2/f2.dat")).unwrap();
        sync_tree(src.path(), dst.path()).unwrap();
        assert!(dst.path().join("d2/f2.dat").is_file());
    }

    #[test]
    fn executable_bit_survives() {
        let src = tempfile::tempdir().unwrap();
        let script = src.path().join("job.sh");
        fs::write(&script, "#!/bin/sh\n").unwrap();
        fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
        let dst = tempfile::tempdir().unwrap();
        sync_tree(src.path(), dst.path()).unwrap();
        let mode = fs::metadata(dst.path().join("job.sh")).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o755);
    }

    #[test]
    fn unreadable_entries_are_reported_per_file() {
        let src = fixture(3);
        let locked = src.path().join("d0/f0.dat");
        fs::set_permissions(&locked, fs::Permissions::from_mode(0o000)).unwrap();
        if fs::File::open(&locked).is_ok() {
            // Running as a user that bypasses permission bits.
            return;
        }
        let dst = tempfile::tempdir().unwrap();
        let r = sync_tree(src.path(), dst.path()).unwrap();
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.files_transferred, 2);
    }

    #[test]
    fn run_names_are_checked() {
        assert!(check_runname("run_1.a-b").is_ok());
        for bad in ["", ".", "..", "a/b", "a b"] {
            assert!(check_runname(bad).is_err(), "{bad:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn mirror_fidelity_and_idempotence(
            files in proptest::collection::btree_map("[a-c]{1,2}(/[a-c]{1,2}){0,2}", proptest::collection::vec(any::<u8>(), 0..64), 1..20),
            mutate in proptest::collection::vec(any::<prop::sample::Index>(), 0..5),
        ) {
            let src = tempfile::tempdir().unwrap();
            let mut written = Vec::new();
            for (rel, data) in &files {
                let path = src.path().join(format!("{rel}.f"));
                fs::create_dir_all(path.parent().unwrap()).unwrap();
                fs::write(&path, data).unwrap();
                written.push(path);
            }
            let dst = tempfile::tempdir().unwrap();
            let first = sync_tree(src.path(), dst.path()).unwrap();
            prop_assert!(first.files_transferred <= first.files_examined);
            prop_assert_eq!(content_manifest(src.path()).unwrap(), content_manifest(dst.path()).unwrap());
            prop_assert_eq!(sync_tree(src.path(), dst.path()).unwrap().files_transferred, 0);

            let mut touched = std::collections::BTreeSet::new();
            for idx in mutate {
                let path = idx.get(&written);
                let mut data = fs::read(path).unwrap();
                data.push(0xAB);
                fs::write(path, data).unwrap();
                touched.insert(path.clone());
            }
            let r = sync_tree(src.path(), dst.path()).unwrap();
            prop_assert_eq!(r.files_transferred, touched.len());
            prop_assert_eq!(content_manifest(src.path()).unwrap(), content_manifest(dst.path()).unwrap());
        }
    }
}
