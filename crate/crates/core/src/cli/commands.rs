use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::ArgMatches;
use serde_json::json;

use super::{Console, EXIT_FAILURE, EXIT_OK};
use crate::datasync::{self, GatherScope, Gathered, NodeSync, Project, SyncReport};
use crate::error::{Error, Result};
use crate::executor::{self, Policy, RunOptions, RunOutcome, ScriptPrompt};
use crate::registry::{Registry, ResourceKind};
use crate::resources::{self, CreateCluster, CreateInstance, TerminateAll};
use crate::workloads::timing::{self, WorkflowSpec};
use crate::workloads::TIMING_CSV;
use crate::{configure, Platform};

pub(super) fn run(m: &ArgMatches, registry: &Registry, console: &mut Console) -> Result<i32> {
    let (name, sub) = m.subcommand().expect("a subcommand is required");
    if name == "configure" {
        let profile = sub.get_one::<String>("profile").expect("has default");
        let platform = configure(registry, profile, sub.get_flag("force"))?;
        let cfg = platform.state()?.config;
        writeln!(
            console.out,
            "configured {} (profile {}, default snapshot {})",
            registry.dir().display(),
            cfg.provider_profile,
            cfg.default_snapshot
        )?;
        return Ok(EXIT_OK);
    }
    if !registry.is_configured() {
        return Err(Error::NotConfigured(registry.dir().to_path_buf()));
    }
    let p = Platform::from_registry(registry.clone())?;
    match name {
        "create-instance" => create_instance(&p, sub, console),
        "terminate-instance" => {
            let rec = resources::terminate_instance(&p, s(sub, "iname"), sub.get_flag("deletevol"))?;
            writeln!(console.out, "terminated instance {}", rec.name)?;
            Ok(EXIT_OK)
        }
        "create-cluster" => create_cluster(&p, sub, console),
        "terminate-cluster" => {
            let rec = resources::terminate_cluster(&p, s(sub, "cname"), sub.get_flag("deletevol"))?;
            writeln!(console.out, "terminated cluster {} ({} nodes)", rec.name, rec.size)?;
            Ok(EXIT_OK)
        }
        "terminate-all" => terminate_all(&p, sub, console),
        "send-data-to-instance" => {
            let report = datasync::send_to_instance(&p, s(sub, "iname"), path(sub, "projectdir"))?;
            print_sync(console, "instance", &report)
        }
        "send-data-to-master" => {
            let report = datasync::send_to_master(&p, s(sub, "cname"), path(sub, "projectdir"))?;
            print_sync(console, "master", &report)
        }
        "send-data-to-cluster-nodes" => {
            let nodes = datasync::send_to_cluster_nodes(&p, s(sub, "cname"), path(sub, "projectdir"))?;
            print_node_syncs(console, &nodes)
        }
        "run-on-instance" => {
            let prompt = stdin_prompt;
            let opts = run_options(sub, console.interactive.then_some(&prompt))?;
            let outcome = executor::run_on_instance(&p, s(sub, "iname"), &opts)?;
            report_run(console, &opts.runname, &outcome)
        }
        "run-on-cluster" => {
            let prompt = stdin_prompt;
            let mut opts = run_options(sub, console.interactive.then_some(&prompt))?;
            if sub.get_flag("byslot") {
                opts.policy = Policy::BySlot;
            }
            opts.processes = sub.get_one::<usize>("np").copied();
            let outcome = executor::run_on_cluster(&p, s(sub, "cname"), &opts)?;
            report_run(console, &opts.runname, &outcome)
        }
        "get-results-from-instance" => {
            let g = datasync::get_results_from_instance(
                &p,
                s(sub, "iname"),
                path(sub, "projectdir"),
                s(sub, "runname").expect("required"),
            )?;
            print_gathered(console, &g)
        }
        "get-results" => {
            let scope = if sub.get_flag("fromall") {
                GatherScope::FromAll
            } else if sub.get_flag("fromworkers") {
                GatherScope::FromWorkers
            } else {
                GatherScope::FromMaster
            };
            let g = datasync::get_results(
                &p,
                s(sub, "cname"),
                path(sub, "projectdir"),
                s(sub, "runname").expect("required"),
                scope,
            )?;
            print_gathered(console, &g)
        }
        "list-instances" => list_instances(&p, sub, console),
        "list-clusters" => list_clusters(&p, sub, console),
        "list-all-resources" => list_all_resources(&p, sub, console),
        "login-to-instance" => {
            let rec = p.instance(s(sub, "iname"))?;
            login(&p, &rec.provider_id)
        }
        "login-to-cluster" => {
            let rec = p.cluster(s(sub, "cname"))?;
            login(&p, rec.master_id())
        }
        "resource-lock" => resource_lock(&p, sub, console),
        "time-workflow" => time_workflow(&p, sub, console),
        other => unreachable!("subcommand `{other}` has no handler"),
    }
}

fn s<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a str> {
    m.get_one::<String>(name).map(String::as_str)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(name).map(PathBuf::as_path)
}

fn owned(m: &ArgMatches, name: &str) -> Option<String> {
    s(m, name).map(str::to_string)
}

fn create_instance(p: &Platform, m: &ArgMatches, console: &mut Console) -> Result<i32> {
    let rec = resources::create_instance(
        p,
        &CreateInstance {
            iname: owned(m, "iname"),
            ebsvol: owned(m, "ebsvol"),
            snap: owned(m, "snap"),
            instance_type: owned(m, "type"),
            desc: owned(m, "desc"),
        },
    )?;
    writeln!(
        console.out,
        "{}\t{}\t{}\t{}",
        rec.name,
        rec.provider_id,
        rec.public_address,
        rec.volume_id.as_deref().unwrap_or("-")
    )?;
    Ok(EXIT_OK)
}

fn create_cluster(p: &Platform, m: &ArgMatches, console: &mut Console) -> Result<i32> {
    let rec = resources::create_cluster(
        p,
        &CreateCluster {
            cname: owned(m, "cname"),
            csize: m.get_one::<usize>("csize").copied(),
            ebsvol: owned(m, "ebsvol"),
            snap: owned(m, "snap"),
            instance_type: owned(m, "type"),
            desc: owned(m, "desc"),
        },
    )?;
    writeln!(
        console.out,
        "{}\t{}\t{}\t{}",
        rec.name,
        rec.size,
        rec.master_address,
        rec.volume_id.as_deref().unwrap_or("-")
    )?;
    Ok(EXIT_OK)
}

fn terminate_all(p: &Platform, m: &ArgMatches, console: &mut Console) -> Result<i32> {
    let summary = resources::terminate_all(
        p,
        TerminateAll {
            instances: m.get_flag("instances"),
            clusters: m.get_flag("clusters"),
            ebsvolumes: m.get_flag("ebsvolumes"),
            snapshots: m.get_flag("snapshots"),
        },
    )?;
    let groups = [
        ("instance", &summary.instances),
        ("cluster", &summary.clusters),
        ("volume", &summary.volumes),
        ("snapshot", &summary.snapshots),
    ];
    for (kind, names) in groups {
        for name in names {
            writeln!(console.out, "terminated\t{kind}\t{name}")?;
        }
    }
    for s in &summary.skipped {
        writeln!(console.out, "skipped\t{}\t{}", s.resource, s.reason)?;
    }
    for f in &summary.failures {
        writeln!(console.err, "failed\t{}\t{}", f.resource, f.reason)?;
    }
    Ok(if summary.failures.is_empty() { EXIT_OK } else { EXIT_FAILURE })
}

fn print_sync(console: &mut Console, tag: &str, r: &SyncReport) -> Result<i32> {
    writeln!(
        console.out,
        "{tag}\t{} of {} files\t{} bytes",
        r.files_transferred, r.files_examined, r.bytes_transferred
    )?;
    for (path, msg) in &r.errors {
        writeln!(console.err, "{tag}: {}: {msg}", path.display())?;
    }
    Ok(if r.errors.is_empty() { EXIT_OK } else { EXIT_FAILURE })
}

fn print_node_syncs(console: &mut Console, nodes: &[NodeSync]) -> Result<i32> {
    let mut code = EXIT_OK;
    for n in nodes {
        let c = match &n.outcome {
            Ok(r) => print_sync(console, &n.node_tag, r)?,
            Err(e) => {
                writeln!(console.err, "{}: {e}", n.node_tag)?;
                EXIT_FAILURE
            }
        };
        code = code.max(c);
    }
    Ok(code)
}

fn print_gathered(console: &mut Console, g: &Gathered) -> Result<i32> {
    let code = print_node_syncs(console, &g.nodes)?;
    if !g.found_any() {
        writeln!(console.err, "warning: no results found for this run")?;
    } else if !g.missing.is_empty() {
        writeln!(console.err, "warning: no results on {}", g.missing.join(", "))?;
    }
    writeln!(console.out, "{}", g.path.display())?;
    Ok(code)
}

fn stdin_prompt(candidates: &[String]) -> Option<String> {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "No script given. Choose one:");
    for (i, c) in candidates.iter().enumerate() {
        let _ = writeln!(err, "  {}) {c}", i + 1);
    }
    let _ = write!(err, "> ");
    let _ = err.flush();
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line).ok()?;
    let line = line.trim();
    match line.parse::<usize>() {
        Ok(i) if (1..=candidates.len()).contains(&i) => Some(candidates[i - 1].clone()),
        _ => candidates.iter().find(|c| *c == line).cloned(),
    }
}

fn run_options<'a>(
    m: &ArgMatches,
    prompt: Option<ScriptPrompt<'a>>,
) -> Result<RunOptions<'a>> {
    let mut opts = RunOptions {
        projectdir: path(m, "projectdir").map(Path::to_path_buf),
        rscript: owned(m, "rscript"),
        runname: owned(m, "runname").expect("required"),
        timeout: m.get_one::<u64>("timeout").map(|t| Duration::from_secs(*t)),
        prompt,
        ..Default::default()
    };
    if let Some(g) = m.get_one::<u64>("grace") {
        opts.grace = Duration::from_secs(*g);
    }
    Ok(opts)
}

fn report_run(console: &mut Console, runname: &str, outcome: &RunOutcome) -> Result<i32> {
    for proc in &outcome.processes {
        writeln!(
            console.out,
            "{}\t{}\t{}\t{}",
            proc.rank,
            proc.role,
            proc.node_tag,
            describe_exit(&proc.exit)
        )?;
    }
    if outcome.exit_code == 0 {
        writeln!(console.out, "run {runname} finished; output in {}", outcome.run_dir.display())?;
        Ok(EXIT_OK)
    } else {
        writeln!(
            console.err,
            "run {runname} failed with status {}; output in {}",
            outcome.exit_code,
            outcome.run_dir.display()
        )?;
        Ok(EXIT_FAILURE)
    }
}

fn describe_exit(e: &executor::ExitInfo) -> String {
    match e.signal {
        Some(sig) if e.killed => format!("killed (signal {sig})"),
        Some(sig) => format!("signal {sig}"),
        None => format!("exit {}", e.code),
    }
}

fn list_instances(p: &Platform, m: &ArgMatches, console: &mut Console) -> Result<i32> {
    let state = p.state()?;
    if m.get_flag("json") {
        let rows: Vec<_> = if m.get_flag("names") {
            state.instances.keys().map(|k| json!(k)).collect()
        } else {
            state.instances.values().map(|r| json!(r)).collect()
        };
        writeln!(console.out, "{}", serde_json::Value::Array(rows))?;
        return Ok(EXIT_OK);
    }
    for r in state.instances.values() {
        if m.get_flag("names") {
            writeln!(console.out, "{}", r.name)?;
        } else {
            writeln!(
                console.out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.name,
                r.public_address,
                r.volume_id.as_deref().unwrap_or("-"),
                lock_word(r.in_use),
                r.provider_id,
                r.description
            )?;
        }
    }
    Ok(EXIT_OK)
}

fn list_clusters(p: &Platform, m: &ArgMatches, console: &mut Console) -> Result<i32> {
    let state = p.state()?;
    if m.get_flag("json") {
        let rows: Vec<_> = if m.get_flag("names") {
            state.clusters.keys().map(|k| json!(k)).collect()
        } else {
            state.clusters.values().map(|r| json!(r)).collect()
        };
        writeln!(console.out, "{}", serde_json::Value::Array(rows))?;
        return Ok(EXIT_OK);
    }
    for r in state.clusters.values() {
        if m.get_flag("names") {
            writeln!(console.out, "{}", r.name)?;
        } else {
            writeln!(
                console.out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.name,
                r.size,
                r.master_address,
                if r.worker_addresses.is_empty() { "-".to_string() } else { r.worker_addresses.join(",") },
                r.volume_id.as_deref().unwrap_or("-"),
                lock_word(r.in_use),
                r.description
            )?;
        }
    }
    Ok(EXIT_OK)
}

fn lock_word(in_use: bool) -> &'static str {
    if in_use {
        "inuse"
    } else {
        "free"
    }
}

fn list_all_resources(p: &Platform, m: &ArgMatches, console: &mut Console) -> Result<i32> {
    let inv = p.provider.describe_all()?;
    let picked = ["instances", "ebsvols", "snapshots", "amis"].map(|f| m.get_flag(f));
    let all = !picked.iter().any(|b| *b);
    let [instances, volumes, snapshots, images] = picked.map(|b| b || all);
    if m.get_flag("json") {
        let mut obj = serde_json::Map::new();
        if instances {
            obj.insert("instances".into(), json!(inv.instances));
        }
        if volumes {
            obj.insert("ebsvols".into(), json!(inv.volumes));
        }
        if snapshots {
            obj.insert("snapshots".into(), json!(inv.snapshots));
        }
        if images {
            obj.insert("amis".into(), json!(inv.images));
        }
        writeln!(console.out, "{}", serde_json::Value::Object(obj))?;
        return Ok(EXIT_OK);
    }
    let out = &mut console.out;
    if instances {
        for i in &inv.instances {
            let name = i.tags.get("Name").map(String::as_str).unwrap_or("-");
            writeln!(
                out,
                "instance\t{}\t{}\t{}\t{}\t{name}",
                i.provider_id,
                serde_json::to_value(i.state)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                i.instance_type,
                i.public_address
            )?;
        }
    }
    if volumes {
        for v in &inv.volumes {
            writeln!(
                out,
                "ebsvol\t{}\t{}\t{}\t{}",
                v.volume_id,
                v.size,
                v.attached_to.as_deref().unwrap_or("-"),
                v.source_snapshot.as_deref().unwrap_or("-")
            )?;
        }
    }
    if snapshots {
        for snap in &inv.snapshots {
            writeln!(out, "snapshot\t{}\t{}", snap.snapshot_id, snap.payload)?;
        }
    }
    if images {
        for img in &inv.images {
            writeln!(out, "ami\t{}\t{}", img.image_id, img.description)?;
        }
    }
    Ok(EXIT_OK)
}

fn login(p: &Platform, provider_id: &str) -> Result<i32> {
    let status = p.provider.login_command(provider_id)?.status()?;
    Ok(if status.success() { EXIT_OK } else { EXIT_FAILURE })
}

fn resource_lock(p: &Platform, m: &ArgMatches, console: &mut Console) -> Result<i32> {
    let in_use = m.get_flag("inuse");
    let (kind, name) = match s(m, "iname") {
        Some(iname) => (ResourceKind::Instance, p.instance(Some(iname))?.name),
        None => (ResourceKind::Cluster, p.cluster(s(m, "cname"))?.name),
    };
    p.registry.set_lock(kind, &name, in_use)?;
    writeln!(console.out, "{kind} {name} is now {}", lock_word(in_use))?;
    Ok(EXIT_OK)
}

fn time_workflow(p: &Platform, m: &ArgMatches, console: &mut Console) -> Result<i32> {
    let projectdir = match path(m, "projectdir") {
        Some(d) => d.to_path_buf(),
        None => std::env::current_dir()?,
    };
    let project = Project::open(&projectdir)?;
    let spec = WorkflowSpec {
        name: owned(m, "name").expect("has default"),
        project: project.root.clone(),
        script: owned(m, "rscript").expect("required"),
        runname: owned(m, "runname").expect("required"),
        instance_type: owned(m, "type"),
        processes: m.get_one::<usize>("np").copied(),
    };
    let size = *m.get_one::<usize>("csize").expect("has default");
    let report = if size == 0 {
        timing::timed_instance_workflow(p, &spec)?
    } else {
        timing::timed_cluster_workflow(p, size, &spec)?
    };
    let out = match path(m, "out") {
        Some(f) => f.to_path_buf(),
        None => project.results_dir()?.join(&spec.runname).join(TIMING_CSV),
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    report.write_csv(&out)?;
    console.out.write_all(report.to_csv().as_bytes())?;
    writeln!(console.err, "timing written to {}", out.display())?;
    Ok(EXIT_OK)
}
