//! Command-line front end.
//!
//! Subcommands use kebab-case names (`create-cluster`) and also answer to
//! the historical `ec2...` spellings. Flags may be written with a single
//! dash (`-cname hpc_cluster`); [`normalize_args`] rewrites them into the
//! double-dash form clap expects before parsing.

mod commands;

use std::ffi::OsString;
use std::io::{IsTerminal, Write};
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{value_parser, Arg, ArgAction, ArgGroup, ArgMatches, Command};

use crate::registry::Registry;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Output streams and terminal state for one invocation.
pub struct Console<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
    /// Whether a person is at the keyboard (enables the script prompt).
    pub interactive: bool,
}

/// Entry point for the `deskcloud` binary.
pub fn main_entry() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    let mut console = Console {
        out: &mut out,
        err: &mut err,
        interactive: std::io::stdin().is_terminal(),
    };
    dispatch(std::env::args_os(), &mut console)
}

/// Parse `argv` (program name first) and run the selected subcommand.
pub fn dispatch<I, T>(argv: I, console: &mut Console) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv = normalize_args(argv.into_iter().map(Into::into).collect());
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if code == EXIT_OK {
                &mut *console.out
            } else {
                &mut *console.err
            };
            let _ = sink.write_all(rendered.as_bytes());
            return code;
        }
    };
    let registry = Registry::open(home_dir(&matches));
    match commands::run(&matches, &registry, console) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(console.err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

fn home_dir(m: &ArgMatches) -> PathBuf {
    m.get_one::<PathBuf>("home")
        .cloned()
        .unwrap_or_else(Registry::default_dir)
}

/// Rewrite single-dash long flags (`-iname`, `–cname`) as `--iname`.
///
/// Single-letter flags (`-h`, `-v`) and everything after a bare `--` are
/// left alone, as are tokens that do not look like flag names.
pub fn normalize_args(argv: Vec<OsString>) -> Vec<OsString> {
    let mut out = Vec::with_capacity(argv.len());
    let mut passthrough = false;
    for (i, arg) in argv.into_iter().enumerate() {
        if i == 0 || passthrough {
            out.push(arg);
            continue;
        }
        let Some(text) = arg.to_str() else {
            out.push(arg);
            continue;
        };
        if text == "--" {
            passthrough = true;
            out.push(arg);
            continue;
        }
        out.push(normalize_token(text).map(OsString::from).unwrap_or(arg));
    }
    out
}

fn normalize_token(text: &str) -> Option<String> {
    let body = text
        .strip_prefix(['\u{2013}', '\u{2014}'])
        .or_else(|| text.strip_prefix('-').filter(|b| !b.starts_with('-')))?;
    let (name, value) = match body.split_once('=') {
        Some((n, v)) => (n, Some(v)),
        None => (body, None),
    };
    let mut chars = name.chars();
    let first = chars.next()?;
    let dashed_by_unicode = !text.starts_with('-');
    if !first.is_ascii_alphabetic()
        || !chars.all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return None;
    }
    if name.len() < 2 && !dashed_by_unicode {
        return None;
    }
    let dashes = if name.len() < 2 { "-" } else { "--" };
    Some(match value {
        Some(v) => format!("{dashes}{name}={v}"),
        None => format!("{dashes}{name}"),
    })
}

fn opt(name: &'static str, value_name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name(value_name)
        .num_args(1)
        .help(help)
}

fn switch(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .action(ArgAction::SetTrue)
        .help(help)
}

fn sub(name: &'static str, aliases: &[&'static str], about: &'static str) -> Command {
    Command::new(name)
        .visible_aliases(aliases.iter().copied())
        .about(about)
}

fn iname() -> Arg {
    opt("iname", "INSTANCE_NAME", "Instance name (defaults to the configured one)")
}

fn cname() -> Arg {
    opt("cname", "CLUSTER_NAME", "Cluster name (defaults to the configured one)")
}

fn projectdir() -> Arg {
    opt("projectdir", "PROJECT_DIR", "Local project directory (defaults to the current directory)")
        .value_parser(value_parser!(PathBuf))
}

fn runname() -> Arg {
    opt("runname", "RUN_NAME", "Name of the run; results live under results/RUN_NAME").required(true)
}

fn volume_args(cmd: Command) -> Command {
    cmd.arg(opt("ebsvol", "EBS_VOLUME", "Existing volume to attach"))
        .arg(opt("snap", "EBS_SNAP", "Snapshot to create a fresh volume from"))
        .group(ArgGroup::new("volume").args(["ebsvol", "snap"]).multiple(false))
        .arg(opt("type", "INSTANCE_TYPE", "Instance type"))
        .arg(opt("desc", "DESCRIPTION", "Free-text description"))
}

fn run_args(cmd: Command) -> Command {
    cmd.arg(projectdir())
        .arg(opt("rscript", "SCRIPT", "Script to execute, relative to the project"))
        .arg(runname())
        .arg(
            opt("timeout", "SECONDS", "Kill the job after this many seconds")
                .value_parser(value_parser!(u64)),
        )
        .arg(
            opt("grace", "SECONDS", "How long workers may outlive the master (default 5)")
                .value_parser(value_parser!(u64)),
        )
}

fn list_args(cmd: Command) -> Command {
    cmd.arg(switch("names", "Print names only"))
        .arg(switch("json", "Print JSON instead of a table"))
}

/// The full command tree. Exposed so tests can compare help output with
/// the declared flags.
pub fn command() -> Command {
    Command::new("deskcloud")
        .version(clap::crate_version!())
        .about("Provision instances and clusters, ship projects, run jobs and fetch results")
        .disable_version_flag(true)
        .propagate_version(true)
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("version")
                .short('v')
                .long("version")
                .action(ArgAction::Version)
                .global(true)
                .help("Print the platform version"),
        )
        .arg(
            Arg::new("home")
                .long("home")
                .value_name("DIR")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .help("Registry directory (default: $P2RAC_HOME or ~/.p2rac)"),
        )
        .subcommand(
            sub("configure", &["ec2configurep2rac"], "Create the configuration directory with defaults")
                .arg(switch("force", "Reset an existing configuration"))
                .arg(
                    opt("profile", "PROFILE", "Provider profile: localsim or localsim-cloud")
                        .default_value(crate::PROFILE_LOCALSIM),
                ),
        )
        .subcommand(volume_args(
            sub("create-instance", &["ec2createinstance"], "Launch an instance and attach a data volume")
                .arg(iname()),
        ))
        .subcommand(
            sub("terminate-instance", &["ec2terminateinstance"], "Terminate an instance")
                .arg(iname())
                .arg(switch("deletevol", "Also delete the attached volume")),
        )
        .subcommand(volume_args(
            sub("create-cluster", &["ec2createcluster"], "Launch a master-worker cluster")
                .arg(cname())
                .arg(
                    opt("csize", "CLUSTER_SIZE", "Number of nodes including the master")
                        .value_parser(value_parser!(usize)),
                ),
        ))
        .subcommand(
            sub("terminate-cluster", &["ec2terminatecluster"], "Terminate every node of a cluster")
                .arg(cname())
                .arg(switch("deletevol", "Also delete the master's volume")),
        )
        .subcommand(
            sub("terminate-all", &["ec2terminateall"], "Terminate all unlocked resources")
                .arg(switch("instances", "Terminate instances"))
                .arg(switch("clusters", "Terminate clusters"))
                .arg(switch("ebsvolumes", "Delete detached volumes"))
                .arg(switch("snapshots", "Delete snapshots other than the default")),
        )
        .subcommand(
            sub("send-data-to-instance", &["ec2senddatatoinstance"], "Synchronise a project to an instance")
                .arg(iname())
                .arg(projectdir()),
        )
        .subcommand(
            sub("send-data-to-master", &["ec2senddatatomaster"], "Synchronise a project to a cluster's master")
                .arg(cname())
                .arg(projectdir()),
        )
        .subcommand(
            sub(
                "send-data-to-cluster-nodes",
                &["ec2senddatatoclusternodes"],
                "Synchronise a project to every node of a cluster",
            )
            .arg(cname())
            .arg(projectdir()),
        )
        .subcommand(run_args(
            sub("run-on-instance", &["ec2runoninstance"], "Run a project script on an instance").arg(iname()),
        ))
        .subcommand(run_args(
            sub("run-on-cluster", &["ec2runoncluster"], "Run a project script across a cluster")
                .arg(cname())
                .arg(switch("bynode", "Place ranks round-robin across nodes (default)"))
                .arg(switch("byslot", "Fill each node's cores before moving on"))
                .group(ArgGroup::new("placement").args(["bynode", "byslot"]).multiple(false))
                .arg(
                    opt("np", "PROCESSES", "Worker processes (default: one per core)")
                        .value_parser(value_parser!(usize)),
                ),
        ))
        .subcommand(
            sub("get-results-from-instance", &["ec2getresultsfrominstance"], "Fetch a run's results from an instance")
                .arg(iname())
                .arg(projectdir())
                .arg(runname()),
        )
        .subcommand(
            sub("get-results", &["ec2getresults"], "Fetch a run's results from a cluster")
                .arg(cname())
                .arg(projectdir())
                .arg(runname())
                .arg(switch("frommaster", "Fetch from the master only (default)"))
                .arg(switch("fromworkers", "Fetch from the workers only"))
                .arg(switch("fromall", "Fetch from every node"))
                .group(
                    ArgGroup::new("scope")
                        .args(["frommaster", "fromworkers", "fromall"])
                        .multiple(false),
                ),
        )
        .subcommand(list_args(sub(
            "list-instances",
            &["ec2listinstances", "ec2listinstance"],
            "List registered instances",
        )))
        .subcommand(list_args(sub("list-clusters", &["ec2listclusters"], "List registered clusters")))
        .subcommand(
            sub("list-all-resources", &["ec2listallresources"], "List everything the provider holds")
                .arg(switch("instances", "Show instances"))
                .arg(switch("ebsvols", "Show volumes"))
                .arg(switch("snapshots", "Show snapshots"))
                .arg(switch("amis", "Show machine images"))
                .arg(switch("json", "Print JSON instead of a table")),
        )
        .subcommand(
            sub("login-to-instance", &["ec2logintoinstance"], "Open a shell on an instance").arg(iname()),
        )
        .subcommand(
            sub(
                "login-to-cluster",
                &["ec2logintocluster", "ec2logintomaster"],
                "Open a shell on a cluster's master",
            )
            .arg(cname()),
        )
        .subcommand(
            sub(
                "resource-lock",
                &["ec2resourcelock", "ec2resoucelock"],
                "Mark an instance or cluster as in use or free",
            )
            .arg(iname())
            .arg(cname())
            .group(ArgGroup::new("target").args(["iname", "cname"]).required(true))
            .arg(switch("free", "Release the lock"))
            .arg(switch("inuse", "Take the lock"))
            .group(ArgGroup::new("state").args(["free", "inuse"]).required(true)),
        )
        .subcommand(
            sub(
                "time-workflow",
                &[],
                "Run the full create/send/run/fetch/terminate workflow and report phase timings",
            )
            .arg(
                opt("csize", "CLUSTER_SIZE", "Cluster size; 0 runs the single-instance workflow")
                    .value_parser(value_parser!(usize))
                    .default_value("0"),
            )
            .arg(opt("name", "NAME", "Name for the temporary resource").default_value("timing"))
            .arg(projectdir())
            .arg(opt("rscript", "SCRIPT", "Script to execute").required(true))
            .arg(runname())
            .arg(opt("type", "INSTANCE_TYPE", "Instance type"))
            .arg(opt("np", "PROCESSES", "Worker processes").value_parser(value_parser!(usize)))
            .arg(
                opt("out", "FILE", "Where to write timing.csv (default: the local run directory)")
                    .value_parser(value_parser!(PathBuf)),
            ),
        )
}
