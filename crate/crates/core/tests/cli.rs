mod common;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use common::write_script;
use deskcloud::provider_for_profile;

struct Cli {
    dir: tempfile::TempDir,
}

impl Cli {
    fn new() -> Self {
        let cli = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let out = cli.run(&["configure"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        cli
    }

    fn home(&self) -> PathBuf {
        self.dir.path().join("home")
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_deskcloud"));
        cmd.args(args).env("P2RAC_HOME", self.home());
        cmd
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).stdin(Stdio::null()).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
        stdout(&out)
    }

    fn project(&self, name: &str) -> PathBuf {
        let root = self.dir.path().join("analyst").join(name);
        fs::create_dir_all(root.join("results")).unwrap();
        fs::write(root.join("input.csv"), "a,b\n1,2\n").unwrap();
        write_script(
            &root.join("job.sh"),
            "cat \"$(dirname \"$0\")/input.csv\" > \"$1/copy-$2-$3.csv\"\necho \"$2 $3 of $4\" > \"$1/who-$3.txt\"",
        );
        root
    }

    fn fresh_volume(&self) -> String {
        let provider = provider_for_profile("localsim", &self.home()).unwrap();
        let registry = deskcloud::registry::Registry::open(self.home());
        let snap = registry.load().unwrap().config.default_snapshot;
        provider.create_volume_from_snapshot(&snap).unwrap().volume_id
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn configure_creates_files_and_refuses_rerun() {
    let cli = Cli::new();
    for f in ["config.ini", "instances.ini", "clusters.ini", "rlibs.txt"] {
        assert!(cli.home().join(f).is_file(), "{f} missing");
    }
    let again = cli.run(&["configure"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("force"));
    cli.ok(&["ec2configurep2rac", "-force"]);
}

#[test]
fn instance_workflow_with_single_dash_flags() {
    let cli = Cli::new();
    let vol = cli.fresh_volume();
    let proj = cli.project("proj");
    let created = cli.ok(&[
        "ec2createinstance",
        "-iname",
        "hpc_instance",
        "-ebsvol",
        &vol,
        "-type",
        "m2.4xlarge",
        "-desc",
        "For Trial Simulation Run",
    ]);
    assert!(created.starts_with("hpc_instance\t"));
    assert!(created.contains(&vol));

    let listing = cli.ok(&["list-instances"]);
    let row: Vec<&str> = listing.trim_end().split('\t').collect();
    assert_eq!(row[0], "hpc_instance");
    assert_eq!(row[2], vol);
    assert_eq!(row[3], "free");
    assert_eq!(row[5], "For Trial Simulation Run");

    let sent = cli.ok(&["ec2senddatatoinstance", "-iname", "hpc_instance", "-projectdir", s(&proj)]);
    assert!(sent.starts_with("instance\t2 of 2 files"), "{sent}");

    cli.ok(&[
        "ec2runoninstance",
        "-iname",
        "hpc_instance",
        "-projectdir",
        s(&proj),
        "-rscript",
        "job.sh",
        "-runname",
        "r1",
    ]);
    let fetched = cli.ok(&[
        "ec2getresultsfrominstance",
        "-iname",
        "hpc_instance",
        "-projectdir",
        s(&proj),
        "-runname",
        "r1",
    ]);
    let gathered = PathBuf::from(fetched.lines().last().unwrap());
    let copy = fs::read_to_string(gathered.join("hpc_instance").join("copy-single-0.csv")).unwrap();
    assert_eq!(copy, "a,b\n1,2\n");

    cli.ok(&["ec2terminateinstance", "-iname", "hpc_instance", "-deletevol"]);
    assert_eq!(cli.ok(&["list-instances"]), "");
    assert!(!cli.ok(&["list-all-resources", "-ebsvols"]).contains(&vol));
}

#[test]
fn cluster_workflow_with_aliases_and_en_dashes() {
    let cli = Cli::new();
    let vol = cli.fresh_volume();
    let proj = cli.project("proj");
    cli.ok(&[
        "ec2createcluster",
        "-cname",
        "hpc_cluster",
        "-csize",
        "3",
        "-ebsvol",
        &vol,
        "-type",
        "m2.xlarge",
        "-desc",
        "For Trial Simulation Run",
    ]);
    let names = cli.ok(&["ec2listclusters", "-names"]);
    assert_eq!(names, "hpc_cluster\n");
    let full = cli.ok(&["list-clusters"]);
    let row: Vec<&str> = full.trim_end().split('\t').collect();
    assert_eq!(row[1], "3");
    assert_eq!(row[3].split(',').count(), 2);
    assert_eq!(row[4], vol);
    assert_eq!(row[6], "For Trial Simulation Run");

    let json: serde_json::Value = serde_json::from_str(&cli.ok(&["list-clusters", "--json"])).unwrap();
    assert_eq!(json[0]["size"], 3);

    let sent = cli.ok(&["ec2senddatatoclusternodes", "\u{2013}cname", "hpc_cluster", "-projectdir", s(&proj)]);
    assert_eq!(sent.lines().count(), 3);

    let run = cli.ok(&[
        "ec2runoncluster",
        "-cname",
        "hpc_cluster",
        "-projectdir",
        s(&proj),
        "-rscript",
        "job.sh",
        "-runname",
        "r1",
        "-byslot",
        "-np",
        "3",
    ]);
    assert_eq!(run.lines().filter(|l| l.contains("\texit 0")).count(), 4, "{run}");

    let fetched = cli.ok(&[
        "ec2getresults",
        "\u{2013}cname",
        "hpc_cluster",
        "-projectdir",
        s(&proj),
        "-runname",
        "r1",
        "-fromall",
    ]);
    let gathered = PathBuf::from(fetched.lines().last().unwrap());
    let mut who = Vec::new();
    for tag in ["master", "worker-1", "worker-2"] {
        let node = gathered.join(tag);
        if let Ok(entries) = fs::read_dir(&node) {
            for e in entries {
                let name = e.unwrap().file_name().into_string().unwrap();
                if name.starts_with("who-") {
                    who.push(name);
                }
            }
        }
    }
    who.sort();
    assert_eq!(who, ["who-0.txt", "who-1.txt", "who-2.txt", "who-3.txt"]);

    cli.ok(&["ec2terminatecluster", "-cname", "hpc_cluster", "-deletevol"]);
    assert_eq!(cli.ok(&["list-clusters"]), "");
}

#[test]
fn lock_blocks_runs_until_freed() {
    let cli = Cli::new();
    let proj = cli.project("proj");
    cli.ok(&["create-cluster", "-csize", "2"]);
    cli.ok(&["send-data-to-cluster-nodes", "-projectdir", s(&proj)]);
    let run = ["run-on-cluster", "-projectdir", s(&proj), "-rscript", "job.sh", "-runname", "r"];

    cli.ok(&["ec2resourcelock", "-cname", "hpc_cluster", "-inuse"]);
    assert!(cli.ok(&["list-clusters"]).contains("\tinuse\t"));
    let refused = cli.run(&run);
    assert_eq!(refused.status.code(), Some(1));
    assert!(stderr(&refused).contains("in use"), "{}", stderr(&refused));
    let refused = cli.run(&["terminate-cluster"]);
    assert_eq!(refused.status.code(), Some(1));

    cli.ok(&["ec2resoucelock", "-cname", "hpc_cluster", "-free"]);
    cli.ok(&run);
    assert!(cli.ok(&["list-clusters"]).contains("\tfree\t"));
    cli.ok(&["terminate-cluster"]);
}

#[test]
fn failing_job_exits_one_and_unlocks() {
    let cli = Cli::new();
    let proj = cli.project("proj");
    write_script(&proj.join("bad.sh"), "exit 3");
    cli.ok(&["create-instance"]);
    cli.ok(&["send-data-to-instance", "-projectdir", s(&proj)]);
    let out = cli.run(&["run-on-instance", "-projectdir", s(&proj), "-rscript", "bad.sh", "-runname", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("status 3"));
    assert!(cli.ok(&["list-instances"]).contains("\tfree\t"));
}

#[test]
fn missing_script_without_terminal_lists_candidates() {
    let cli = Cli::new();
    let proj = cli.project("proj");
    cli.ok(&["create-instance"]);
    cli.ok(&["send-data-to-instance", "-projectdir", s(&proj)]);
    let out = cli.run(&["run-on-instance", "-projectdir", s(&proj), "-runname", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("job.sh"), "{}", stderr(&out));
}

#[test]
fn list_all_resources_filters_by_class() {
    let cli = Cli::new();
    cli.ok(&["create-instance"]);
    let classes = |out: &str| {
        let mut c: Vec<String> = out.lines().map(|l| l.split('\t').next().unwrap().to_string()).collect();
        c.dedup();
        c
    };
    assert_eq!(classes(&cli.ok(&["list-all-resources", "-ebsvols"])), ["ebsvol"]);
    assert_eq!(
        classes(&cli.ok(&["ec2listallresources"])),
        ["instance", "ebsvol", "snapshot", "ami"]
    );
    let json: serde_json::Value =
        serde_json::from_str(&cli.ok(&["list-all-resources", "-snapshots", "-amis", "--json"])).unwrap();
    let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["amis", "snapshots"]);
}

#[test]
fn empty_registry_lists_nothing() {
    let cli = Cli::new();
    assert_eq!(cli.ok(&["list-instances"]), "");
    assert_eq!(cli.ok(&["list-clusters", "-names"]), "");
    assert_eq!(cli.ok(&["list-instances", "--json"]).trim(), "[]");
}

#[test]
fn login_runs_a_shell_in_the_master_sandbox() {
    let cli = Cli::new();
    cli.ok(&["create-cluster", "-csize", "2"]);
    let mut child = cli
        .cmd(&["ec2logintomaster"])
        .env("SHELL", "/bin/sh")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"pwd\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let cwd = PathBuf::from(stdout(&out).trim());
    let sandboxes = cli.home().join("localsim");
    assert!(cwd.starts_with(fs::canonicalize(&sandboxes).unwrap()) || cwd.starts_with(&sandboxes), "{cwd:?}");
    assert!(cwd.ends_with("root"));

    let unknown = cli.run(&["login-to-cluster", "-cname", "nope"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn usage_errors_and_version() {
    let cli = Cli::new();
    for args in [
        &["run-on-cluster", "-cname", "c", "-rscript", "job.sh"][..],
        &["resource-lock", "-iname", "x", "-free", "-inuse"],
        &["list-instances", "-frobnicate"],
    ] {
        assert_eq!(cli.run(args).status.code(), Some(2), "{args:?}");
    }
    let v = cli.run(&["ec2createcluster", "-v"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(stdout(&v).contains(env!("CARGO_PKG_VERSION")));
    let h = cli.ok(&["ec2createcluster", "-h"]);
    for flag in ["cname", "csize", "ebsvol", "snap", "type", "desc"] {
        assert!(h.contains(&format!("--{flag}")), "{flag}");
    }
}

#[test]
fn time_workflow_writes_timing_csv() {
    let cli = Cli::new();
    let proj = cli.project("proj");
    let out = cli.ok(&[
        "time-workflow",
        "-csize",
        "2",
        "-projectdir",
        s(&proj),
        "-rscript",
        "job.sh",
        "-runname",
        "t",
    ]);
    assert!(out.starts_with("phase,"));
    let csv = fs::read_to_string(proj.join("results/t/timing.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(cli.ok(&["list-clusters"]), "");
}
