mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::TestEnv;
use deskcloud::datasync::{get_results, send_to_cluster_nodes, send_to_instance, GatherScope};
use deskcloud::executor::{run_on_cluster, run_on_instance, RunOptions};
use deskcloud::resources::{create_cluster, create_instance, CreateCluster, CreateInstance};
use deskcloud::workloads::catopt::{planted_table, read_weights, PLANTED_TERMS};
use deskcloud::workloads::{basis_risk, BEST_WEIGHTS_CSV, HISTORY_CSV, SWEEP_ESTIMATES_CSV};

const CATOPT: &str = env!("CARGO_BIN_EXE_catopt-job");
const SWEEP: &str = env!("CARGO_BIN_EXE_sweep-job");

fn project(env: &TestEnv) -> PathBuf {
    let catopt = format!(
        r#"exec "{CATOPT}" run "$@" --elt data/elt.csv --population 24 --generations 15 --seed 11"#
    );
    let sweep = format!(r#"exec "{SWEEP}" run "$@" --elt data/elt.csv --jobs 6 --samples 5000 --seed 40"#);
    let proj = env.project("catrisk", &[("catopt.sh", &catopt), ("sweep.sh", &sweep)], &[]);
    let (table, _) = planted_table(6, 80, 5);
    fs::create_dir_all(proj.join("data")).unwrap();
    table.write_csv(&proj.join("data/elt.csv")).unwrap();
    proj
}

fn cluster_with(env: &TestEnv, name: &str, size: usize) {
    create_cluster(
        &env.platform,
        &CreateCluster {
            cname: Some(name.into()),
            csize: Some(size),
            instance_type: Some("local.2".into()),
            ..Default::default()
        },
    )
    .unwrap();
}

fn run(env: &TestEnv, cluster: &str, proj: &Path, script: &str, run: &str, processes: usize) -> PathBuf {
    let out = run_on_cluster(
        &env.platform,
        Some(cluster),
        &RunOptions {
            projectdir: Some(proj.to_path_buf()),
            rscript: Some(script.into()),
            runname: run.into(),
            processes: Some(processes),
            ..Default::default()
        },
    )
    .unwrap();
    let stderr: String = out
        .processes
        .iter()
        .map(|p| fs::read_to_string(out.run_dir.join(format!("{}-{}.err", p.role, p.rank))).unwrap_or_default())
        .collect();
    assert_eq!(out.exit_code, 0, "{stderr}");
    out.run_dir
}

fn last_best(history: &Path) -> String {
    let text = fs::read_to_string(history).unwrap();
    let risks: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(risks.windows(2).all(|w| w[1] <= w[0]), "history must be nonincreasing");
    text.lines().last().unwrap().split(',').nth(1).unwrap().to_string()
}

#[test]
fn catopt_is_identical_with_one_or_four_workers() {
    let env = TestEnv::new();
    let proj = project(&env);
    cluster_with(&env, "ga", 2);
    send_to_cluster_nodes(&env.platform, Some("ga"), Some(&proj)).unwrap();
    let one = run(&env, "ga", &proj, "catopt.sh", "w1", 1);
    let four = run(&env, "ga", &proj, "catopt.sh", "w4", 4);
    assert_eq!(last_best(&one.join(HISTORY_CSV)), last_best(&four.join(HISTORY_CSV)));
    assert_eq!(
        fs::read_to_string(one.join(BEST_WEIGHTS_CSV)).unwrap(),
        fs::read_to_string(four.join(BEST_WEIGHTS_CSV)).unwrap()
    );
    let w = read_weights(&four.join(BEST_WEIGHTS_CSV)).unwrap();
    let (table, _) = planted_table(6, 80, 5);
    let risk = basis_risk(&w, &table, &PLANTED_TERMS).unwrap();
    assert_eq!(risk.to_string(), last_best(&four.join(HISTORY_CSV)));

    let g = get_results(&env.platform, Some("ga"), Some(&proj), "w4", GatherScope::FromMaster).unwrap();
    assert!(g.path.join("master").join(BEST_WEIGHTS_CSV).is_file());
}

#[test]
fn catopt_single_instance_matches_cluster() {
    let env = TestEnv::new();
    let proj = project(&env);
    create_instance(&env.platform, &CreateInstance::default()).unwrap();
    send_to_instance(&env.platform, None, Some(&proj)).unwrap();
    let out = run_on_instance(
        &env.platform,
        None,
        &RunOptions {
            projectdir: Some(proj.clone()),
            rscript: Some("catopt.sh".into()),
            runname: "solo".into(),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.exit_code, 0);
    cluster_with(&env, "ga", 2);
    send_to_cluster_nodes(&env.platform, Some("ga"), Some(&proj)).unwrap();
    let clustered = run(&env, "ga", &proj, "catopt.sh", "c", 3);
    assert_eq!(last_best(&out.run_dir.join(HISTORY_CSV)), last_best(&clustered.join(HISTORY_CSV)));
}

#[test]
fn sweep_estimates_do_not_depend_on_worker_count() {
    let env = TestEnv::new();
    let proj = project(&env);
    cluster_with(&env, "mc", 2);
    send_to_cluster_nodes(&env.platform, Some("mc"), Some(&proj)).unwrap();
    let one = run(&env, "mc", &proj, "sweep.sh", "s1", 1);
    let four = run(&env, "mc", &proj, "sweep.sh", "s4", 4);
    let a = fs::read_to_string(one.join(SWEEP_ESTIMATES_CSV)).unwrap();
    assert_eq!(a, fs::read_to_string(four.join(SWEEP_ESTIMATES_CSV)).unwrap());
    assert_eq!(a.lines().count(), 1 + 6 + 1);
}

#[test]
fn killed_worker_aborts_the_optimization() {
    let env = TestEnv::new();
    let proj = project(&env);
    let crashy = format!(
        r#"if [ "$2" = worker ] && [ "$3" = 2 ]; then kill -9 $$; fi
exec "{CATOPT}" run "$@" --elt data/elt.csv --population 24 --generations 15"#
    );
    common::write_script(&proj.join("crashy.sh"), &crashy);
    cluster_with(&env, "ga", 2);
    send_to_cluster_nodes(&env.platform, Some("ga"), Some(&proj)).unwrap();
    let start = std::time::Instant::now();
    let out = run_on_cluster(
        &env.platform,
        Some("ga"),
        &RunOptions {
            projectdir: Some(proj.clone()),
            rscript: Some("crashy.sh".into()),
            runname: "x".into(),
            processes: Some(2),
            grace: std::time::Duration::from_secs(1),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(start.elapsed() < std::time::Duration::from_secs(30));
    assert_ne!(out.exit_code, 0);
    let crashed = out.processes.iter().find(|p| p.rank == 2).unwrap();
    assert_eq!(crashed.exit.signal, Some(9));
    assert!(!out.run_dir.join(BEST_WEIGHTS_CSV).exists());
}
