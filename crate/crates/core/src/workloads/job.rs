//! Job-contract entry points used by the `catopt-job` and `sweep-job`
//! binaries.

use std::path::{Path, PathBuf};
use std::time::Duration;

use log::info;

use super::catopt::{read_weights, write_weights, BondTerms, EventLossTable};
use super::channel::{serve, InProcess, WorkerPool};
use super::ga::{fitness_task, optimize, GaConfig, GaResult, GenerationStats, Objective, Pooled};
use super::sweep::{param_sweep, sweep_serial, sweep_task, write_estimates, SweepConfig, SweepResult};
use super::{WorkloadError, BEST_WEIGHTS_CSV, HISTORY_CSV, SWEEP_ESTIMATES_CSV};
use crate::executor::{read_node_file, Role};

/// The positional arguments every job receives.
#[derive(Debug, Clone)]
pub struct JobContext {
    pub run_dir: PathBuf,
    pub role: Role,
    pub rank: usize,
    pub world_size: usize,
    /// `(rank, node tag, endpoint)` for every rank.
    pub nodes: Vec<(usize, String, String)>,
    /// How long workers wait for the master and the master for workers.
    pub connect_timeout: Duration,
}

impl JobContext {
    pub fn new(run_dir: &Path, role: &str, rank: usize, world_size: usize, node_file: &Path) -> Result<Self, WorkloadError> {
        let role: Role = role.parse().map_err(|e: crate::Error| WorkloadError::InvalidInput(e.to_string()))?;
        let nodes = read_node_file(node_file).map_err(|e| WorkloadError::InvalidInput(e.to_string()))?;
        if world_size == 0 || rank >= world_size {
            return Err(WorkloadError::InvalidInput(format!("rank {rank} outside world of {world_size}")));
        }
        if role != Role::Single && nodes.len() != world_size {
            return Err(WorkloadError::InvalidInput(format!(
                "node file lists {} ranks but world size is {world_size}",
                nodes.len()
            )));
        }
        std::fs::create_dir_all(run_dir)?;
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
            role,
            rank,
            world_size,
            nodes,
            connect_timeout: Duration::from_secs(60),
        })
    }

    pub fn master_endpoint(&self) -> Result<&str, WorkloadError> {
        self.nodes
            .iter()
            .find(|(r, _, _)| *r == 0)
            .map(|(_, _, ep)| ep.as_str())
            .ok_or_else(|| WorkloadError::InvalidInput("node file has no rank 0".into()))
    }

    fn pool(&self) -> Result<WorkerPool, WorkloadError> {
        WorkerPool::accept(self.master_endpoint()?, self.world_size - 1, self.connect_timeout)
    }
}

#[derive(Debug, Clone)]
pub struct CatoptArgs {
    pub elt: PathBuf,
    pub terms: BondTerms,
    pub ga: GaConfig,
}

pub fn write_history(path: &Path, history: &[GenerationStats]) -> Result<(), WorkloadError> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["generation", "best_risk", "mean_risk", "evaluations"])?;
    for h in history {
        out.write_record([
            h.generation.to_string(),
            h.best_risk.to_string(),
            h.mean_risk.to_string(),
            h.evaluations.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Run one rank of the basis-risk optimization. The master (or a single
/// process) writes `best_weights.csv` and `history.csv`.
pub fn run_catopt(ctx: &JobContext, args: &CatoptArgs) -> Result<Option<GaResult>, WorkloadError> {
    let table = EventLossTable::read_csv(&args.elt)?;
    let objective = Objective::new(table, args.terms);
    let result = match ctx.role {
        Role::Worker => {
            let served = serve(ctx.master_endpoint()?, ctx.rank, ctx.connect_timeout, |p| {
                fitness_task(&objective, p)
            })?;
            info!("rank {} evaluated {served} candidates", ctx.rank);
            return Ok(None);
        }
        Role::Single => optimize(&objective, &args.ga, &mut objective.clone()),
        Role::Master if ctx.world_size == 1 => optimize(&objective, &args.ga, &mut objective.clone()),
        Role::Master => {
            let mut pool = ctx.pool()?;
            let r = optimize(&objective, &args.ga, &mut Pooled(&mut pool));
            pool.shutdown();
            r
        }
    };
    match result {
        Ok(r) => {
            write_weights(&ctx.run_dir.join(BEST_WEIGHTS_CSV), &r.best_w)?;
            write_history(&ctx.run_dir.join(HISTORY_CSV), &r.history)?;
            Ok(Some(r))
        }
        Err(abort) => {
            write_history(&ctx.run_dir.join(HISTORY_CSV), &abort.history)?;
            Err(abort.error)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub elt: PathBuf,
    pub terms: BondTerms,
    /// Weights file; every weight is `uniform_weight` when absent.
    pub weights: Option<PathBuf>,
    pub uniform_weight: f64,
    pub sweep: SweepConfig,
}

/// Run one rank of the parameter sweep. The master (or a single process)
/// writes `sweep_estimates.csv`.
pub fn run_sweep(ctx: &JobContext, args: &SweepArgs) -> Result<Option<SweepResult>, WorkloadError> {
    let table = EventLossTable::read_csv(&args.elt)?;
    let w = match &args.weights {
        Some(path) => read_weights(path)?,
        None => vec![args.uniform_weight; table.m],
    };
    let result = match ctx.role {
        Role::Worker => {
            serve(ctx.master_endpoint()?, ctx.rank, ctx.connect_timeout, |p| {
                sweep_task(&table, &args.terms, &w, &args.sweep, p)
            })?;
            return Ok(None);
        }
        Role::Single => sweep_serial(&table, &args.terms, &w, &args.sweep)?,
        Role::Master if ctx.world_size == 1 => {
            let mut local = InProcess(|p: &str| sweep_task(&table, &args.terms, &w, &args.sweep, p));
            param_sweep(&args.sweep, &mut local)?
        }
        Role::Master => {
            let mut pool = ctx.pool()?;
            let r = param_sweep(&args.sweep, &mut pool);
            pool.shutdown();
            r?
        }
    };
    write_estimates(&ctx.run_dir.join(SWEEP_ESTIMATES_CSV), &args.sweep, &result)?;
    Ok(Some(result))
}

/// Add the five job-contract positionals to a clap command.
pub fn contract_args(cmd: clap::Command) -> clap::Command {
    use clap::{value_parser, Arg};
    cmd.arg(Arg::new("run_dir").required(true).value_parser(value_parser!(PathBuf)))
        .arg(Arg::new("role").required(true).value_parser(["single", "master", "worker"]))
        .arg(Arg::new("rank").required(true).value_parser(value_parser!(usize)))
        .arg(Arg::new("world_size").required(true).value_parser(value_parser!(usize)))
        .arg(Arg::new("node_file").required(true).value_parser(value_parser!(PathBuf)))
}

/// Build a [`JobContext`] from arguments declared by [`contract_args`].
pub fn context_from(m: &clap::ArgMatches) -> Result<JobContext, WorkloadError> {
    let path = |k: &str| m.get_one::<PathBuf>(k).cloned().expect("required");
    let num = |k: &str| *m.get_one::<usize>(k).expect("required");
    JobContext::new(
        &path("run_dir"),
        m.get_one::<String>("role").expect("required"),
        num("rank"),
        num("world_size"),
        &path("node_file"),
    )
}
