use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgMatches, Command};
use deskcloud::workloads::catopt::{BondTerms, PLANTED_TERMS};
use deskcloud::workloads::job::{contract_args, context_from, run_sweep, SweepArgs};
use deskcloud::workloads::sweep::SweepConfig;
use deskcloud::workloads::WorkloadError;

fn cli() -> Command {
    let run = contract_args(Command::new("run").about("Run one rank of the Monte Carlo parameter sweep"))
        .arg(Arg::new("elt").long("elt").required(true).value_parser(value_parser!(PathBuf)))
        .arg(Arg::new("weights").long("weights").value_parser(value_parser!(PathBuf)).help("Weights CSV (region_peril, weight)"))
        .arg(Arg::new("weight").long("weight").default_value("0.5").value_parser(value_parser!(f64)).help("Uniform weight when --weights is absent"))
        .arg(Arg::new("attachment").long("attachment").default_value(PLANTED_TERMS.attachment.to_string()).value_parser(value_parser!(f64)))
        .arg(Arg::new("limit").long("limit").default_value(PLANTED_TERMS.limit.to_string()).value_parser(value_parser!(f64)))
        .arg(Arg::new("jobs").long("jobs").default_value("8").value_parser(value_parser!(usize)))
        .arg(Arg::new("samples").long("samples").default_value("100000").value_parser(value_parser!(usize)))
        .arg(Arg::new("seed").long("seed").default_value("1").value_parser(value_parser!(u64)));
    Command::new("sweep-job")
        .version(clap::crate_version!())
        .about("Monte Carlo parameter sweep job")
        .subcommand_required(true)
        .subcommand(run)
}

fn get<T: Clone + Send + Sync + 'static>(m: &ArgMatches, name: &str) -> T {
    m.get_one::<T>(name).cloned().expect("argument has a default")
}

fn run(m: &ArgMatches) -> Result<(), WorkloadError> {
    let ctx = context_from(m)?;
    let args = SweepArgs {
        elt: get(m, "elt"),
        terms: BondTerms::new(get(m, "attachment"), get(m, "limit"))?,
        weights: m.get_one::<PathBuf>("weights").cloned(),
        uniform_weight: get(m, "weight"),
        sweep: SweepConfig {
            jobs: get(m, "jobs"),
            samples_per_job: get(m, "samples"),
            seed: get(m, "seed"),
        },
    };
    if let Some(r) = run_sweep(&ctx, &args)? {
        println!("aggregate={}", r.aggregate);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("run", m)) => run(m),
        _ => unreachable!("a subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sweep-job: {e}");
            ExitCode::FAILURE
        }
    }
}
