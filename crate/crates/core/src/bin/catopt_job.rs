use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use deskcloud::workloads::catopt::{planted_table, write_weights, BondTerms, PLANTED_TERMS};
use deskcloud::workloads::ga::GaConfig;
use deskcloud::workloads::job::{contract_args, context_from, run_catopt, CatoptArgs};
use deskcloud::workloads::WorkloadError;

fn num<T>(name: &'static str, default: impl ToString) -> Arg
where
    T: Clone + Send + Sync + std::str::FromStr + 'static,
    <T as std::str::FromStr>::Err: std::error::Error + Send + Sync + 'static,
{
    Arg::new(name)
        .long(name)
        .default_value(default.to_string())
        .value_parser(|s: &str| s.parse::<T>())
}

fn cli() -> Command {
    let d = GaConfig::default();
    let run = contract_args(Command::new("run").about("Run one rank of the basis-risk optimization"))
        .arg(
            Arg::new("elt")
                .long("elt")
                .required(true)
                .value_parser(value_parser!(PathBuf))
                .help("Event loss table CSV (event_id, cl, region perils...)"),
        )
        .arg(num::<f64>("attachment", PLANTED_TERMS.attachment))
        .arg(num::<f64>("limit", PLANTED_TERMS.limit))
        .arg(num::<usize>("population", d.population))
        .arg(num::<usize>("generations", d.generations))
        .arg(num::<usize>("tournament", d.tournament_size))
        .arg(num::<f64>("crossover", d.crossover_rate))
        .arg(num::<f64>("sigma", d.mutation_sigma))
        .arg(num::<usize>("elitism", d.elitism))
        .arg(num::<u64>("seed", d.seed))
        .arg(Arg::new("no-polish").long("no-polish").action(ArgAction::SetTrue))
        .arg(
            Arg::new("large-scale")
                .long("large-scale")
                .action(ArgAction::SetTrue)
                .conflicts_with_all(["population", "generations"])
                .help("Population 200 and 50 generations"),
        );
    let generate = Command::new("generate")
        .about("Write a synthetic event loss table with a planted optimum")
        .arg(Arg::new("out").long("out").required(true).value_parser(value_parser!(PathBuf)))
        .arg(Arg::new("weights-out").long("weights-out").value_parser(value_parser!(PathBuf)))
        .arg(num::<usize>("m", 10))
        .arg(num::<usize>("n", 200))
        .arg(num::<u64>("seed", 1));
    Command::new("catopt-job")
        .version(clap::crate_version!())
        .about("Cat-bond basis-risk optimization job")
        .subcommand_required(true)
        .subcommand(run)
        .subcommand(generate)
}

fn get<T: Clone + Send + Sync + 'static>(m: &ArgMatches, name: &str) -> T {
    m.get_one::<T>(name).cloned().expect("argument has a default")
}

fn generate(m: &ArgMatches) -> Result<(), WorkloadError> {
    let (table, w) = planted_table(get(m, "m"), get(m, "n"), get(m, "seed"));
    table.write_csv(&get::<PathBuf>(m, "out"))?;
    if let Some(path) = m.get_one::<PathBuf>("weights-out") {
        write_weights(path, &w)?;
    }
    Ok(())
}

fn run(m: &ArgMatches) -> Result<(), WorkloadError> {
    let ctx = context_from(m)?;
    let mut ga = if m.get_flag("large-scale") {
        GaConfig::large_scale()
    } else {
        GaConfig {
            population: get(m, "population"),
            generations: get(m, "generations"),
            ..GaConfig::default()
        }
    };
    ga.tournament_size = get(m, "tournament");
    ga.crossover_rate = get(m, "crossover");
    ga.mutation_sigma = get(m, "sigma");
    ga.elitism = get(m, "elitism");
    ga.seed = get(m, "seed");
    ga.polish = !m.get_flag("no-polish");
    let args = CatoptArgs {
        elt: get(m, "elt"),
        terms: BondTerms::new(get(m, "attachment"), get(m, "limit"))?,
        ga,
    };
    if let Some(r) = run_catopt(&ctx, &args)? {
        println!("best_risk={}", r.best_risk);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("generate", m)) => generate(m),
        Some(("run", m)) => run(m),
        _ => unreachable!("a subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("catopt-job: {e}");
            ExitCode::FAILURE
        }
    }
}
