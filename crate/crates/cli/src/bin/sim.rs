use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ctrace_cli::{finish, init_logging, load_group, load_rsa, parse_args};
use ctrace_core::agent::{Protocol, TierMap};
use ctrace_core::sim::{generate_scenario, outcomes_csv, run_scenario, ScenarioConfig};
use ctrace_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "sim", about = "Seeded population simulation checked against the plaintext oracle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scenario, run every client's query and write per-client results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "psica")]
        protocol: Protocol,
        #[arg(long, default_value = "sim_results.csv")]
        out: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        rsa: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let Command::Run { config, seed, protocol, out, params, rsa } = cli.command;
    let mut cfg = ScenarioConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let group = load_group(params.as_deref())?;
    let key = load_rsa(rsa.as_deref())?;
    let scenario = generate_scenario(&cfg)?;
    log::info!(
        "population {}, {} events, {} diagnosed",
        cfg.population,
        scenario.events.len(),
        scenario.diagnosed.len()
    );
    let outcomes = run_scenario(&scenario, protocol, &group, &key, &TierMap::default())?;
    std::fs::write(&out, outcomes_csv(&outcomes))?;
    let mismatches = outcomes.iter().filter(|o| o.cardinality != o.oracle).count();
    println!(
        "{} clients, {} with non-zero intersection, {} oracle mismatches; results in {}",
        outcomes.len(),
        outcomes.iter().filter(|o| o.oracle > 0).count(),
        mismatches,
        out.display()
    );
    if mismatches > 0 {
        return Err(Error::Internal(format!("{mismatches} clients disagree with the oracle")));
    }
    Ok(())
}

fn main() {
    init_logging();
    finish(run(parse_args()))
}
