use std::io::Write;
use std::path::PathBuf;

use clap::Parser;
use ctrace_cli::{finish, init_logging, load_group, load_rsa, parse_args};
use ctrace_core::agent::Protocol;
use ctrace_core::sim::{run_bench, BenchConfig, CSV_HEADER};
use ctrace_core::{Error, Result};

const MAX_DESK_V: usize = 10_000;
const MAX_DESK_W: usize = 100_000;

#[derive(Parser, Debug)]
#[command(name = "bench", about = "Offline/online timings and exponentiation counts per party")]
struct Cli {
    #[arg(long, default_value = "psica")]
    protocol: Protocol,
    #[arg(long, default_value_t = 1000)]
    v: usize,
    #[arg(long, default_value_t = 1000)]
    w: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Offline repetitions (defaults to --trials); online trials reuse the last one.
    #[arg(long)]
    offline_trials: Option<usize>,
    /// Append rows here, writing the header if the file is new.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    rsa: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Permit sizes beyond v=10,000 / w=100,000.
    #[arg(long)]
    large: bool,
}

fn run(cli: Cli) -> Result<()> {
    if !cli.large && (cli.v > MAX_DESK_V || cli.w > MAX_DESK_W) {
        return Err(Error::Config(format!(
            "sizes above v={MAX_DESK_V}, w={MAX_DESK_W} need --large"
        )));
    }
    let group = load_group(cli.params.as_deref())?;
    let rsa = load_rsa(cli.rsa.as_deref())?;
    let config = BenchConfig {
        protocol: cli.protocol,
        v: cli.v,
        w: cli.w,
        trials: cli.trials,
        offline_trials: cli.offline_trials.unwrap_or(cli.trials),
        seed: cli.seed,
    };
    let result = run_bench(&config, &group, &rsa)?;
    print!("{}", result.render());
    if let Some(path) = cli.out {
        let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(file, "{CSV_HEADER}")?;
        }
        file.write_all(result.csv_rows().as_bytes())?;
    }
    Ok(())
}

fn main() {
    init_logging();
    finish(run(parse_args()))
}
