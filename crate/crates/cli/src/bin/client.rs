use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};
use ctrace_cli::{finish, init_logging, parse_args};
use ctrace_core::agent::{
    schedule_loop, send_feedback, Clock, ClientAgent, FeedbackOutcome, HttpTransport, Protocol,
    QuerySchedule, RemoteCa, SystemClock, Warning, DEFAULT_WINDOW_SECONDS,
};
use ctrace_core::authority::PublicParams;
use ctrace_core::hash::{ElementBytes, UidHash};
use ctrace_core::ledger::{ContactLedger, ProximityPolicy};
use ctrace_core::{Error, Result};
use rand::rngs::OsRng;

#[derive(Parser, Debug)]
#[command(name = "client", about = "Contact-history client: record, sign, query, report")]
struct Cli {
    /// State directory holding the ledger and the last warning.
    #[arg(long, global = true, env = "CTRACE_HOME", default_value = ".ctrace")]
    home: PathBuf,
    /// Override the current time (unix seconds) used for pruning and warnings.
    #[arg(long, global = true)]
    clock: Option<u64>,
    #[arg(long, global = true, default_value_t = ProximityPolicy::default().t_min)]
    t_min: u64,
    #[arg(long, global = true, default_value_t = ProximityPolicy::default().window_days)]
    window_days: u32,
    #[arg(long, global = true, default_value_t = 30)]
    timeout_secs: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Set this device's identity from its UID.
    Init {
        #[arg(long)]
        uid: String,
    },
    /// Record a proximity event with a peer (peer id as 32 hex characters).
    RecordContact {
        #[arg(long)]
        peer: String,
        #[arg(long)]
        start: u64,
        #[arg(long)]
        duration: u64,
    },
    /// Obtain CA signatures for all unsigned contacts.
    SignContacts {
        #[arg(long)]
        ca: String,
    },
    /// Query the authority and print the resulting warning.
    Query {
        #[arg(long)]
        server: String,
        #[arg(long, default_value = "psica")]
        protocol: Protocol,
        /// Query immediately instead of waiting for the random schedule.
        #[arg(long)]
        now: bool,
        #[arg(long, default_value_t = DEFAULT_WINDOW_SECONDS)]
        window: u64,
    },
    /// Send anonymous feedback about the last warning.
    Feedback {
        #[arg(long)]
        server: String,
        #[arg(long)]
        consent: bool,
        #[arg(long)]
        age_band: Option<String>,
        #[arg(long)]
        region: String,
        /// Extra demographic field as KEY=VALUE.
        #[arg(long = "field", value_parser = parse_kv)]
        fields: Vec<(String, String)>,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .ok_or_else(|| format!("{s:?} is not KEY=VALUE"))
}

struct Home {
    dir: PathBuf,
}

impl Home {
    fn ledger_path(&self) -> PathBuf {
        self.dir.join("ledger.tsv")
    }
    fn owner_path(&self) -> PathBuf {
        self.dir.join("owner")
    }
    fn warning_path(&self) -> PathBuf {
        self.dir.join("warning.json")
    }
    fn params_path(&self) -> PathBuf {
        self.dir.join("params.json")
    }

    fn owner(&self) -> Result<Option<ElementBytes>> {
        match std::fs::read_to_string(self.owner_path()) {
            Ok(s) => Ok(Some(s.trim().parse().map_err(|_| Error::Config("corrupt owner file".into()))?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn ledger(&self) -> Result<ContactLedger> {
        ContactLedger::load(self.ledger_path(), self.owner()?)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn agent_for(home: &Home, server: &str, timeout: Duration) -> Result<ClientAgent<HttpTransport>> {
    let mut agent = ClientAgent::new(HttpTransport::new(server, timeout));
    let cached = std::fs::read(home.params_path())
        .ok()
        .and_then(|b| serde_json::from_slice::<PublicParams>(&b).ok());
    match cached {
        Some(p) => agent = agent.with_params(p),
        None => write_json(&home.params_path(), agent.params()?)?,
    }
    Ok(agent)
}

fn run(cli: Cli) -> Result<()> {
    let policy = ProximityPolicy { t_min: cli.t_min, window_days: cli.window_days, ..Default::default() };
    policy.validate()?;
    let home = Home { dir: cli.home.clone() };
    std::fs::create_dir_all(&home.dir)?;
    let now = || cli.clock.unwrap_or_else(|| SystemClock.now());
    let timeout = Duration::from_secs(cli.timeout_secs);

    match cli.command {
        Command::Init { uid } => {
            let id = ElementBytes::from_uid(uid.as_bytes(), UidHash::default());
            std::fs::write(home.owner_path(), id.to_hex() + "\n")?;
            println!("{id}");
            Ok(())
        }
        Command::RecordContact { peer, start, duration } => {
            let peer: ElementBytes = peer
                .parse()
                .map_err(|_| Error::Input(format!("{peer:?} is not a 16-byte hex id")))?;
            let mut ledger = home.ledger()?;
            let kept = ledger.ingest_event(peer, start, duration, &policy);
            ledger.prune(now(), &policy);
            ledger.save(home.ledger_path())?;
            println!("{}", if kept { "recorded" } else { "dropped: below t_min" });
            Ok(())
        }
        Command::SignContacts { ca } => {
            let mut agent = agent_for(&home, &ca, timeout)?;
            let common = agent
                .params()?
                .apsi_common()?
                .ok_or_else(|| Error::Config("server does not run a CA".into()))?;
            let mut ledger = home.ledger()?;
            let ca = RemoteCa(HttpTransport::new(&ca, timeout));
            let result = ledger.sign_all(&ca, &common);
            // Signatures obtained before a failure are kept.
            ledger.save(home.ledger_path())?;
            println!("signed {}", result?);
            Ok(())
        }
        Command::Query { server, protocol, now: immediate, window } => {
            let mut clock = SystemClock;
            let mut schedule =
                if immediate { None } else { Some(QuerySchedule::new(window, clock.now(), &mut OsRng)?) };
            let mut agent = agent_for(&home, &server, timeout)?;
            let mut query_once = |at: u64| -> Result<Warning> {
                let mut ledger = home.ledger()?;
                ledger.prune(at, &policy);
                ledger.save(home.ledger_path())?;
                let view = ledger.query_view();
                if view.is_empty() {
                    log::info!("no contacts in the retention window; skipping query");
                    return Ok(Warning::new(0, &Default::default(), at));
                }
                let warning = agent.run_query(&view, protocol, at)?;
                write_json(&home.warning_path(), &warning)?;
                println!(
                    "warning: tier={} cardinality={} issued_at={}",
                    warning.tier, warning.cardinality, warning.issued_at
                );
                Ok(warning)
            };
            if let Some(schedule) = schedule.as_mut() {
                log::info!("next query at {}", schedule.next_fire());
                let mut failure = None;
                schedule_loop(schedule, &mut clock, &mut OsRng, None, |at| match query_once(at) {
                    Ok(_) => true,
                    Err(e @ (Error::Network(_) | Error::RateLimited)) => {
                        log::warn!("query failed: {e}; waiting for the next slot");
                        true
                    }
                    Err(e) => {
                        failure = Some(e);
                        false
                    }
                });
                failure.map_or(Ok(()), Err)
            } else {
                query_once(now()).map(|_| ())
            }
        }
        Command::Feedback { server, consent, age_band, region, fields } => {
            let warning: Warning = match std::fs::read(home.warning_path()) {
                Ok(b) => serde_json::from_slice(&b)?,
                Err(_) => return Err(Error::Precondition("no warning to report on".into())),
            };
            let mut demographics: BTreeMap<String, String> = fields.into_iter().collect();
            if let Some(a) = age_band {
                demographics.insert("age_band".into(), a);
            }
            let transport = HttpTransport::new(&server, timeout);
            match send_feedback(&transport, &warning, demographics, &region, consent)? {
                FeedbackOutcome::Acked => println!("feedback acknowledged"),
                FeedbackOutcome::Skipped => println!("feedback skipped: no consent"),
            }
            Ok(())
        }
    }
}

fn main() {
    init_logging();
    finish(run(parse_args()))
}
