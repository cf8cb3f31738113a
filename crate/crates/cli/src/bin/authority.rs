use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use ctrace_cli::{finish, init_logging, parse_args};
use ctrace_core::apsi::ca_sign;
use ctrace_core::authority::{self, Authority, AuthorityConfig, DiagnosisDb, FeedbackReport};
use ctrace_core::group::{generate_group_params, GroupParams};
use ctrace_core::hash::ElementBytes;
use ctrace_core::rsa::{generate_rsa_authority_key, KeyProfile, RsaAuthorityKey, DEFAULT_E};
use ctrace_core::wire::encode_uint;
use ctrace_core::{Error, Result};
use rand::rngs::OsRng;

#[derive(Parser, Debug)]
#[command(name = "authority", about = "Health authority: diagnosis database and query service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Serve the query endpoints over HTTP.
    Serve {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        rsa: Option<PathBuf>,
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        #[arg(long, default_value_t = 24)]
        epoch_hours: u64,
        /// Minimum seconds between queries from one address; 0 disables.
        #[arg(long, default_value_t = 3600)]
        min_interval: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = ctrace_core::psica::DEFAULT_V_MAX)]
        v_max: usize,
        #[arg(long)]
        feedback_log: Option<PathBuf>,
    },
    /// Add one diagnosed-UID hash (32 hex characters) to the database file.
    AddDiagnosis {
        hash: String,
        #[arg(long, default_value = "diagnoses.txt")]
        db: PathBuf,
    },
    /// Merge a newline-delimited hash file into the database file.
    ImportDiagnoses {
        file: PathBuf,
        #[arg(long, default_value = "diagnoses.txt")]
        db: PathBuf,
    },
    /// Sign a contact identifier with the CA key.
    Ca {
        #[arg(long)]
        rsa: PathBuf,
        #[arg(long)]
        peer: String,
    },
    /// Generate group and RSA parameter files.
    GenParams {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1024)]
        p_bits: u64,
        #[arg(long, default_value_t = 160)]
        q_bits: u64,
        #[arg(long, default_value_t = 1024)]
        rsa_bits: u64,
        /// Allow RSA moduli down to 512 bits.
        #[arg(long)]
        test_profile: bool,
        #[arg(long, default_value_t = 1_000_000)]
        max_attempts: usize,
    },
    /// Histogram of accepted feedback by intersection size.
    FeedbackSummary { log: PathBuf },
}

fn parse_hash(s: &str) -> Result<ElementBytes> {
    s.trim().parse().map_err(|_| Error::Input(format!("{s:?} is not a 16-byte hex hash")))
}

fn merge_into_db(db_path: &Path, uids: impl IntoIterator<Item = ElementBytes>) -> Result<usize> {
    let mut db = DiagnosisDb::load(db_path)?;
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut added = 0;
    for uid in uids {
        added += db.insert(uid, now) as usize;
    }
    db.save(db_path)?;
    log::info!("{added} new, w = {}", db.len());
    Ok(db.len())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Serve {
            params,
            rsa,
            db,
            listen,
            epoch_hours,
            min_interval,
            workers,
            v_max,
            feedback_log,
        } => {
            if epoch_hours == 0 {
                return Err(Error::Config("--epoch-hours must be positive".into()));
            }
            let group = GroupParams::load(&params)?;
            let rsa = rsa.map(RsaAuthorityKey::load).transpose()?;
            let config = AuthorityConfig {
                v_max,
                epoch_len: Duration::from_secs(epoch_hours * 3600),
                min_interval: Duration::from_secs(min_interval),
            };
            let mut authority = Authority::new(group, rsa, DiagnosisDb::load(&db)?, config)?;
            if let Some(path) = feedback_log {
                authority = authority.with_feedback_log(path);
            }
            let authority = Arc::new(authority);
            authority::watch_db_file(authority.clone(), db, Duration::from_secs(2));
            let handle = authority::serve(authority.clone(), &listen, workers)?;
            log::info!("listening on {} (w = {})", handle.url(), authority.w());
            handle.join();
            Ok(())
        }
        Command::AddDiagnosis { hash, db } => {
            let w = merge_into_db(&db, [parse_hash(&hash)?])?;
            println!("{w}");
            Ok(())
        }
        Command::ImportDiagnoses { file, db } => {
            let incoming = DiagnosisDb::load(&file)?;
            let w = merge_into_db(&db, incoming.elements())?;
            println!("{w}");
            Ok(())
        }
        Command::Ca { rsa, peer } => {
            let key = RsaAuthorityKey::load(rsa)?;
            println!("{}", encode_uint(&ca_sign(&parse_hash(&peer)?, &key)?));
            Ok(())
        }
        Command::GenParams { out_dir, p_bits, q_bits, rsa_bits, test_profile, max_attempts } => {
            std::fs::create_dir_all(&out_dir)?;
            let group = generate_group_params(p_bits, q_bits, max_attempts, &mut OsRng)?;
            let group_path = out_dir.join(format!("group_{p_bits}_{q_bits}.json"));
            group.save(&group_path)?;
            let profile = if test_profile { KeyProfile::Test } else { KeyProfile::Production };
            let key = generate_rsa_authority_key(rsa_bits, DEFAULT_E, profile, max_attempts, &mut OsRng)?;
            let rsa_path = out_dir.join(format!("rsa_{rsa_bits}.json"));
            key.save(&rsa_path)?;
            println!("{}\n{}", group_path.display(), rsa_path.display());
            Ok(())
        }
        Command::FeedbackSummary { log } => {
            let text = std::fs::read_to_string(log)?;
            let reports = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str::<FeedbackReport>)
                .collect::<std::result::Result<Vec<_>, _>>()?;
            println!("intersection_size,reports");
            for (size, count) in authority::histogram(&reports) {
                println!("{size},{count}");
            }
            Ok(())
        }
    }
}

fn main() {
    init_logging();
    finish(run(parse_args()))
}
