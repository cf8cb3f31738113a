//! Helpers shared by the command-line binaries.

use std::path::Path;

use clap::Parser;
use ctrace_core::agent::exit_code;
use ctrace_core::group::GroupParams;
use ctrace_core::rsa::RsaAuthorityKey;
use ctrace_core::Error;

/// Exit code for configuration and usage errors.
pub const EXIT_CONFIG: i32 = 4;

/// Parses arguments; usage errors exit with the configuration code.
pub fn parse_args<C: Parser>() -> C {
    C::try_parse().unwrap_or_else(|e| {
        let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
        let _ = e.print();
        std::process::exit(code)
    })
}

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
}

/// Runs `body`, printing any error and exiting with its code.
pub fn finish(result: ctrace_core::Result<()>) -> ! {
    match result {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e))
        }
    }
}

/// Group parameters from `path`, or the shipped 1024/160-bit set.
pub fn load_group(path: Option<&Path>) -> ctrace_core::Result<GroupParams> {
    match path {
        Some(p) => GroupParams::load(p).map_err(|e| config_error(p, e)),
        None => Ok(GroupParams::fixture_1024()),
    }
}

/// RSA authority key from `path`, or the shipped 1024-bit key.
pub fn load_rsa(path: Option<&Path>) -> ctrace_core::Result<RsaAuthorityKey> {
    match path {
        Some(p) => RsaAuthorityKey::load(p).map_err(|e| config_error(p, e)),
        None => Ok(RsaAuthorityKey::fixture_1024()),
    }
}

fn config_error(path: &Path, e: Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}
