//! Regenerates the shipped parameter files under `params/`.
//!
//! cargo run --release -p ctrace-core --example gen_params -- crates/core/params

use std::path::PathBuf;

use ctrace_core::group::generate_group_params;
use ctrace_core::rsa::{generate_rsa_authority_key, KeyProfile, DEFAULT_E};
use rand::rngs::OsRng;

fn main() -> ctrace_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "params".into()));
    let mut rng = OsRng;
    let group = generate_group_params(1024, 160, 1_000_000, &mut rng)?;
    group.save(dir.join("group_1024_160.json"))?;
    eprintln!("group written");
    let key = generate_rsa_authority_key(1024, DEFAULT_E, KeyProfile::Production, 50_000_000, &mut rng)?;
    key.save(dir.join("rsa_1024.json"))?;
    eprintln!("rsa key written");
    Ok(())
}
