pub mod agent;
pub mod apsi;
pub mod arith;
pub mod authority;
pub mod error;
pub mod group;
pub mod hash;
pub mod ledger;
pub mod psica;
pub mod rsa;
pub mod sim;
pub mod wire;

pub use error::{Error, Result};
