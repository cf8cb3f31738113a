//! Identifier and tag hashing.

use std::fmt;
use std::str::FromStr;

use md5::Md5;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ELEMENT_LEN: usize = 16;
pub const TAG_LEN: usize = 32;

/// Application-level identifier fed to the protocols: a 16-byte hash of a UID.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementBytes([u8; ELEMENT_LEN]);

impl ElementBytes {
    pub const fn new(bytes: [u8; ELEMENT_LEN]) -> Self {
        ElementBytes(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; ELEMENT_LEN] = bytes.try_into().map_err(|_| {
            Error::Input(format!(
                "identifier must be {ELEMENT_LEN} bytes, got {}",
                bytes.len()
            ))
        })?;
        Ok(ElementBytes(arr))
    }

    /// Hashes an application UID down to an identifier.
    pub fn from_uid(uid: &[u8], alg: UidHash) -> Self {
        let mut out = [0u8; ELEMENT_LEN];
        match alg {
            UidHash::Sha256Truncated => out.copy_from_slice(&Sha256::digest(uid)[..ELEMENT_LEN]),
            UidHash::Md5 => out.copy_from_slice(&Md5::digest(uid)),
        }
        ElementBytes(out)
    }

    pub fn as_bytes(&self) -> &[u8; ELEMENT_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for ElementBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ElementBytes({})", self.to_hex())
    }
}

impl fmt::Display for ElementBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for ElementBytes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s.trim()).map_err(|e| Error::Input(format!("bad hex: {e}")))?;
        ElementBytes::from_slice(&bytes)
    }
}

impl Serialize for ElementBytes {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ElementBytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hash used to turn an application UID into [`ElementBytes`].
///
/// MD5 exists only to mirror published benchmark setups; it never touches
/// the protocol core.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum UidHash {
    #[default]
    Sha256Truncated,
    Md5,
}

/// kappa-bit tag output of the tag hash H'.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tag(pub [u8; TAG_LEN]);

impl fmt::Debug for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tag({})", hex::encode(self.0))
    }
}

impl Serialize for Tag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; TAG_LEN];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        if s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(serde::de::Error::custom("tag hex must be lowercase"));
        }
        Ok(Tag(out))
    }
}

/// The tag hash H': SHA-256, so kappa = 256.
pub fn hash_prime(input: &[u8]) -> Tag {
    Tag(Sha256::digest(input).into())
}

/// Counter-mode SHA-256 expansion of `input` to at least `out_bits` bits.
///
/// Each block is `SHA-256(domain || retry || block || input)`; `retry` lets
/// full-domain hashes re-draw without changing the input.
pub(crate) fn expand(domain: &[u8], retry: u32, input: &[u8], out_bits: u64) -> Vec<u8> {
    let blocks = out_bits.div_ceil(256) as u32;
    let mut out = Vec::with_capacity(blocks as usize * 32);
    for block in 0..blocks {
        let mut h = Sha256::new();
        h.update((domain.len() as u32).to_be_bytes());
        h.update(domain);
        h.update(retry.to_be_bytes());
        h.update(block.to_be_bytes());
        h.update(input);
        out.extend_from_slice(&h.finalize());
    }
    out
}
