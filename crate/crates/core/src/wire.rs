//! JSON wire encoding helpers.
//!
//! Integers travel as lowercase hex without prefix, using the minimal
//! big-endian byte string (no leading zero bytes). Decoding is strict so every
//! value has exactly one accepted encoding.

use num_bigint::BigUint;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub fn encode_uint(x: &BigUint) -> String {
    hex::encode(x.to_bytes_be())
}

pub fn decode_uint(s: &str) -> Result<BigUint> {
    if s.is_empty() || s.len() % 2 != 0 {
        return Err(Error::Input(format!("hex integer must have even, non-zero length: {s:?}")));
    }
    if s.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err(Error::Input("hex integer must be lowercase".into()));
    }
    let bytes = hex::decode(s).map_err(|e| Error::Input(format!("bad hex: {e}")))?;
    if bytes.len() > 1 && bytes[0] == 0 {
        return Err(Error::Input("hex integer has leading zero byte".into()));
    }
    Ok(BigUint::from_bytes_be(&bytes))
}

pub mod hex_uint {
    use super::*;

    pub fn serialize<S: Serializer>(x: &BigUint, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&encode_uint(x))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BigUint, D::Error> {
        let s = String::deserialize(d)?;
        decode_uint(&s).map_err(serde::de::Error::custom)
    }
}

pub mod hex_uint_vec {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[BigUint], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(xs.iter().map(encode_uint))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<BigUint>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|s| decode_uint(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

pub mod hex_uint_opt {
    use super::*;

    pub fn serialize<S: Serializer>(
        x: &Option<BigUint>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        match x {
            Some(v) => s.serialize_some(&encode_uint(v)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Option<BigUint>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| decode_uint(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

macro_rules! proto_tag {
    ($name:ident, $lit:literal) => {
        /// Fixed `"proto"` discriminator; any other value fails to decode.
        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
        pub struct $name;

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str($lit)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                if s == $lit {
                    Ok($name)
                } else {
                    Err(serde::de::Error::custom(format!(
                        "expected proto {:?}, got {:?}",
                        $lit, s
                    )))
                }
            }
        }
    };
}

proto_tag!(PsicaProto, "psica");
proto_tag!(ApsiProto, "apsi");

/// Serializes a wire message to bytes.
pub fn to_bytes<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(msg).expect("wire messages always serialize")
}

/// Decodes a wire message; malformed input is a protocol violation.
pub fn from_bytes<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::ProtocolViolation(format!("malformed message: {e}")))
}
