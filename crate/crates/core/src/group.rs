//! Schnorr-style groups: the order-q subgroup of the units modulo a prime p.

use std::path::Path;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::One;
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::arith::{byte_len, is_probable_prime, random_prime, to_fixed_bytes, MR_ROUNDS};
use crate::error::{Error, Result};
use crate::hash::{expand, hash_prime, ElementBytes, Tag, TAG_LEN};
use crate::wire::hex_uint;

pub const DEFAULT_P_BITS: u64 = 1024;
pub const DEFAULT_Q_BITS: u64 = 160;
pub const DEFAULT_KAPPA: u32 = (TAG_LEN * 8) as u32;

/// Retry cap for full-domain hashing; exceeding it means the hash is broken.
pub const MAX_HASH_RETRIES: u32 = 256;

const SUBGROUP_DOMAIN: &[u8] = b"ctrace/v1/hash-to-subgroup";

/// Group parameters shared by both PSI-CA parties.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupParams {
    p: BigUint,
    q: BigUint,
    g: BigUint,
    kappa: u32,
    cofactor: BigUint,
}

#[derive(Serialize, Deserialize)]
struct GroupFile {
    #[serde(with = "hex_uint")]
    p: BigUint,
    #[serde(with = "hex_uint")]
    q: BigUint,
    #[serde(with = "hex_uint")]
    g: BigUint,
    #[serde(with = "hex_uint")]
    kappa: BigUint,
}

impl GroupParams {
    /// Validates and wraps explicit parameters.
    pub fn new(p: BigUint, q: BigUint, g: BigUint, kappa: u32) -> Result<Self> {
        let mut rng = OsRng;
        if !is_probable_prime(&p, MR_ROUNDS, &mut rng) {
            return Err(Error::InvalidParams("p is not prime".into()));
        }
        if !is_probable_prime(&q, MR_ROUNDS, &mut rng) {
            return Err(Error::InvalidParams("q is not prime".into()));
        }
        let p_minus_1 = &p - 1u8;
        let (cofactor, rem) = p_minus_1.div_rem(&q);
        if rem != BigUint::default() {
            return Err(Error::InvalidParams("q does not divide p-1".into()));
        }
        if g.is_one() || g >= p || g == BigUint::default() {
            return Err(Error::InvalidParams("g must lie in [2, p-1]".into()));
        }
        if !g.modpow(&q, &p).is_one() {
            return Err(Error::InvalidParams("g does not have order q".into()));
        }
        if kappa != DEFAULT_KAPPA {
            return Err(Error::InvalidParams(format!(
                "kappa must be {DEFAULT_KAPPA} (H' is SHA-256)"
            )));
        }
        Ok(GroupParams { p, q, g, kappa, cofactor })
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }
    pub fn q(&self) -> &BigUint {
        &self.q
    }
    pub fn g(&self) -> &BigUint {
        &self.g
    }
    pub fn kappa(&self) -> u32 {
        self.kappa
    }

    /// Byte length of an encoded group element.
    pub fn element_len(&self) -> usize {
        byte_len(&self.p)
    }

    /// `z` lies in the order-q subgroup.
    pub fn is_member(&self, z: &BigUint) -> bool {
        *z >= BigUint::one() && *z < self.p && z.modpow(&self.q, &self.p).is_one()
    }

    /// Tag hash over the fixed-width encoding of a group element.
    pub fn tag(&self, z: &BigUint) -> Tag {
        hash_prime(&to_fixed_bytes(z, self.element_len()))
    }

    /// Full-domain hash H into the order-q subgroup.
    ///
    /// The counter-mode expansion carries 128 bits beyond |p| so the reduction
    /// mod p is close to uniform; the cofactor exponentiation then lands in the
    /// subgroup. Results 0 and 1 are re-drawn.
    pub fn hash_to_subgroup(&self, x: &ElementBytes) -> Result<BigUint> {
        let out_bits = self.p.bits() + 128;
        for retry in 0..MAX_HASH_RETRIES {
            let wide = BigUint::from_bytes_be(&expand(SUBGROUP_DOMAIN, retry, x.as_bytes(), out_bits));
            let h = (wide % &self.p).modpow(&self.cofactor, &self.p);
            if h > BigUint::one() {
                return Ok(h);
            }
        }
        Err(Error::Internal("hash_to_subgroup exceeded retry cap".into()))
    }

    /// Random exponent in `[1, q-1]`.
    pub fn sample_exponent<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        crate::arith::sample_exponent(rng, &self.q)
    }

    pub fn to_json(&self) -> String {
        let file = GroupFile {
            p: self.p.clone(),
            q: self.q.clone(),
            g: self.g.clone(),
            kappa: BigUint::from(self.kappa),
        };
        serde_json::to_string_pretty(&file).expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: GroupFile = serde_json::from_str(s)?;
        let kappa = u32::try_from(&file.kappa)
            .map_err(|_| Error::InvalidParams("kappa out of range".into()))?;
        GroupParams::new(file.p, file.q, file.g, kappa)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        GroupParams::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// Pre-generated 1024/160-bit parameters.
    pub fn fixture_1024() -> Self {
        GroupParams::from_json(include_str!("../params/group_1024_160.json"))
            .expect("shipped group parameters are valid")
    }

    /// Toy group p = 23, q = 11, g = 4.
    pub fn toy() -> Self {
        GroupParams::from_json(include_str!("../params/group_toy.json"))
            .expect("shipped toy parameters are valid")
    }
}

/// Generates fresh group parameters with |p| = `p_bits` and |q| = `q_bits`.
pub fn generate_group_params<R: RngCore + CryptoRng>(
    p_bits: u64,
    q_bits: u64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<GroupParams> {
    if p_bits < 512 || q_bits < 160 || q_bits >= p_bits {
        return Err(Error::Precondition(format!(
            "need p_bits >= 512, q_bits >= 160 and q_bits < p_bits (got {p_bits}/{q_bits})"
        )));
    }
    let q = random_prime(q_bits, max_attempts, rng).ok_or(Error::GenerationFailed {
        what: "subgroup order q",
        attempts: max_attempts,
    })?;
    let two_q = &q << 1;
    let mut p = None;
    for _ in 0..max_attempts {
        let mut x = rng.gen_biguint(p_bits);
        x.set_bit(p_bits - 1, true);
        // p ≡ 1 (mod 2q)
        let candidate: BigUint = &x - (&x % &two_q) + 1u8;
        if candidate.bits() != p_bits {
            continue;
        }
        if is_probable_prime(&candidate, MR_ROUNDS, rng) {
            p = Some(candidate);
            break;
        }
    }
    let p = p.ok_or(Error::GenerationFailed { what: "modulus p", attempts: max_attempts })?;
    let cofactor = (&p - 1u8) / &q;
    let two = BigUint::from(2u8);
    let p_minus_1 = &p - 1u8;
    for _ in 0..max_attempts {
        let h = rng.gen_biguint_range(&two, &p_minus_1);
        let g = h.modpow(&cofactor, &p);
        if !g.is_one() {
            return GroupParams::new(p, q, g, DEFAULT_KAPPA);
        }
    }
    Err(Error::GenerationFailed { what: "generator g", attempts: max_attempts })
}
