//! RSA authority key, the APSI common input and the full-domain hash into Z_N^*.

use std::path::Path;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::One;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::arith::{byte_len, mod_inverse, random_safe_prime, to_fixed_bytes};
use crate::error::{Error, Result};
use crate::group::MAX_HASH_RETRIES;
use crate::hash::{expand, hash_prime, ElementBytes, Tag};
use crate::wire::{hex_uint, hex_uint_opt};

pub const DEFAULT_E: u32 = 65537;

const ZN_DOMAIN: &[u8] = b"ctrace/v1/hash-to-zn";

/// Minimum modulus size accepted by key generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyProfile {
    /// |N| >= 1024.
    Production,
    /// |N| >= 512, for tests only.
    Test,
}

impl KeyProfile {
    pub fn min_bits(self) -> u64 {
        match self {
            KeyProfile::Production => 1024,
            KeyProfile::Test => 512,
        }
    }
}

/// The public APSI common input (N, e, g). H and H' are fixed by the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApsiCommon {
    n: BigUint,
    e: BigUint,
    g: BigUint,
}

impl ApsiCommon {
    pub fn new(n: BigUint, e: BigUint, g: BigUint) -> Result<Self> {
        if n < BigUint::from(2u8) {
            return Err(Error::InvalidParams("N must be at least 2".into()));
        }
        if e.is_even() || e < BigUint::from(3u8) {
            return Err(Error::InvalidParams("e must be odd and >= 3".into()));
        }
        if g >= n || !g.gcd(&n).is_one() {
            return Err(Error::InvalidParams("g must be a unit modulo N".into()));
        }
        Ok(ApsiCommon { n, e, g })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }
    pub fn e(&self) -> &BigUint {
        &self.e
    }
    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn element_len(&self) -> usize {
        byte_len(&self.n)
    }

    pub fn is_unit(&self, x: &BigUint) -> bool {
        *x >= BigUint::one() && *x < self.n && x.gcd(&self.n).is_one()
    }

    /// Full-domain hash H into the units mod N; output lies in [2, N-1].
    pub fn hash_to_zn(&self, x: &ElementBytes) -> Result<BigUint> {
        hash_to_zn(x, &self.n)
    }

    /// Tag hash over the fixed-width encoding of a residue mod N.
    pub fn tag(&self, z: &BigUint) -> Tag {
        hash_prime(&to_fixed_bytes(z, self.element_len()))
    }

    /// RSA verification: sigma^e ≡ H(c) (mod N).
    pub fn verify(&self, c: &ElementBytes, sigma: &BigUint) -> Result<bool> {
        if !self.is_unit(sigma) {
            return Ok(false);
        }
        Ok(sigma.modpow(&self.e, &self.n) == self.hash_to_zn(c)?)
    }
}

/// Counter-mode hash of `x` reduced mod N, re-drawn until it is a unit >= 2.
pub fn hash_to_zn(x: &ElementBytes, n: &BigUint) -> Result<BigUint> {
    if *n < BigUint::from(2u8) {
        return Err(Error::Precondition("N must be at least 2".into()));
    }
    let out_bits = n.bits() + 128;
    let two = BigUint::from(2u8);
    for retry in 0..MAX_HASH_RETRIES {
        let wide = BigUint::from_bytes_be(&expand(ZN_DOMAIN, retry, x.as_bytes(), out_bits));
        let h = wide % n;
        if h >= two && h.gcd(n).is_one() {
            return Ok(h);
        }
    }
    Err(Error::Internal("hash_to_zn exceeded retry cap".into()))
}

/// The certifying authority's RSA key. `d` is present only in CA-held copies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsaAuthorityKey {
    #[serde(with = "hex_uint")]
    n: BigUint,
    #[serde(with = "hex_uint")]
    e: BigUint,
    #[serde(with = "hex_uint_opt", default, skip_serializing_if = "Option::is_none")]
    d: Option<BigUint>,
    #[serde(with = "hex_uint")]
    g: BigUint,
}

impl RsaAuthorityKey {
    pub fn new(n: BigUint, e: BigUint, d: Option<BigUint>, g: BigUint) -> Result<Self> {
        ApsiCommon::new(n.clone(), e.clone(), g.clone())?;
        if let Some(d) = &d {
            if d >= &n || d == &BigUint::default() {
                return Err(Error::InvalidParams("d out of range".into()));
            }
        }
        Ok(RsaAuthorityKey { n, e, d, g })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }
    pub fn e(&self) -> &BigUint {
        &self.e
    }
    pub fn d(&self) -> Option<&BigUint> {
        self.d.as_ref()
    }
    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn common(&self) -> ApsiCommon {
        ApsiCommon { n: self.n.clone(), e: self.e.clone(), g: self.g.clone() }
    }

    /// Copy without the private exponent, safe to hand to the service or clients.
    pub fn public(&self) -> RsaAuthorityKey {
        RsaAuthorityKey { d: None, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("key serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: RsaAuthorityKey = serde_json::from_str(s)?;
        RsaAuthorityKey::new(raw.n, raw.e, raw.d, raw.g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RsaAuthorityKey::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    /// Pre-generated 1024-bit key over two safe primes (CA copy, holds d).
    pub fn fixture_1024() -> Self {
        RsaAuthorityKey::from_json(include_str!("../params/rsa_1024.json"))
            .expect("shipped RSA key is valid")
    }

    /// Toy key N = 23·47, e = 17, d = 893, g = 2.
    pub fn toy() -> Self {
        RsaAuthorityKey::from_json(include_str!("../params/rsa_toy.json"))
            .expect("shipped toy key is valid")
    }
}

/// Generates a CA key whose modulus is a product of two safe primes.
pub fn generate_rsa_authority_key<R: RngCore + CryptoRng>(
    n_bits: u64,
    e: u32,
    profile: KeyProfile,
    max_attempts: usize,
    rng: &mut R,
) -> Result<RsaAuthorityKey> {
    if n_bits < profile.min_bits() {
        return Err(Error::Precondition(format!(
            "modulus of {n_bits} bits is below the {profile:?} minimum of {}",
            profile.min_bits()
        )));
    }
    let e_big = BigUint::from(e);
    if e < 3 || e % 2 == 0 {
        return Err(Error::Precondition("e must be odd and >= 3".into()));
    }
    let half = n_bits / 2;
    let fail = || Error::GenerationFailed { what: "safe prime", attempts: max_attempts };
    let p = random_safe_prime(half, max_attempts, rng).ok_or_else(fail)?;
    loop {
        let q = random_safe_prime(n_bits - half, max_attempts, rng).ok_or_else(fail)?;
        let n = &p * &q;
        if p == q || n.bits() != n_bits {
            continue;
        }
        let phi = (&p - 1u8) * (&q - 1u8);
        let Some(d) = mod_inverse(&e_big, &phi) else {
            continue;
        };
        let g = loop {
            let cand = rng.gen_biguint_range(&BigUint::from(2u8), &n);
            if cand.gcd(&n).is_one() {
                break cand;
            }
        };
        return RsaAuthorityKey::new(n, e_big, Some(d), g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;

    #[test]
    fn toy_key_matches_hand_computation() {
        let key = RsaAuthorityKey::toy();
        assert_eq!(key.n(), &BigUint::from(1081u32));
        assert_eq!(key.e(), &BigUint::from(17u32));
        // 17 * 893 = 15181 = 15 * 1012 + 1
        assert_eq!(key.d().unwrap(), &BigUint::from(893u32));
    }

    #[test]
    fn toy_hash_to_zn_units_mod_15() {
        let n = BigUint::from(15u8);
        let units: Vec<u32> = (2..15u32).filter(|x| num_integer::gcd(*x, 15) == 1).collect();
        assert_eq!(units, vec![2, 4, 7, 8, 11, 13, 14]);
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..300u32 {
            let mut b = [0u8; 16];
            b[12..].copy_from_slice(&i.to_be_bytes());
            let h: u32 = hash_to_zn(&ElementBytes::new(b), &n).unwrap().try_into().unwrap();
            assert!(units.contains(&h));
            seen.insert(h);
        }
        assert_eq!(seen.len(), units.len());
    }

    #[test]
    fn hash_to_zn_deterministic_unit() {
        let key = RsaAuthorityKey::fixture_1024();
        let c = ElementBytes::new([3u8; 16]);
        let a = key.common().hash_to_zn(&c).unwrap();
        assert_eq!(a, key.common().hash_to_zn(&c).unwrap());
        assert!(a.gcd(key.n()).is_one());
    }

    #[test]
    fn production_profile_rejects_small_modulus() {
        let mut rng = OsRng;
        assert!(matches!(
            generate_rsa_authority_key(64, DEFAULT_E, KeyProfile::Production, 10, &mut rng),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            generate_rsa_authority_key(256, DEFAULT_E, KeyProfile::Test, 10, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn generated_test_key_is_consistent() {
        let mut rng = OsRng;
        let key =
            generate_rsa_authority_key(512, DEFAULT_E, KeyProfile::Test, 2_000_000, &mut rng).unwrap();
        assert_eq!(key.n().bits(), 512);
        let m = rng.gen_biguint_below(key.n());
        let c = m.modpow(key.e(), key.n());
        assert_eq!(c.modpow(key.d().unwrap(), key.n()), m);
    }

    #[test]
    fn public_copy_drops_d() {
        let key = RsaAuthorityKey::toy();
        let json = key.public().to_json();
        assert!(!json.contains("\"d\""));
        assert_eq!(RsaAuthorityKey::from_json(&json).unwrap().d(), None);
        assert!(key.to_json().contains("\"d\": \"037d\""));
    }

    #[test]
    fn common_rejects_bad_inputs() {
        let b = |x: u32| BigUint::from(x);
        assert!(ApsiCommon::new(b(1081), b(16), b(2)).is_err());
        assert!(ApsiCommon::new(b(1081), b(17), b(23)).is_err());
        assert!(ApsiCommon::new(b(1081), b(17), b(2)).is_ok());
    }
}
