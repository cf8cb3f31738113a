//! Authorized PSI over an RSA modulus.
//!
//! The certifying authority signs each contact as `sigma = H(c)^d mod N`. Per
//! epoch the server publishes `ts_j = H'(H(s_j)^(2Rs))`. Online, the client
//! sends `a_i = sigma_i · g^(R_ci)`, the server returns `Y = g^(2eRs)` and
//! `a'_i = a_i^(2eRs)`, and the client recomputes
//! `tc_i = H'(a'_i · Y^(-R_ci)) = H'(H(c_i)^(2Rs))`. Only elements carrying a
//! valid signature produce a matching tag.
//!
//! The response keeps request order, so unlike PSI-CA the client could tell
//! which of its own elements matched; callers only surface the count.

use std::collections::HashMap;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::One;
use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::arith::{mod_inverse, sample_range, ExpTally};
use crate::error::{Error, Result};
use crate::hash::{ElementBytes, Tag};
use crate::psica::count_matches;
use crate::rsa::{ApsiCommon, RsaAuthorityKey};
use crate::wire::{hex_uint, hex_uint_vec, ApsiProto};

/// Per-epoch server digest, shared by every client during the epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApsiDigest {
    proto: ApsiProto,
    pub epoch: String,
    pub ts: Vec<Tag>,
}

impl ApsiDigest {
    pub fn new(epoch: String, ts: Vec<Tag>) -> Self {
        ApsiDigest { proto: ApsiProto, epoch, ts }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApsiRequest {
    proto: ApsiProto,
    pub epoch: String,
    #[serde(with = "hex_uint_vec")]
    pub a: Vec<BigUint>,
}

impl ApsiRequest {
    pub fn new(epoch: String, a: Vec<BigUint>) -> Self {
        ApsiRequest { proto: ApsiProto, epoch, a }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApsiResponse {
    #[serde(with = "hex_uint")]
    pub y: BigUint,
    #[serde(with = "hex_uint_vec")]
    pub a_prime: Vec<BigUint>,
}

/// CA signature over a contact identifier.
pub fn ca_sign(c: &ElementBytes, key: &RsaAuthorityKey) -> Result<BigUint> {
    let d = key
        .d()
        .ok_or_else(|| Error::Precondition("signing requires the private exponent".into()))?;
    let h = key.common().hash_to_zn(c)?;
    Ok(h.modpow(d, key.n()))
}

/// Uniform value in `[1, N-1]`, used for both Rs and R_ci.
pub fn sample_blinding<R: RngCore + CryptoRng>(common: &ApsiCommon, rng: &mut R) -> BigUint {
    sample_range(rng, &BigUint::one(), common.n())
}

/// Tags of the server set under epoch exponent `r_s`, over a fresh permutation.
pub fn server_publish_digest<R: RngCore + CryptoRng>(
    set: &[ElementBytes],
    r_s: &BigUint,
    common: &ApsiCommon,
    epoch_id: &str,
    rng: &mut R,
) -> Result<ApsiDigest> {
    let mut order: Vec<&ElementBytes> = set.iter().collect();
    order.sort_unstable();
    order.dedup();
    order.shuffle(rng);
    let exp = r_s << 1u8;
    let ts = order
        .into_iter()
        .map(|s| {
            let h = common.hash_to_zn(s)?;
            Ok(common.tag(&h.modpow(&exp, common.n())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ApsiDigest::new(epoch_id.to_owned(), ts))
}

/// Server state for one epoch: the secret `Rs`, the published digest and `Y`.
#[derive(Debug, Clone)]
pub struct ApsiEpoch {
    r_s: BigUint,
    response_exp: BigUint,
    y: BigUint,
    digest: ApsiDigest,
    tally: ExpTally,
}

impl ApsiEpoch {
    pub fn new<R: RngCore + CryptoRng>(
        epoch_id: &str,
        set: &[ElementBytes],
        common: &ApsiCommon,
        rng: &mut R,
    ) -> Result<Self> {
        let r_s = sample_blinding(common, rng);
        ApsiEpoch::with_exponent(epoch_id, set, common, r_s, rng)
    }

    pub fn with_exponent<R: RngCore + CryptoRng>(
        epoch_id: &str,
        set: &[ElementBytes],
        common: &ApsiCommon,
        r_s: BigUint,
        rng: &mut R,
    ) -> Result<Self> {
        let digest = server_publish_digest(set, &r_s, common, epoch_id, rng)?;
        let response_exp = (&r_s << 1u8) * common.e();
        let y = common.g().modpow(&response_exp, common.n());
        let tally = ExpTally { element: digest.ts.len() as u64, key: 1, validation: 0 };
        Ok(ApsiEpoch { r_s, response_exp, y, digest, tally })
    }

    pub fn epoch_id(&self) -> &str {
        &self.digest.epoch
    }

    pub fn digest(&self) -> &ApsiDigest {
        &self.digest
    }

    pub fn r_s(&self) -> &BigUint {
        &self.r_s
    }

    /// Exponentiations spent building the epoch (offline).
    pub fn exp_tally(&self) -> ExpTally {
        self.tally
    }
}

/// Online server step; response order matches request order.
pub fn server_respond(
    request: &ApsiRequest,
    epoch: &ApsiEpoch,
    common: &ApsiCommon,
    v_max: usize,
) -> Result<(ApsiResponse, ExpTally)> {
    if request.epoch != epoch.epoch_id() {
        return Err(Error::StaleEpoch {
            got: request.epoch.clone(),
            current: epoch.epoch_id().to_owned(),
        });
    }
    if request.a.len() > v_max {
        return Err(Error::LimitExceeded { len: request.a.len(), max: v_max });
    }
    for (i, a) in request.a.iter().enumerate() {
        if !common.is_unit(a) {
            return Err(Error::ProtocolViolation(format!("element #{i} is not a unit modulo N")));
        }
    }
    let a_prime: Vec<BigUint> =
        request.a.iter().map(|a| a.modpow(&epoch.response_exp, common.n())).collect();
    let tally = ExpTally { element: a_prime.len() as u64, key: 0, validation: 0 };
    Ok((ApsiResponse { y: epoch.y.clone(), a_prime }, tally))
}

/// Client input: deduplicated contacts with their signatures and, once a
/// request is built, the per-element blinding exponents.
#[derive(Debug, Clone)]
pub struct ApsiClientState {
    elements: Vec<ElementBytes>,
    sigmas: Vec<Option<BigUint>>,
    blinds: Vec<BigUint>,
    epoch: Option<String>,
    tally: ExpTally,
}

impl ApsiClientState {
    /// Deduplicates by element, keeping the first signature seen for each.
    pub fn new(entries: impl IntoIterator<Item = (ElementBytes, Option<BigUint>)>) -> Self {
        let mut index: HashMap<ElementBytes, usize> = HashMap::new();
        let mut elements = Vec::new();
        let mut sigmas: Vec<Option<BigUint>> = Vec::new();
        for (c, sigma) in entries {
            match index.get(&c) {
                Some(&i) => {
                    if sigmas[i].is_none() {
                        sigmas[i] = sigma;
                    }
                }
                None => {
                    index.insert(c, elements.len());
                    elements.push(c);
                    sigmas.push(sigma);
                }
            }
        }
        ApsiClientState { elements, sigmas, blinds: Vec::new(), epoch: None, tally: ExpTally::default() }
    }

    pub fn elements(&self) -> &[ElementBytes] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Blinding exponents of the last built request.
    pub fn blinds(&self) -> &[BigUint] {
        &self.blinds
    }

    pub fn exp_tally(&self) -> ExpTally {
        self.tally
    }
}

/// Blinds each signature with fresh randomness: `a_i = sigma_i · g^(R_ci)`.
pub fn client_request<R: RngCore + CryptoRng>(
    state: &mut ApsiClientState,
    common: &ApsiCommon,
    epoch_id: &str,
    rng: &mut R,
) -> Result<ApsiRequest> {
    if let Some(index) = state.sigmas.iter().position(Option::is_none) {
        return Err(Error::UnauthorizedElement { index });
    }
    let n = common.n();
    let mut blinds = Vec::with_capacity(state.elements.len());
    let mut a = Vec::with_capacity(state.elements.len());
    for sigma in state.sigmas.iter().flatten() {
        let r = sample_blinding(common, rng);
        a.push((sigma * common.g().modpow(&r, n)) % n);
        blinds.push(r);
    }
    state.tally.element += a.len() as u64;
    state.blinds = blinds;
    state.epoch = Some(epoch_id.to_owned());
    Ok(ApsiRequest::new(epoch_id.to_owned(), a))
}

/// Client tags `tc_i = H'(a'_i · (Y^(R_ci))^-1)`, in request order.
pub fn client_tags(
    state: &mut ApsiClientState,
    common: &ApsiCommon,
    response: &ApsiResponse,
) -> Result<Vec<Tag>> {
    if response.a_prime.len() != state.blinds.len() {
        return Err(Error::ProtocolViolation(format!(
            "response carries {} elements, request had {}",
            response.a_prime.len(),
            state.blinds.len()
        )));
    }
    let n = common.n();
    if !common.is_unit(&response.y) {
        return Err(Error::ProtocolViolation("Y is not a unit modulo N".into()));
    }
    let mut tags = Vec::with_capacity(state.blinds.len());
    for (a_prime, r) in response.a_prime.iter().zip(&state.blinds) {
        if a_prime >= n {
            return Err(Error::ProtocolViolation("response value out of range".into()));
        }
        let mask = response.y.modpow(r, n);
        let inv = mod_inverse(&mask, n).ok_or_else(|| {
            Error::ProtocolViolation(format!("Y^R shares a factor with N (gcd {})", mask.gcd(n)))
        })?;
        tags.push(common.tag(&((a_prime * inv) % n)));
    }
    state.tally.element += tags.len() as u64;
    Ok(tags)
}

/// Final client step: the intersection cardinality against the epoch digest.
pub fn client_finish(
    state: &mut ApsiClientState,
    common: &ApsiCommon,
    digest: &ApsiDigest,
    response: &ApsiResponse,
) -> Result<usize> {
    match &state.epoch {
        Some(e) if *e == digest.epoch => {}
        other => {
            return Err(Error::ProtocolViolation(format!(
                "digest epoch {:?} does not match request epoch {:?}",
                digest.epoch, other
            )))
        }
    }
    let tags = client_tags(state, common, response)?;
    Ok(count_matches(&tags, &digest.ts))
}
