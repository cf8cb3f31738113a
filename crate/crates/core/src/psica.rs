//! Two-message private set intersection cardinality.
//!
//! The client sends `X = g^Rc` and `a_i = H(c_i)^Rc'`. The server answers with
//! `Y = g^Rs`, the shuffled list `a_i^Rs'` and one tag per diagnosed element,
//! `ts_j = H'(X^Rs · hs_j^Rs')`. The client strips `Rc'`, recomputes
//! `tc_i = H'(Y^Rc · H(c_i)^Rs')` and counts tag matches. The shuffle hides
//! which of its elements matched.

use std::collections::{HashMap, HashSet};

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::arith::{mod_inverse, ExpTally};
use crate::error::{Error, Result};
use crate::group::GroupParams;
use crate::hash::{ElementBytes, Tag};
use crate::wire::{hex_uint, hex_uint_vec, PsicaProto};

/// Largest accepted client list.
pub const DEFAULT_V_MAX: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiCaRequest {
    proto: PsicaProto,
    #[serde(with = "hex_uint")]
    pub x: BigUint,
    #[serde(with = "hex_uint_vec")]
    pub a: Vec<BigUint>,
}

impl PsiCaRequest {
    pub fn new(x: BigUint, a: Vec<BigUint>) -> Self {
        PsiCaRequest { proto: PsicaProto, x, a }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiCaResponse {
    #[serde(with = "hex_uint")]
    pub y: BigUint,
    #[serde(rename = "a_prime", with = "hex_uint_vec")]
    pub a_shuffled: Vec<BigUint>,
    pub ts: Vec<Tag>,
}

/// Client-side secrets for one protocol run.
#[derive(Debug, Clone)]
pub struct PsiCaClientState {
    r_c: BigUint,
    r_c_prime: BigUint,
    elements: Vec<ElementBytes>,
    params: GroupParams,
    tally: ExpTally,
}

impl PsiCaClientState {
    pub fn elements(&self) -> &[ElementBytes] {
        &self.elements
    }

    /// Exponentiations performed so far by this client run.
    pub fn exp_tally(&self) -> ExpTally {
        self.tally
    }

    pub fn r_c(&self) -> &BigUint {
        &self.r_c
    }

    pub fn r_c_prime(&self) -> &BigUint {
        &self.r_c_prime
    }
}

/// Fresh per-request server exponents. Deliberately not serializable.
#[derive(Debug, Clone)]
pub struct PsiCaServerEphemeral {
    pub r_s: BigUint,
    pub r_s_prime: BigUint,
}

impl PsiCaServerEphemeral {
    pub fn sample<R: RngCore + CryptoRng>(params: &GroupParams, rng: &mut R) -> Self {
        PsiCaServerEphemeral {
            r_s: params.sample_exponent(rng),
            r_s_prime: params.sample_exponent(rng),
        }
    }
}

/// The server's offline material: `hs_j = H(s_pi(j))` in permuted order.
#[derive(Debug, Clone, Default)]
pub struct ServerSet {
    hs: Vec<BigUint>,
}

impl ServerSet {
    /// Hashes and permutes the diagnosed set.
    pub fn prepare<R: RngCore + CryptoRng>(
        set: &[ElementBytes],
        params: &GroupParams,
        rng: &mut R,
    ) -> Result<Self> {
        let hs = set
            .iter()
            .collect::<HashSet<_>>()
            .into_iter()
            .map(|s| params.hash_to_subgroup(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(ServerSet::from_hashed(hs, rng))
    }

    /// Wraps already hashed elements, applying a fresh permutation.
    pub fn from_hashed<R: RngCore + CryptoRng>(mut hs: Vec<BigUint>, rng: &mut R) -> Self {
        hs.shuffle(rng);
        ServerSet { hs }
    }

    pub fn len(&self) -> usize {
        self.hs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hs.is_empty()
    }

    pub fn hashed(&self) -> &[BigUint] {
        &self.hs
    }
}

/// Order-preserving deduplication.
pub(crate) fn dedup(elements: &[ElementBytes]) -> Vec<ElementBytes> {
    let mut seen = HashSet::with_capacity(elements.len());
    elements.iter().copied().filter(|e| seen.insert(*e)).collect()
}

/// Counts client tags found among server tags; each server tag is consumed
/// by at most one client tag.
pub fn count_matches(client: &[Tag], server: &[Tag]) -> usize {
    let mut pool: HashMap<&Tag, usize> = HashMap::with_capacity(server.len());
    for t in server {
        *pool.entry(t).or_default() += 1;
    }
    client
        .iter()
        .filter(|t| match pool.get_mut(t) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        })
        .count()
}

/// Blinds the client's contact list.
pub fn client_prepare<R: RngCore + CryptoRng>(
    contacts: &[ElementBytes],
    params: &GroupParams,
    rng: &mut R,
) -> Result<(PsiCaClientState, PsiCaRequest)> {
    let elements = dedup(contacts);
    if elements.is_empty() {
        return Err(Error::EmptyInput);
    }
    let r_c = params.sample_exponent(rng);
    let r_c_prime = params.sample_exponent(rng);
    let mut tally = ExpTally::default();

    let x = params.g().modpow(&r_c, params.p());
    tally.key += 1;
    let a = elements
        .iter()
        .map(|c| {
            let h = params.hash_to_subgroup(c)?;
            Ok(h.modpow(&r_c_prime, params.p()))
        })
        .collect::<Result<Vec<_>>>()?;
    tally.element += a.len() as u64;

    let state = PsiCaClientState { r_c, r_c_prime, elements, params: params.clone(), tally };
    Ok((state, PsiCaRequest::new(x, a)))
}

/// Answers a request with fresh per-request exponents.
pub fn server_respond<R: RngCore + CryptoRng>(
    request: &PsiCaRequest,
    set: &ServerSet,
    params: &GroupParams,
    v_max: usize,
    rng: &mut R,
) -> Result<(PsiCaResponse, ExpTally)> {
    let eph = PsiCaServerEphemeral::sample(params, rng);
    server_respond_with(request, set, params, v_max, &eph, rng)
}

/// Answers a request using the given ephemeral exponents.
///
/// Every received value is checked for subgroup membership before it is
/// exponentiated; one bad element rejects the whole request.
pub fn server_respond_with<R: RngCore + CryptoRng>(
    request: &PsiCaRequest,
    set: &ServerSet,
    params: &GroupParams,
    v_max: usize,
    eph: &PsiCaServerEphemeral,
    rng: &mut R,
) -> Result<(PsiCaResponse, ExpTally)> {
    if request.a.len() > v_max {
        return Err(Error::LimitExceeded { len: request.a.len(), max: v_max });
    }
    if request.a.is_empty() {
        return Err(Error::ProtocolViolation("request carries no elements".into()));
    }
    let mut tally = ExpTally::default();
    let p = params.p();

    tally.validation += 1;
    if !params.is_member(&request.x) {
        return Err(Error::ProtocolViolation("X is not in the prime-order subgroup".into()));
    }
    for (i, a) in request.a.iter().enumerate() {
        tally.validation += 1;
        if !params.is_member(a) {
            return Err(Error::ProtocolViolation(format!(
                "element #{i} is not in the prime-order subgroup"
            )));
        }
    }

    let y = params.g().modpow(&eph.r_s, p);
    let shared = request.x.modpow(&eph.r_s, p);
    tally.key += 2;

    let mut a_shuffled: Vec<BigUint> =
        request.a.iter().map(|a| a.modpow(&eph.r_s_prime, p)).collect();
    a_shuffled.shuffle(rng);

    let ts: Vec<Tag> = set
        .hs
        .iter()
        .map(|hs| params.tag(&((&shared * hs.modpow(&eph.r_s_prime, p)) % p)))
        .collect();
    tally.element += (request.a.len() + set.hs.len()) as u64;

    Ok((PsiCaResponse { y, a_shuffled, ts }, tally))
}

/// Recomputes the client tags `tc_i` from a response (in response order).
pub fn client_tags(state: &mut PsiCaClientState, response: &PsiCaResponse) -> Result<Vec<Tag>> {
    if response.a_shuffled.len() != state.elements.len() {
        return Err(Error::ProtocolViolation(format!(
            "response carries {} elements, request had {}",
            response.a_shuffled.len(),
            state.elements.len()
        )));
    }
    let params = &state.params;
    let p = params.p();
    if response.y >= *p || response.a_shuffled.iter().any(|a| a >= p) {
        return Err(Error::ProtocolViolation("response value out of range".into()));
    }
    let inv = mod_inverse(&state.r_c_prime, params.q())
        .ok_or_else(|| Error::Internal("blinding exponent not invertible".into()))?;
    let shared = response.y.modpow(&state.r_c, p);
    state.tally.key += 1;
    let tags = response
        .a_shuffled
        .iter()
        .map(|a| params.tag(&((&shared * a.modpow(&inv, p)) % p)))
        .collect();
    state.tally.element += response.a_shuffled.len() as u64;
    Ok(tags)
}

/// Final client step: the intersection cardinality.
pub fn client_finish(state: &mut PsiCaClientState, response: &PsiCaResponse) -> Result<usize> {
    let tags = client_tags(state, response)?;
    Ok(count_matches(&tags, &response.ts))
}
