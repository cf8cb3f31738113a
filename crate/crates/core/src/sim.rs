//! Synthetic populations, the plaintext oracle and the benchmark runner.
//!
//! Scenario generation uses a seeded ChaCha stream so runs are reproducible;
//! protocol randomness always comes from the OS CSPRNG.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::agent::{ClientAgent, InProcess, Protocol, Tier, TierMap};
use crate::apsi::{self, ApsiClientState, ApsiEpoch};
use crate::arith::ExpTally;
use crate::authority::{Authority, AuthorityConfig, DiagnosisDb};
use crate::error::{Error, Result};
use crate::group::GroupParams;
use crate::hash::{ElementBytes, UidHash};
use crate::ledger::{ContactLedger, LocalCa, ProximityPolicy, SECONDS_PER_DAY};
use crate::psica::{self, ServerSet};
use crate::rsa::RsaAuthorityKey;
use crate::wire;

fn default_start() -> u64 {
    1_600_000_000
}

fn default_mean_duration() -> f64 {
    1200.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub population: usize,
    pub days: u32,
    /// Mean contacts per person per day; each person initiates half.
    pub contacts_per_day: f64,
    pub diagnosis_rate: f64,
    #[serde(default)]
    pub t_min: Option<u64>,
    #[serde(default)]
    pub radius_m: Option<f64>,
    #[serde(default)]
    pub window_days: Option<u32>,
    #[serde(default = "default_mean_duration")]
    pub mean_duration_s: f64,
    #[serde(default = "default_start")]
    pub start_ts: u64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(population: usize, days: u32, contacts_per_day: f64, diagnosis_rate: f64, seed: u64) -> Self {
        ScenarioConfig {
            population,
            days,
            contacts_per_day,
            diagnosis_rate,
            t_min: None,
            radius_m: None,
            window_days: None,
            mean_duration_s: default_mean_duration(),
            start_ts: default_start(),
            seed,
        }
    }

    pub fn policy(&self) -> ProximityPolicy {
        let d = ProximityPolicy::default();
        ProximityPolicy {
            t_min: self.t_min.unwrap_or(d.t_min),
            radius_m: self.radius_m.unwrap_or(d.radius_m),
            window_days: self.window_days.unwrap_or(d.window_days),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.contacts_per_day) {
            return Err(Error::Config("contacts_per_day must be >= 0".into()));
        }
        if !(finite_nonneg(self.diagnosis_rate) && self.diagnosis_rate <= 1.0) {
            return Err(Error::Config("diagnosis_rate must lie in [0, 1]".into()));
        }
        if !(self.mean_duration_s.is_finite() && self.mean_duration_s > 0.0) {
            return Err(Error::Config("mean_duration_s must be positive".into()));
        }
        self.policy().validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One proximity event between two people.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContactEvent {
    pub a: usize,
    pub b: usize,
    pub start: u64,
    pub duration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub uids: Vec<ElementBytes>,
    pub events: Vec<ContactEvent>,
    pub ledgers: Vec<ContactLedger>,
    /// Indices of diagnosed people, ascending.
    pub diagnosed: Vec<usize>,
    pub end_ts: u64,
}

impl Scenario {
    pub fn diagnosis_set(&self) -> Vec<ElementBytes> {
        self.diagnosed.iter().map(|&i| self.uids[i]).collect()
    }
}

/// Builds ledgers and the diagnosis set from `config`; deterministic in the seed.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let policy = config.policy();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let n = config.population;

    let uids: Vec<ElementBytes> = (0..n)
        .map(|_| {
            let mut raw = [0u8; 16];
            rng.fill_bytes(&mut raw);
            ElementBytes::from_uid(&raw, UidHash::default())
        })
        .collect();

    let per_person = config.contacts_per_day / 2.0;
    let poisson = if per_person > 0.0 {
        Some(Poisson::new(per_person).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let durations = Exp::new(1.0 / config.mean_duration_s).map_err(|e| Error::Config(e.to_string()))?;

    let mut events = Vec::new();
    if n >= 2 {
        for day in 0..config.days as u64 {
            let day_start = config.start_ts + day * SECONDS_PER_DAY;
            for a in 0..n {
                let k = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as u64);
                for _ in 0..k {
                    let mut b = rng.gen_range(0..n - 1);
                    if b >= a {
                        b += 1;
                    }
                    let start = day_start + rng.gen_range(0..SECONDS_PER_DAY);
                    let duration = durations.sample(&mut rng).round() as u64;
                    events.push(ContactEvent { a, b, start, duration });
                }
            }
        }
    }

    let mut ledgers: Vec<ContactLedger> = uids.iter().map(|u| ContactLedger::new(Some(*u))).collect();
    for ev in &events {
        ledgers[ev.a].ingest_event(uids[ev.b], ev.start, ev.duration, &policy);
        ledgers[ev.b].ingest_event(uids[ev.a], ev.start, ev.duration, &policy);
    }
    let end_ts = config.start_ts + config.days as u64 * SECONDS_PER_DAY;
    for l in &mut ledgers {
        l.prune(end_ts, &policy);
    }

    let diagnosed = (0..n).filter(|_| rng.gen_bool(config.diagnosis_rate)).collect();
    Ok(Scenario { config: config.clone(), uids, events, ledgers, diagnosed, end_ts })
}

/// |set(C) ∩ set(S)| by direct comparison.
pub fn oracle_intersection(c: &[ElementBytes], s: &[ElementBytes]) -> usize {
    let s: HashSet<&ElementBytes> = s.iter().collect();
    c.iter().collect::<HashSet<_>>().into_iter().filter(|x| s.contains(x)).count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientOutcome {
    pub client: usize,
    pub v: usize,
    pub cardinality: u64,
    pub oracle: u64,
    pub tier: Tier,
    pub oracle_tier: Tier,
}

/// Runs every client's query against an in-process authority.
pub fn run_scenario(
    scenario: &Scenario,
    protocol: Protocol,
    params: &GroupParams,
    rsa: &RsaAuthorityKey,
    tiers: &TierMap,
) -> Result<Vec<ClientOutcome>> {
    let mut db = DiagnosisDb::new();
    for uid in scenario.diagnosis_set() {
        db.insert(uid, scenario.end_ts);
    }
    let config = AuthorityConfig { min_interval: Duration::ZERO, ..Default::default() };
    let authority = Arc::new(Authority::new(params.clone(), Some(rsa.clone()), db, config)?);
    let mut agent = ClientAgent::new(InProcess { authority: authority.clone(), peer: None })
        .with_params(authority.public_params())
        .with_tiers(*tiers);
    let diagnosis = scenario.diagnosis_set();
    let ca = LocalCa(rsa.clone());
    let common = rsa.common();

    scenario
        .ledgers
        .iter()
        .enumerate()
        .map(|(client, ledger)| {
            let mut ledger = ledger.clone();
            if protocol == Protocol::Apsi {
                ledger.sign_all(&ca, &common)?;
            }
            let view = ledger.query_view();
            let contacts: Vec<ElementBytes> = view.iter().map(|v| v.peer_id).collect();
            let oracle = oracle_intersection(&contacts, &diagnosis) as u64;
            let cardinality =
                if view.is_empty() { 0 } else { agent.query_cardinality(&view, protocol)? };
            Ok(ClientOutcome {
                client,
                v: view.len(),
                cardinality,
                oracle,
                tier: tiers.tier(cardinality),
                oracle_tier: tiers.tier(oracle),
            })
        })
        .collect()
}

pub fn outcomes_csv(outcomes: &[ClientOutcome]) -> String {
    let mut out = String::from("client,v,cardinality,oracle,tier,oracle_tier\n");
    for o in outcomes {
        writeln!(out, "{},{},{},{},{},{}", o.client, o.v, o.cardinality, o.oracle, o.tier, o.oracle_tier)
            .expect("write to string");
    }
    out
}

/// Distinct random elements; `shared` of the client's come from `server`.
pub fn planted_client_set<R: Rng>(
    server: &[ElementBytes],
    v: usize,
    shared: usize,
    rng: &mut R,
) -> Vec<ElementBytes> {
    assert!(shared <= v && shared <= server.len(), "overlap larger than a set");
    let taken: HashSet<ElementBytes> = server.iter().copied().collect();
    let mut c: Vec<ElementBytes> = server.choose_multiple(rng, shared).copied().collect();
    let mut seen: HashSet<ElementBytes> = c.iter().copied().collect();
    while c.len() < v {
        let e = ElementBytes::new(rng.gen());
        if !taken.contains(&e) && seen.insert(e) {
            c.push(e);
        }
    }
    c.shuffle(rng);
    c
}

pub fn random_set<R: Rng>(w: usize, rng: &mut R) -> Vec<ElementBytes> {
    let mut seen = HashSet::with_capacity(w);
    let mut s = Vec::with_capacity(w);
    while s.len() < w {
        let e = ElementBytes::new(rng.gen());
        if seen.insert(e) {
            s.push(e);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub protocol: Protocol,
    pub v: usize,
    pub w: usize,
    pub trials: usize,
    /// Offline repetitions; online trials reuse the last offline result.
    pub offline_trials: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(protocol: Protocol, v: usize, w: usize, trials: usize) -> Self {
        BenchConfig { protocol, v, w, trials, offline_trials: trials, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseStats {
    pub ms_mean: f64,
    pub exp: ExpTally,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub protocol: Protocol,
    pub v: usize,
    pub w: usize,
    pub trials: usize,
    pub client_offline: PhaseStats,
    pub client_online: PhaseStats,
    pub server_offline: PhaseStats,
    pub server_online: PhaseStats,
}

pub const CSV_HEADER: &str = "protocol,v,w,side,phase,ms_mean,modexp,bytes";

impl BenchResult {
    fn rows(&self) -> [(&'static str, &'static str, &PhaseStats); 4] {
        [
            ("client", "offline", &self.client_offline),
            ("client", "online", &self.client_online),
            ("server", "offline", &self.server_offline),
            ("server", "online", &self.server_online),
        ]
    }

    /// CSV rows without header; `bytes` counts what that side sends in that phase.
    pub fn csv_rows(&self) -> String {
        let proto = match self.protocol {
            Protocol::Psica => "psica",
            Protocol::Apsi => "apsi",
        };
        let mut out = String::new();
        for (side, phase, s) in self.rows() {
            writeln!(
                out,
                "{proto},{},{},{side},{phase},{:.3},{},{}",
                self.v,
                self.w,
                s.ms_mean,
                s.exp.total(),
                s.bytes
            )
            .expect("write to string");
        }
        out
    }

    /// Human-readable table with reference timings when available.
    pub fn render(&self) -> String {
        let reference = reference_timings(self.protocol, self.v, self.w);
        let mut out = format!(
            "{:?} v={} w={} trials={}\n{:<8}{:<9}{:>12}{:>14}{:>10}{:>12}\n",
            self.protocol, self.v, self.w, self.trials, "side", "phase", "ms_mean", "ref_ms", "modexp", "bytes"
        );
        for (i, (side, phase, s)) in self.rows().into_iter().enumerate() {
            let r = reference.map(|r| format!("{:.2}", r[i])).unwrap_or_else(|| "-".into());
            writeln!(out, "{side:<8}{phase:<9}{:>12.2}{r:>14}{:>10}{:>12}", s.ms_mean, s.exp.total(), s.bytes)
                .expect("write to string");
        }
        out
    }
}

/// Reference timings in ms (client offline, client online, server offline,
/// server online), measured on a 2.3 GHz Core i5 with 1024/160-bit
/// parameters. Reported next to measurements and never asserted.
pub fn reference_timings(protocol: Protocol, v: usize, w: usize) -> Option<[f64; 4]> {
    const PSICA: &[(usize, usize, [f64; 4])] = &[
        (1_000, 1_000, [210.6, 100.85, 388.05, 107.5]),
        (1_000, 10_000, [201.2, 978.7, 2213.5, 1003.8]),
        (1_000, 100_000, [202.95, 9766.1, 20054.1, 9925.6]),
        (1_000, 1_000_000, [202.4, 96685.8, 194289.6, 98631.1]),
        (10, 100_000, [2.7, 9852.95, 20012.75, 9560.8]),
        (100, 100_000, [22.6, 9854.2, 20218.1, 9968.65]),
        (10_000, 100_000, [1990.4, 9787.45, 20246.45, 9970.65]),
    ];
    const APSI: &[(usize, usize, [f64; 4])] = &[
        (1_000, 1_000, [1082.25, 30.55, 508.6, 512.55]),
        (1_000, 10_000, [1116.15, 25.3, 4727.15, 483.85]),
        (1_000, 100_000, [1233.15, 49.25, 46202.1, 496.0]),
        (1_000, 1_000_000, [1019.45, 118.0, 454721.25, 509.55]),
        (10, 100_000, [106.7, 15.75, 46675.4, 6.45]),
        (100, 100_000, [302.4, 22.75, 46646.0, 61.4]),
        (10_000, 100_000, [9507.8, 170.3, 46946.7, 4776.35]),
    ];
    let table = match protocol {
        Protocol::Psica => PSICA,
        Protocol::Apsi => APSI,
    };
    table.iter().find(|(tv, tw, _)| *tv == v && *tw == w).map(|(_, _, t)| *t)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

struct Acc {
    ms: f64,
    exp: ExpTally,
    bytes: u64,
    n: usize,
}

impl Acc {
    fn new() -> Self {
        Acc { ms: 0.0, exp: ExpTally::default(), bytes: 0, n: 0 }
    }
    fn add(&mut self, d: Duration, exp: ExpTally, bytes: usize) {
        self.ms += ms(d);
        self.exp = exp;
        self.bytes = bytes as u64;
        self.n += 1;
    }
    fn stats(&self) -> PhaseStats {
        PhaseStats { ms_mean: self.ms / self.n.max(1) as f64, exp: self.exp, bytes: self.bytes }
    }
}

/// Times both parties over `trials` runs. Each run checks its cardinality
/// against the planted overlap.
pub fn run_bench(config: &BenchConfig, params: &GroupParams, rsa: &RsaAuthorityKey) -> Result<BenchResult> {
    if config.trials == 0 || config.v == 0 {
        return Err(Error::Config("trials and v must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut os = rand::rngs::OsRng;
    let server_elems = random_set(config.w, &mut rng);
    let shared = config.v.min(config.w) / 2;
    let (mut c_off, mut c_on, mut s_off, mut s_on) = (Acc::new(), Acc::new(), Acc::new(), Acc::new());
    let v_max = config.v.max(psica::DEFAULT_V_MAX);
    let check = |got: usize| {
        if got != shared {
            return Err(Error::Internal(format!("cardinality {got}, planted {shared}")));
        }
        Ok(())
    };

    match config.protocol {
        Protocol::Psica => {
            let mut set = ServerSet::default();
            for _ in 0..config.offline_trials.clamp(1, config.trials) {
                let t = Instant::now();
                set = ServerSet::prepare(&server_elems, params, &mut os)?;
                let exp = ExpTally { element: config.w as u64, ..Default::default() };
                s_off.add(t.elapsed(), exp, 0);
            }
            for _ in 0..config.trials {
                let c = planted_client_set(&server_elems, config.v, shared, &mut rng);
                let t = Instant::now();
                let (mut state, req) = psica::client_prepare(&c, params, &mut os)?;
                c_off.add(t.elapsed(), state.exp_tally(), 0);
                let req_bytes = wire::to_bytes(&req);

                let t = Instant::now();
                let req = wire::from_bytes(&req_bytes)?;
                let (resp, tally) = psica::server_respond(&req, &set, params, v_max, &mut os)?;
                let resp_bytes = wire::to_bytes(&resp);
                s_on.add(t.elapsed(), tally, resp_bytes.len());

                let before = state.exp_tally();
                let t = Instant::now();
                let resp = wire::from_bytes(&resp_bytes)?;
                let got = psica::client_finish(&mut state, &resp)?;
                let after = state.exp_tally();
                let online = ExpTally {
                    element: after.element - before.element,
                    key: after.key - before.key,
                    validation: after.validation - before.validation,
                };
                c_on.add(t.elapsed(), online, req_bytes.len());
                check(got)?;
            }
        }
        Protocol::Apsi => {
            let common = rsa.common();
            let mut epoch = None;
            for i in 0..config.offline_trials.clamp(1, config.trials) {
                let t = Instant::now();
                let e = ApsiEpoch::new(&format!("bench-{i}"), &server_elems, &common, &mut os)?;
                let digest_bytes = wire::to_bytes(e.digest()).len();
                s_off.add(t.elapsed(), e.exp_tally(), digest_bytes);
                epoch = Some(e);
            }
            let epoch = epoch.expect("at least one offline trial");
            let signed: Vec<_> = planted_client_set(&server_elems, config.v, shared, &mut rng)
                .into_iter()
                .map(|c| Ok((c, Some(apsi::ca_sign(&c, rsa)?))))
                .collect::<Result<_>>()?;
            for _ in 0..config.trials {
                let mut state = ApsiClientState::new(signed.iter().cloned());
                let t = Instant::now();
                let req = apsi::client_request(&mut state, &common, epoch.epoch_id(), &mut os)?;
                c_off.add(t.elapsed(), state.exp_tally(), 0);
                let req_bytes = wire::to_bytes(&req);

                let t = Instant::now();
                let req = wire::from_bytes(&req_bytes)?;
                let (resp, tally) = apsi::server_respond(&req, &epoch, &common, v_max)?;
                let resp_bytes = wire::to_bytes(&resp);
                s_on.add(t.elapsed(), tally, resp_bytes.len());

                let before = state.exp_tally();
                let t = Instant::now();
                let resp = wire::from_bytes(&resp_bytes)?;
                let got = apsi::client_finish(&mut state, &common, epoch.digest(), &resp)?;
                let after = state.exp_tally();
                let online = ExpTally {
                    element: after.element - before.element,
                    key: after.key - before.key,
                    validation: after.validation - before.validation,
                };
                c_on.add(t.elapsed(), online, req_bytes.len());
                check(got)?;
            }
        }
    }

    Ok(BenchResult {
        protocol: config.protocol,
        v: config.v,
        w: config.w,
        trials: config.trials,
        client_offline: c_off.stats(),
        client_online: c_on.stats(),
        server_offline: s_off.stats(),
        server_online: s_on.stats(),
    })
}
