//! End-user side: query scheduling, protocol runs against the authority,
//! warnings and consented feedback.

use std::collections::BTreeMap;
use std::io::Read as _;
use std::net::IpAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use num_bigint::BigUint;
use rand::rngs::OsRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::apsi::{self, ApsiClientState, ApsiDigest, ApsiResponse};
use crate::authority::{Authority, ErrorBody, FeedbackReport, PublicParams, SignRequest, SignResponse};
use crate::error::{Error, Result};
use crate::hash::ElementBytes;
use crate::ledger::{SignatureAuthority, ViewEntry};
use crate::psica::{self, PsiCaResponse};
use crate::wire;

pub const DEFAULT_WINDOW_SECONDS: u64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    None,
    Low,
    Elevated,
    High,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tier::None => "none",
            Tier::Low => "low",
            Tier::Elevated => "elevated",
            Tier::High => "high",
        })
    }
}

/// Lower cardinality bounds of the low, elevated and high tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierMap {
    pub low: u64,
    pub elevated: u64,
    pub high: u64,
}

impl Default for TierMap {
    fn default() -> Self {
        TierMap { low: 1, elevated: 2, high: 5 }
    }
}

impl TierMap {
    /// Thresholds must satisfy `1 = low <= elevated <= high`, so that only
    /// zero maps to `None`.
    pub fn new(low: u64, elevated: u64, high: u64) -> Result<Self> {
        if low != 1 || elevated < low || high < elevated {
            return Err(Error::Config(format!(
                "tier thresholds must satisfy 1 = low <= elevated <= high (got {low}/{elevated}/{high})"
            )));
        }
        Ok(TierMap { low, elevated, high })
    }

    pub fn tier(&self, cardinality: u64) -> Tier {
        match cardinality {
            c if c >= self.high => Tier::High,
            c if c >= self.elevated => Tier::Elevated,
            c if c >= self.low => Tier::Low,
            _ => Tier::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub cardinality: u64,
    pub tier: Tier,
    pub issued_at: u64,
}

impl Warning {
    pub fn new(cardinality: u64, tiers: &TierMap, issued_at: u64) -> Self {
        Warning { cardinality, tier: tiers.tier(cardinality), issued_at }
    }
}

/// Next query time, uniform in `[now, now + window)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuerySchedule {
    window_seconds: u64,
    next_fire: u64,
}

impl QuerySchedule {
    pub fn new<R: Rng>(window_seconds: u64, now: u64, rng: &mut R) -> Result<Self> {
        if window_seconds == 0 {
            return Err(Error::Config("query window must be positive".into()));
        }
        let mut s = QuerySchedule { window_seconds, next_fire: now };
        s.reschedule(now, rng);
        Ok(s)
    }

    pub fn reschedule<R: Rng>(&mut self, now: u64, rng: &mut R) {
        self.next_fire = now + rng.gen_range(0..self.window_seconds);
    }

    pub fn next_fire(&self) -> u64 {
        self.next_fire
    }

    pub fn window_seconds(&self) -> u64 {
        self.window_seconds
    }
}

/// Time source for the schedule loop.
pub trait Clock {
    fn now(&self) -> u64;
    fn sleep_until(&mut self, ts: u64);
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }

    fn sleep_until(&mut self, ts: u64) {
        let now = self.now();
        if ts > now {
            std::thread::sleep(Duration::from_secs(ts - now));
        }
    }
}

/// Runs `job` at each scheduled time, redrawing after every run, until
/// `max_runs` is reached or `job` returns `false`. Returns the fire times.
pub fn schedule_loop<C: Clock, R: Rng>(
    schedule: &mut QuerySchedule,
    clock: &mut C,
    rng: &mut R,
    max_runs: Option<usize>,
    mut job: impl FnMut(u64) -> bool,
) -> Vec<u64> {
    let mut fired = Vec::new();
    while max_runs.map_or(true, |m| fired.len() < m) {
        clock.sleep_until(schedule.next_fire());
        let now = clock.now().max(schedule.next_fire());
        fired.push(now);
        let keep_going = job(now);
        schedule.reschedule(now, rng);
        if !keep_going {
            break;
        }
    }
    fired
}

/// Request/response transport to the authority.
pub trait Transport: Send + Sync {
    /// Returns the HTTP status and body; `Err` only for transport failures.
    fn request(&self, method: &str, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>)>;
}

pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        HttpTransport { base: base_url.trim_end_matches('/').to_owned(), agent }
    }
}

impl Transport for HttpTransport {
    fn request(&self, method: &str, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>)> {
        let req = self
            .agent
            .request(method, &format!("{}{}", self.base, path))
            .set("Content-Type", "application/json");
        let result = if method == "GET" { req.call() } else { req.send_bytes(body) };
        let resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(ureq::Error::Transport(t)) => return Err(Error::Network(t.to_string())),
        };
        let status = resp.status();
        let mut buf = Vec::new();
        resp.into_reader().read_to_end(&mut buf).map_err(|e| Error::Network(e.to_string()))?;
        Ok((status, buf))
    }
}

/// Calls an in-process authority directly.
pub struct InProcess {
    pub authority: Arc<Authority>,
    pub peer: Option<IpAddr>,
}

impl Transport for InProcess {
    fn request(&self, method: &str, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>)> {
        let reply = self.authority.handle(method, path, body, self.peer);
        Ok((reply.status, reply.body))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub method: String,
    pub path: String,
    pub request: Vec<u8>,
    pub response: Vec<u8>,
    pub status: u16,
}

/// Wraps a transport and keeps every exchange.
pub struct Recording<T> {
    inner: T,
    log: Mutex<Vec<Exchange>>,
}

impl<T: Transport> Recording<T> {
    pub fn new(inner: T) -> Self {
        Recording { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.lock().expect("capture lock").clone()
    }

    pub fn clear(&self) {
        self.log.lock().expect("capture lock").clear();
    }
}

impl<T: Transport> Transport for Recording<T> {
    fn request(&self, method: &str, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>)> {
        let (status, response) = self.inner.request(method, path, body)?;
        self.log.lock().expect("capture lock").push(Exchange {
            method: method.into(),
            path: path.into(),
            request: body.to_vec(),
            response: response.clone(),
            status,
        });
        Ok((status, response))
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn request(&self, method: &str, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>)> {
        (**self).request(method, path, body)
    }
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn request(&self, method: &str, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>)> {
        (**self).request(method, path, body)
    }
}

fn error_from_reply(status: u16, body: &[u8]) -> Error {
    let Ok(e) = serde_json::from_slice::<ErrorBody>(body) else {
        return Error::ProtocolViolation(format!("server returned status {status}"));
    };
    match e.error.as_str() {
        "stale_epoch" => Error::StaleEpoch {
            got: String::new(),
            current: e.current_epoch.unwrap_or_default(),
        },
        "limit_exceeded" => Error::ProtocolViolation(e.message),
        "rate_limited" => Error::RateLimited,
        "rejected_report" => Error::RejectedReport(e.message),
        "retry_later" => Error::RetryLater(e.message),
        _ if status >= 500 => Error::Network(format!("server error {status}: {}", e.message)),
        _ if status == 404 => Error::Config(e.message),
        _ => Error::ProtocolViolation(e.message),
    }
}

/// Sends `body` and decodes a successful JSON reply.
pub fn call<T: Transport + ?Sized, M: for<'de> Deserialize<'de>>(
    transport: &T,
    method: &str,
    path: &str,
    body: &[u8],
) -> Result<M> {
    let (status, resp) = transport.request(method, path, body)?;
    if status != 200 {
        return Err(error_from_reply(status, &resp));
    }
    wire::from_bytes(&resp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 4, base_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    /// Retries network failures with exponential backoff; other errors return at once.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(Error::Network(msg)) if attempt + 1 < self.attempts.max(1) => {
                    let delay = self.base_delay * 2u32.pow(attempt);
                    log::warn!("network failure ({msg}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Psica,
    Apsi,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psica" => Ok(Protocol::Psica),
            "apsi" => Ok(Protocol::Apsi),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Protocol client bound to one authority.
pub struct ClientAgent<T> {
    transport: T,
    retry: RetryPolicy,
    tiers: TierMap,
    params: Option<PublicParams>,
    digest: Option<ApsiDigest>,
}

impl<T: Transport> ClientAgent<T> {
    pub fn new(transport: T) -> Self {
        ClientAgent {
            transport,
            retry: RetryPolicy::default(),
            tiers: TierMap::default(),
            params: None,
            digest: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_tiers(mut self, tiers: TierMap) -> Self {
        self.tiers = tiers;
        self
    }

    /// Uses known parameters instead of fetching them.
    pub fn with_params(mut self, params: PublicParams) -> Self {
        self.params = Some(params);
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn params(&mut self) -> Result<&PublicParams> {
        if self.params.is_none() {
            let p: PublicParams =
                self.retry.run(|| call(&self.transport, "GET", "/v1/params", b""))?;
            self.params = Some(p);
        }
        Ok(self.params.as_ref().expect("just set"))
    }

    pub fn cached_digest(&self) -> Option<&ApsiDigest> {
        self.digest.as_ref()
    }

    fn fetch_digest(&mut self) -> Result<ApsiDigest> {
        let d: ApsiDigest = self.retry.run(|| call(&self.transport, "GET", "/v1/apsi/digest", b""))?;
        self.digest = Some(d.clone());
        Ok(d)
    }

    /// Runs one protocol and returns the cardinality.
    pub fn query_cardinality(&mut self, view: &[ViewEntry], protocol: Protocol) -> Result<u64> {
        if view.is_empty() {
            return Err(Error::EmptyInput);
        }
        match protocol {
            Protocol::Psica => self.query_psica(view),
            Protocol::Apsi => self.query_apsi(view),
        }
    }

    /// Runs a query and derives the local warning.
    pub fn run_query(&mut self, view: &[ViewEntry], protocol: Protocol, now: u64) -> Result<Warning> {
        let c = self.query_cardinality(view, protocol)?;
        Ok(Warning::new(c, &self.tiers, now))
    }

    fn query_psica(&mut self, view: &[ViewEntry]) -> Result<u64> {
        let group = self.params()?.group_params()?;
        let contacts: Vec<ElementBytes> = view.iter().map(|v| v.peer_id).collect();
        let transport = &self.transport;
        self.retry.run(|| {
            let (mut state, req) = psica::client_prepare(&contacts, &group, &mut OsRng)?;
            let resp: PsiCaResponse =
                call(transport, "POST", "/v1/psica/query", &wire::to_bytes(&req))?;
            Ok(psica::client_finish(&mut state, &resp)? as u64)
        })
    }

    fn query_apsi(&mut self, view: &[ViewEntry]) -> Result<u64> {
        let common = self
            .params()?
            .apsi_common()?
            .ok_or_else(|| Error::Config("authority does not offer APSI".into()))?;
        let mut state = ApsiClientState::new(view.iter().map(|v| (v.peer_id, v.sigma.clone())));
        if let Some(index) = view.iter().position(|v| v.sigma.is_none()) {
            return Err(Error::UnauthorizedElement { index });
        }
        let mut refetched = false;
        loop {
            let digest = match self.digest.clone() {
                Some(d) => d,
                None => self.fetch_digest()?,
            };
            let transport = &self.transport;
            let result = self.retry.run(|| {
                let req = apsi::client_request(&mut state, &common, &digest.epoch, &mut OsRng)?;
                let resp: ApsiResponse =
                    call(transport, "POST", "/v1/apsi/query", &wire::to_bytes(&req))?;
                Ok(apsi::client_finish(&mut state, &common, &digest, &resp)? as u64)
            });
            match result {
                Err(Error::StaleEpoch { .. }) if !refetched => {
                    self.digest = None;
                    refetched = true;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackOutcome {
    Acked,
    Skipped,
}

/// Posts an anonymous report; nothing is sent without consent.
pub fn send_feedback<T: Transport + ?Sized>(
    transport: &T,
    warning: &Warning,
    demographics: BTreeMap<String, String>,
    coarse_location: &str,
    consent: bool,
) -> Result<FeedbackOutcome> {
    if !consent {
        return Ok(FeedbackOutcome::Skipped);
    }
    if warning.cardinality < 1 {
        return Err(Error::Precondition("feedback requires a non-zero intersection".into()));
    }
    let report = FeedbackReport {
        demographics,
        intersection_size: warning.cardinality,
        coarse_location: coarse_location.to_owned(),
    };
    let _: serde_json::Value = call(transport, "POST", "/v1/feedback", &wire::to_bytes(&report))?;
    Ok(FeedbackOutcome::Acked)
}

/// CA reached over a transport; transport failures become retry-later.
pub struct RemoteCa<T>(pub T);

impl<T: Transport> SignatureAuthority for RemoteCa<T> {
    fn sign(&self, requester: Option<&ElementBytes>, peer: &ElementBytes) -> Result<BigUint> {
        let body = wire::to_bytes(&SignRequest { peer: *peer, requester: requester.copied() });
        match call::<_, SignResponse>(&self.0, "POST", "/v1/ca/sign", &body) {
            Ok(r) => Ok(r.sigma),
            Err(Error::Network(m)) => Err(Error::RetryLater(m)),
            Err(e) => Err(e),
        }
    }
}

/// Process exit code for a client-side failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Network(_) | Error::RetryLater(_) | Error::RateLimited => 3,
        Error::Config(_)
        | Error::Input(_)
        | Error::Io(_)
        | Error::Precondition(_)
        | Error::InvalidParams(_)
        | Error::EmptyInput => 4,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authority::{AuthorityConfig, DiagnosisDb};
    use crate::group::GroupParams;
    use crate::hash::UidHash;
    use crate::rsa::RsaAuthorityKey;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn uid(i: u32) -> ElementBytes {
        ElementBytes::from_uid(&i.to_be_bytes(), UidHash::default())
    }

    #[test]
    fn tier_map_boundaries() {
        let t = TierMap::default();
        let tiers: Vec<Tier> = (0..7).map(|c| t.tier(c)).collect();
        use Tier::*;
        assert_eq!(tiers, vec![None, Low, Elevated, Elevated, Elevated, High, High]);
        assert!(tiers.windows(2).all(|w| w[0] <= w[1]));
        assert!(TierMap::new(0, 2, 5).is_err());
        assert!(TierMap::new(1, 6, 5).is_err());
    }

    #[test]
    fn zero_window_rejected() {
        assert!(matches!(QuerySchedule::new(0, 0, &mut OsRng), Err(Error::Config(_))));
    }

    struct FakeClock(u64);
    impl Clock for FakeClock {
        fn now(&self) -> u64 {
            self.0
        }
        fn sleep_until(&mut self, ts: u64) {
            self.0 = self.0.max(ts);
        }
    }

    #[test]
    fn schedule_gaps_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut clock = FakeClock(1_000_000);
        let mut s = QuerySchedule::new(DEFAULT_WINDOW_SECONDS, clock.0, &mut rng).unwrap();
        assert!(s.next_fire() >= clock.0 && s.next_fire() < clock.0 + DEFAULT_WINDOW_SECONDS);
        let fires = schedule_loop(&mut s, &mut clock, &mut rng, Some(1001), |_| true);
        let gaps: Vec<f64> = fires.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
        assert_eq!(gaps.len(), 1000);
        assert!(gaps.iter().all(|g| *g < DEFAULT_WINDOW_SECONDS as f64));
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((mean - 43_200.0).abs() <= 0.05 * 43_200.0, "mean gap {mean}");
    }

    #[test]
    fn schedule_loop_stops_on_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut clock = FakeClock(0);
        let mut s = QuerySchedule::new(10, 0, &mut rng).unwrap();
        let mut n = 0;
        let fired = schedule_loop(&mut s, &mut clock, &mut rng, None, |_| {
            n += 1;
            n < 3
        });
        assert_eq!(fired.len(), 3);
    }

    struct Flaky {
        fails: AtomicU32,
        inner: InProcess,
    }
    impl Transport for Flaky {
        fn request(&self, m: &str, p: &str, b: &[u8]) -> Result<(u16, Vec<u8>)> {
            if self.fails.load(Ordering::SeqCst) > 0 {
                self.fails.fetch_sub(1, Ordering::SeqCst);
                return Err(Error::Network("connection reset".into()));
            }
            self.inner.request(m, p, b)
        }
    }

    fn toy_authority() -> Arc<Authority> {
        let config = AuthorityConfig { min_interval: Duration::ZERO, ..Default::default() };
        Arc::new(
            Authority::new(GroupParams::toy(), Some(RsaAuthorityKey::toy()), DiagnosisDb::new(), config)
                .unwrap(),
        )
    }

    #[test]
    fn retries_network_failures() {
        let authority = toy_authority();
        let flaky = Flaky { fails: AtomicU32::new(2), inner: InProcess { authority, peer: None } };
        let retry = RetryPolicy { attempts: 3, base_delay: Duration::ZERO };
        let mut agent = ClientAgent::new(flaky).with_retry(retry);
        let view = vec![ViewEntry { peer_id: uid(1), sigma: None }];
        assert_eq!(agent.query_cardinality(&view, Protocol::Psica).unwrap(), 0);

        let authority = toy_authority();
        let flaky = Flaky { fails: AtomicU32::new(5), inner: InProcess { authority, peer: None } };
        let mut agent = ClientAgent::new(flaky).with_retry(retry);
        assert!(matches!(agent.query_cardinality(&view, Protocol::Psica), Err(Error::Network(_))));
    }

    #[test]
    fn consent_gate_makes_no_call() {
        let rec = Recording::new(InProcess { authority: toy_authority(), peer: None });
        let w = Warning::new(3, &TierMap::default(), 0);
        assert_eq!(send_feedback(&rec, &w, BTreeMap::new(), "R5", false).unwrap(), FeedbackOutcome::Skipped);
        assert!(rec.exchanges().is_empty());
        assert_eq!(send_feedback(&rec, &w, BTreeMap::new(), "R5", true).unwrap(), FeedbackOutcome::Acked);
        assert_eq!(rec.exchanges().len(), 1);
    }

    #[test]
    fn apsi_stale_digest_is_refetched() {
        let authority = toy_authority();
        authority.add_diagnosis(uid(1)).unwrap();
        let key = RsaAuthorityKey::toy();
        let view: Vec<ViewEntry> = (1..=3)
            .map(|i| ViewEntry { peer_id: uid(i), sigma: Some(apsi::ca_sign(&uid(i), &key).unwrap()) })
            .collect();
        let mut agent = ClientAgent::new(InProcess { authority: authority.clone(), peer: None });
        let first = agent.query_cardinality(&view, Protocol::Apsi).unwrap();
        let old_epoch = agent.cached_digest().unwrap().epoch.clone();
        authority.rotate_epoch().unwrap();
        let second = agent.query_cardinality(&view, Protocol::Apsi).unwrap();
        assert_ne!(agent.cached_digest().unwrap().epoch, old_epoch);
        // The toy modulus is tiny, so tag collisions can only add matches.
        assert!(first >= 1 && second >= 1);
    }

    #[test]
    fn unsigned_view_rejected_before_network() {
        let rec = Recording::new(InProcess { authority: toy_authority(), peer: None });
        let mut agent = ClientAgent::new(&rec).with_params(toy_authority().public_params());
        let view = vec![ViewEntry { peer_id: uid(1), sigma: None }];
        assert!(matches!(
            agent.query_cardinality(&view, Protocol::Apsi),
            Err(Error::UnauthorizedElement { index: 0 })
        ));
        assert!(rec.exchanges().is_empty());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Network("x".into())), 3);
        assert_eq!(exit_code(&Error::Config("x".into())), 4);
        assert_eq!(exit_code(&Error::ProtocolViolation("x".into())), 2);
        assert_eq!(exit_code(&Error::StaleEpoch { got: "a".into(), current: "b".into() }), 2);
    }
}
