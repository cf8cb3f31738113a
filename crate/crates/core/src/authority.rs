//! The health authority: diagnosis database, per-epoch precomputation,
//! protocol endpoints and the anonymous feedback sink.
//!
//! Request handling is transport-agnostic (`Authority::handle`); `serve`
//! binds it to HTTP.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use num_bigint::BigUint;
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};

use crate::apsi::{self, ApsiDigest, ApsiEpoch, ApsiRequest, ApsiResponse};
use crate::arith::ExpTally;
use crate::error::{Error, Result};
use crate::group::GroupParams;
use crate::hash::ElementBytes;
use crate::psica::{self, PsiCaRequest, PsiCaResponse, ServerSet, DEFAULT_V_MAX};
use crate::rsa::{ApsiCommon, RsaAuthorityKey};
use crate::wire::{self, hex_uint};

pub const DEFAULT_EPOCH: Duration = Duration::from_secs(24 * 3600);
pub const DEFAULT_MIN_INTERVAL: Duration = Duration::from_secs(3600);
const MAX_BODY_BYTES: usize = 256 << 20;

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Diagnosed identifiers with set semantics and an insertion log.
#[derive(Debug, Clone, Default)]
pub struct DiagnosisDb {
    set: HashSet<ElementBytes>,
    log: Vec<(u64, ElementBytes)>,
    version: u64,
}

impl DiagnosisDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `uid`; returns whether it was new.
    pub fn insert(&mut self, uid: ElementBytes, ts: u64) -> bool {
        let new = self.set.insert(uid);
        if new {
            self.log.push((ts, uid));
            self.version += 1;
        }
        new
    }

    pub fn contains(&self, uid: &ElementBytes) -> bool {
        self.set.contains(uid)
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    /// Bumped on every effective change.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn log(&self) -> &[(u64, ElementBytes)] {
        &self.log
    }

    /// Elements in insertion order.
    pub fn elements(&self) -> Vec<ElementBytes> {
        self.log.iter().map(|(_, e)| *e).collect()
    }

    /// Parses newline-delimited lowercase hex; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut db = DiagnosisDb::new();
        let now = unix_now();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let uid: ElementBytes = line
                .parse()
                .map_err(|_| Error::Input(format!("diagnosis line {}: bad hash {line:?}", i + 1)))?;
            db.insert(uid, now);
        }
        Ok(db)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => DiagnosisDb::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(DiagnosisDb::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn to_file_string(&self) -> String {
        self.log.iter().map(|(_, e)| e.to_hex() + "\n").collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_file_string())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

/// Anonymous post-warning report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackReport {
    pub demographics: BTreeMap<String, String>,
    pub intersection_size: u64,
    pub coarse_location: String,
}

const FORBIDDEN_KEY_TOKENS: &[&str] = &[
    "uid", "id", "userid", "user", "contact", "contacts", "peer", "ip", "ipaddr", "address",
    "phone", "email", "name", "device", "mac", "imei", "imsi", "sigma", "signature", "ledger",
];

fn looks_identifying(value: &str) -> bool {
    let hex_run = value
        .split(|c: char| !c.is_ascii_hexdigit())
        .map(str::len)
        .max()
        .unwrap_or(0);
    let ipv4 = value.split('.').count() == 4 && value.split('.').all(|p| p.parse::<u8>().is_ok());
    hex_run >= 16 || ipv4 || value.contains('@')
}

impl FeedbackReport {
    /// Rejects reports carrying identifiers or contact data.
    pub fn screen(&self) -> Result<()> {
        let reject = |why: String| Err(Error::RejectedReport(why));
        if self.intersection_size < 1 {
            return reject("intersection_size must be at least 1".into());
        }
        if self.demographics.len() > 16 {
            return reject("too many demographic fields".into());
        }
        for (k, v) in &self.demographics {
            let lower = k.to_ascii_lowercase();
            if lower
                .split(|c: char| !c.is_ascii_alphanumeric())
                .any(|t| FORBIDDEN_KEY_TOKENS.contains(&t))
            {
                return reject(format!("forbidden field {k:?}"));
            }
            if k.len() > 64 || v.len() > 64 || looks_identifying(v) {
                return reject(format!("field {k:?} looks identifying"));
            }
        }
        if self.coarse_location.len() > 64 || looks_identifying(&self.coarse_location) {
            return reject("coarse_location looks identifying".into());
        }
        Ok(())
    }
}

/// Public parameters served to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicParams {
    pub group: GroupWire,
    pub apsi: Option<ApsiWire>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupWire {
    #[serde(with = "hex_uint")]
    pub p: BigUint,
    #[serde(with = "hex_uint")]
    pub q: BigUint,
    #[serde(with = "hex_uint")]
    pub g: BigUint,
    pub kappa: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApsiWire {
    #[serde(with = "hex_uint")]
    pub n: BigUint,
    #[serde(with = "hex_uint")]
    pub e: BigUint,
    #[serde(with = "hex_uint")]
    pub g: BigUint,
}

impl PublicParams {
    pub fn group_params(&self) -> Result<GroupParams> {
        let g = &self.group;
        GroupParams::new(g.p.clone(), g.q.clone(), g.g.clone(), g.kappa)
    }

    pub fn apsi_common(&self) -> Result<Option<ApsiCommon>> {
        self.apsi
            .as_ref()
            .map(|a| ApsiCommon::new(a.n.clone(), a.e.clone(), a.g.clone()))
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignRequest {
    pub peer: ElementBytes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requester: Option<ElementBytes>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignResponse {
    #[serde(with = "hex_uint")]
    pub sigma: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_epoch: Option<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct AuthorityConfig {
    pub v_max: usize,
    pub epoch_len: Duration,
    pub min_interval: Duration,
}

impl Default for AuthorityConfig {
    fn default() -> Self {
        AuthorityConfig {
            v_max: DEFAULT_V_MAX,
            epoch_len: DEFAULT_EPOCH,
            min_interval: DEFAULT_MIN_INTERVAL,
        }
    }
}

/// Precomputation for one (epoch, database version) pair. Swapped as a whole.
pub struct EpochCache {
    epoch_id: String,
    db_version: u64,
    started: Instant,
    elements: Vec<ElementBytes>,
    psica: ServerSet,
    apsi: OnceLock<std::result::Result<Arc<ApsiEpoch>, String>>,
}

impl EpochCache {
    pub fn epoch_id(&self) -> &str {
        &self.epoch_id
    }

    pub fn w(&self) -> usize {
        self.psica.len()
    }

    pub fn server_set(&self) -> &ServerSet {
        &self.psica
    }

    pub fn db_version(&self) -> u64 {
        self.db_version
    }
}

/// HTTP-level reply from `Authority::handle`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Reply {
    fn json<T: Serialize>(value: &T) -> Reply {
        Reply { status: 200, body: wire::to_bytes(value) }
    }
}

pub fn status_for(err: &Error) -> u16 {
    match err {
        Error::StaleEpoch { .. } => 409,
        Error::LimitExceeded { .. } => 413,
        Error::RejectedReport(_) => 422,
        Error::RateLimited => 429,
        Error::Config(_) => 404,
        Error::ProtocolViolation(_)
        | Error::Input(_)
        | Error::Json(_)
        | Error::EmptyInput
        | Error::UnauthorizedElement { .. } => 400,
        _ => 500,
    }
}

pub fn error_reply(err: &Error) -> Reply {
    let current_epoch = match err {
        Error::StaleEpoch { current, .. } => Some(current.clone()),
        _ => None,
    };
    let body = ErrorBody { error: err.kind().into(), message: err.to_string(), current_epoch };
    Reply { status: status_for(err), body: wire::to_bytes(&body) }
}

pub struct Authority {
    params: GroupParams,
    rsa: Option<RsaAuthorityKey>,
    config: AuthorityConfig,
    db: RwLock<DiagnosisDb>,
    memo: Mutex<HashMap<ElementBytes, BigUint>>,
    cache: RwLock<Arc<EpochCache>>,
    epoch_seq: AtomicU64,
    last_query: Mutex<HashMap<IpAddr, Instant>>,
    feedback: Mutex<Vec<FeedbackReport>>,
    feedback_path: Option<PathBuf>,
}

impl Authority {
    pub fn new(
        params: GroupParams,
        rsa: Option<RsaAuthorityKey>,
        db: DiagnosisDb,
        config: AuthorityConfig,
    ) -> Result<Self> {
        if config.v_max == 0 {
            return Err(Error::Config("v_max must be positive".into()));
        }
        if config.epoch_len.is_zero() {
            return Err(Error::Config("epoch length must be positive".into()));
        }
        let empty = Arc::new(EpochCache {
            epoch_id: String::new(),
            db_version: u64::MAX,
            started: Instant::now(),
            elements: Vec::new(),
            psica: ServerSet::default(),
            apsi: OnceLock::new(),
        });
        let authority = Authority {
            params,
            rsa,
            config,
            db: RwLock::new(db),
            memo: Mutex::new(HashMap::new()),
            cache: RwLock::new(empty),
            epoch_seq: AtomicU64::new(0),
            last_query: Mutex::new(HashMap::new()),
            feedback: Mutex::new(Vec::new()),
            feedback_path: None,
        };
        authority.rebuild(false)?;
        Ok(authority)
    }

    /// Appends accepted feedback as JSON lines to `path`.
    pub fn with_feedback_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.feedback_path = Some(path.into());
        self
    }

    pub fn params(&self) -> &GroupParams {
        &self.params
    }

    pub fn config(&self) -> &AuthorityConfig {
        &self.config
    }

    pub fn apsi_common(&self) -> Option<ApsiCommon> {
        self.rsa.as_ref().map(RsaAuthorityKey::common)
    }

    pub fn public_params(&self) -> PublicParams {
        PublicParams {
            group: GroupWire {
                p: self.params.p().clone(),
                q: self.params.q().clone(),
                g: self.params.g().clone(),
                kappa: self.params.kappa(),
            },
            apsi: self.rsa.as_ref().map(|k| ApsiWire {
                n: k.n().clone(),
                e: k.e().clone(),
                g: k.g().clone(),
            }),
        }
    }

    pub fn w(&self) -> usize {
        self.db.read().expect("db lock").len()
    }

    /// Adds one diagnosis and refreshes the cache before returning the new w.
    pub fn add_diagnosis(&self, uid: ElementBytes) -> Result<usize> {
        self.add_diagnoses(std::iter::once(uid))
    }

    pub fn add_diagnoses(&self, uids: impl IntoIterator<Item = ElementBytes>) -> Result<usize> {
        let now = unix_now();
        {
            let mut db = self.db.write().expect("db lock");
            for uid in uids {
                db.insert(uid, now);
            }
        }
        self.rebuild(false)?;
        Ok(self.w())
    }

    /// Replaces the database wholesale (file reload).
    pub fn replace_db(&self, new_db: DiagnosisDb) -> Result<usize> {
        {
            let mut db = self.db.write().expect("db lock");
            let version = db.version() + 1;
            *db = new_db;
            db.version = version;
        }
        self.rebuild(false)?;
        Ok(self.w())
    }

    /// Starts a new epoch: fresh permutation and a fresh APSI exponent.
    pub fn rotate_epoch(&self) -> Result<String> {
        self.rebuild(true)?;
        Ok(self.current()?.epoch_id.clone())
    }

    /// Current cache, rotating first if the epoch has expired.
    pub fn current(&self) -> Result<Arc<EpochCache>> {
        let cache = self.cache.read().expect("cache lock").clone();
        if cache.started.elapsed() >= self.config.epoch_len {
            self.rebuild(true)?;
            return Ok(self.cache.read().expect("cache lock").clone());
        }
        Ok(cache)
    }

    fn rebuild(&self, rotate: bool) -> Result<()> {
        // Holding the db read lock across the swap orders rebuilds with writes.
        let db = self.db.read().expect("db lock");
        let mut slot = self.cache.write().expect("cache lock");
        if !rotate && slot.db_version == db.version() {
            return Ok(());
        }
        let elements = db.elements();
        let hs = {
            let mut memo = self.memo.lock().expect("memo lock");
            memo.retain(|k, _| db.contains(k));
            elements
                .iter()
                .map(|e| match memo.get(e) {
                    Some(h) => Ok(h.clone()),
                    None => {
                        let h = self.params.hash_to_subgroup(e)?;
                        memo.insert(*e, h.clone());
                        Ok(h)
                    }
                })
                .collect::<Result<Vec<_>>>()?
        };
        let seq = if rotate || slot.epoch_id.is_empty() {
            self.epoch_seq.fetch_add(1, Ordering::SeqCst) + 1
        } else {
            self.epoch_seq.load(Ordering::SeqCst)
        };
        let started = if rotate || slot.epoch_id.is_empty() { Instant::now() } else { slot.started };
        *slot = Arc::new(EpochCache {
            epoch_id: format!("e{seq}.{}", db.version()),
            db_version: db.version(),
            started,
            elements,
            psica: ServerSet::from_hashed(hs, &mut OsRng),
            apsi: OnceLock::new(),
        });
        log::info!("epoch cache rebuilt: {} (w = {})", slot.epoch_id, slot.w());
        Ok(())
    }

    /// APSI epoch state for `cache`, computed on first use.
    pub fn apsi_epoch(&self, cache: &EpochCache) -> Result<Arc<ApsiEpoch>> {
        let common = self
            .apsi_common()
            .ok_or_else(|| Error::Config("APSI is not enabled on this authority".into()))?;
        cache
            .apsi
            .get_or_init(|| {
                ApsiEpoch::new(&cache.epoch_id, &cache.elements, &common, &mut OsRng)
                    .map(Arc::new)
                    .map_err(|e| e.to_string())
            })
            .clone()
            .map_err(Error::Internal)
    }

    fn admit(&self, peer: Option<IpAddr>) -> Result<()> {
        let (Some(ip), false) = (peer, self.config.min_interval.is_zero()) else {
            return Ok(());
        };
        let mut last = self.last_query.lock().expect("rate lock");
        let now = Instant::now();
        if let Some(prev) = last.get(&ip) {
            if now.duration_since(*prev) < self.config.min_interval {
                return Err(Error::RateLimited);
            }
        }
        last.insert(ip, now);
        Ok(())
    }

    pub fn serve_psica(
        &self,
        request: &PsiCaRequest,
        peer: Option<IpAddr>,
    ) -> Result<(PsiCaResponse, ExpTally)> {
        self.admit(peer)?;
        let cache = self.current()?;
        psica::server_respond(request, &cache.psica, &self.params, self.config.v_max, &mut OsRng)
    }

    pub fn serve_apsi_digest(&self) -> Result<ApsiDigest> {
        let cache = self.current()?;
        Ok(self.apsi_epoch(&cache)?.digest().clone())
    }

    pub fn serve_apsi(
        &self,
        request: &ApsiRequest,
        peer: Option<IpAddr>,
    ) -> Result<(ApsiResponse, ExpTally)> {
        let common = self
            .apsi_common()
            .ok_or_else(|| Error::Config("APSI is not enabled on this authority".into()))?;
        let cache = self.current()?;
        if request.epoch != cache.epoch_id {
            return Err(Error::StaleEpoch {
                got: request.epoch.clone(),
                current: cache.epoch_id.clone(),
            });
        }
        self.admit(peer)?;
        let epoch = self.apsi_epoch(&cache)?;
        apsi::server_respond(request, &epoch, &common, self.config.v_max)
    }

    pub fn ca_sign(&self, request: &SignRequest) -> Result<SignResponse> {
        let key = self
            .rsa
            .as_ref()
            .ok_or_else(|| Error::Config("CA is not enabled on this authority".into()))?;
        Ok(SignResponse { sigma: apsi::ca_sign(&request.peer, key)? })
    }

    pub fn accept_feedback(&self, report: FeedbackReport) -> Result<()> {
        report.screen()?;
        let mut log = self.feedback.lock().expect("feedback lock");
        if let Some(path) = &self.feedback_path {
            let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_vec(&report)?;
            line.push(b'\n');
            file.write_all(&line)?;
        }
        log.push(report);
        Ok(())
    }

    pub fn feedback_log(&self) -> Vec<FeedbackReport> {
        self.feedback.lock().expect("feedback lock").clone()
    }

    /// Report count per intersection size.
    pub fn feedback_histogram(&self) -> BTreeMap<u64, usize> {
        histogram(&self.feedback.lock().expect("feedback lock"))
    }

    /// Routes one request. `peer` keys the query rate limit.
    pub fn handle(&self, method: &str, path: &str, body: &[u8], peer: Option<IpAddr>) -> Reply {
        let path = path.split('?').next().unwrap_or(path);
        let result = match (method, path) {
            ("GET", "/v1/params") => Ok(Reply::json(&self.public_params())),
            ("POST", "/v1/psica/query") => wire::from_bytes::<PsiCaRequest>(body)
                .and_then(|req| self.serve_psica(&req, peer))
                .map(|(resp, _)| Reply::json(&resp)),
            ("GET", "/v1/apsi/digest") => self.serve_apsi_digest().map(|d| Reply::json(&d)),
            ("POST", "/v1/apsi/query") => wire::from_bytes::<ApsiRequest>(body)
                .and_then(|req| self.serve_apsi(&req, peer))
                .map(|(resp, _)| Reply::json(&resp)),
            ("POST", "/v1/feedback") => wire::from_bytes::<FeedbackReport>(body)
                .map_err(|e| Error::RejectedReport(e.to_string()))
                .and_then(|r| self.accept_feedback(r))
                .map(|()| Reply::json(&serde_json::json!({ "ack": true }))),
            ("POST", "/v1/ca/sign") => wire::from_bytes::<SignRequest>(body)
                .and_then(|r| self.ca_sign(&r))
                .map(|s| Reply::json(&s)),
            (_, "/v1/params" | "/v1/psica/query" | "/v1/apsi/digest" | "/v1/apsi/query"
            | "/v1/feedback" | "/v1/ca/sign") => {
                Ok(Reply { status: 405, body: b"{\"error\":\"method_not_allowed\"}".to_vec() })
            }
            _ => Ok(Reply { status: 404, body: b"{\"error\":\"not_found\"}".to_vec() }),
        };
        result.unwrap_or_else(|e| {
            log::debug!("{method} {path}: {e}");
            error_reply(&e)
        })
    }
}

pub fn histogram(reports: &[FeedbackReport]) -> BTreeMap<u64, usize> {
    let mut h = BTreeMap::new();
    for r in reports {
        *h.entry(r.intersection_size).or_insert(0) += 1;
    }
    h
}

/// Running HTTP front end.
pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    /// Blocks until the workers exit.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if !self.workers.is_empty() {
            self.stop_workers();
        }
    }
}

/// Binds `listen` and serves `authority` on `workers` threads.
pub fn serve(authority: Arc<Authority>, listen: &str, workers: usize) -> Result<ServerHandle> {
    let server = tiny_http::Server::http(listen).map_err(|e| Error::Network(e.to_string()))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Network("listener has no IP address".into()))?;
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..workers.max(1))
        .map(|_| {
            let server = server.clone();
            let stop = stop.clone();
            let authority = authority.clone();
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let Ok(mut request) = server.recv() else { break };
                    let peer = request.remote_addr().map(|a| a.ip());
                    let method = request.method().as_str().to_owned();
                    let url = request.url().to_owned();
                    let mut body = Vec::new();
                    let reply = if request.body_length().unwrap_or(0) > MAX_BODY_BYTES {
                        error_reply(&Error::Input("request body too large".into()))
                    } else {
                        match std::io::Read::read_to_end(
                            &mut std::io::Read::take(request.as_reader(), MAX_BODY_BYTES as u64 + 1),
                            &mut body,
                        ) {
                            Ok(_) if body.len() > MAX_BODY_BYTES => {
                                error_reply(&Error::Input("request body too large".into()))
                            }
                            Ok(_) => authority.handle(&method, &url, &body, peer),
                            Err(e) => error_reply(&Error::Io(e)),
                        }
                    };
                    let header = tiny_http::Header::from_bytes(
                        &b"Content-Type"[..],
                        &b"application/json"[..],
                    )
                    .expect("static header");
                    let response = tiny_http::Response::from_data(reply.body)
                        .with_status_code(reply.status)
                        .with_header(header);
                    if let Err(e) = request.respond(response) {
                        log::debug!("response write failed: {e}");
                    }
                }
            })
        })
        .collect();
    Ok(ServerHandle { addr, server, stop, workers })
}

/// Polls `path` and reloads the database when its modification time changes.
pub fn watch_db_file(
    authority: Arc<Authority>,
    path: PathBuf,
    every: Duration,
) -> JoinHandle<()> {
    let mtime = |p: &Path| std::fs::metadata(p).and_then(|m| m.modified()).ok();
    // Baseline is taken on the caller's thread so edits made right after this call are seen.
    let mut seen = mtime(&path);
    std::thread::spawn(move || {
        loop {
            std::thread::sleep(every);
            let now = mtime(&path);
            if now != seen {
                seen = now;
                match DiagnosisDb::load(&path).and_then(|db| authority.replace_db(db)) {
                    Ok(w) => log::info!("reloaded {} (w = {w})", path.display()),
                    Err(e) => log::warn!("reload of {} failed: {e}", path.display()),
                }
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash::UidHash;

    fn uid(i: u32) -> ElementBytes {
        ElementBytes::from_uid(&i.to_be_bytes(), UidHash::default())
    }

    fn toy_authority(min_interval: Duration) -> Authority {
        let config = AuthorityConfig { min_interval, ..Default::default() };
        Authority::new(GroupParams::toy(), Some(RsaAuthorityKey::toy()), DiagnosisDb::new(), config)
            .unwrap()
    }

    #[test]
    fn db_set_semantics() {
        let a = toy_authority(Duration::ZERO);
        assert_eq!(a.w(), 0);
        assert_eq!(a.add_diagnosis(uid(1)).unwrap(), 1);
        assert_eq!(a.add_diagnosis(uid(1)).unwrap(), 1);
        assert_eq!(a.add_diagnosis(uid(2)).unwrap(), 2);
    }

    #[test]
    fn db_file_roundtrip_and_bad_lines() {
        let mut db = DiagnosisDb::new();
        db.insert(uid(1), 5);
        db.insert(uid(2), 6);
        let text = db.to_file_string();
        assert_eq!(DiagnosisDb::parse(&text).unwrap().elements(), db.elements());
        assert!(matches!(DiagnosisDb::parse("abcd\n"), Err(Error::Input(_))));
        assert!(DiagnosisDb::parse(&format!("{}\n\n", uid(3))).is_ok());
    }

    #[test]
    fn cache_follows_db_and_rotation() {
        let a = toy_authority(Duration::ZERO);
        let c0 = a.current().unwrap();
        a.add_diagnosis(uid(7)).unwrap();
        let c1 = a.current().unwrap();
        assert_ne!(c0.epoch_id(), c1.epoch_id());
        assert_eq!(c1.w(), 1);
        let rotated = a.rotate_epoch().unwrap();
        assert_ne!(rotated, c1.epoch_id());
        assert_eq!(a.current().unwrap().w(), 1);
    }

    #[test]
    fn feedback_screen() {
        let ok = FeedbackReport {
            demographics: BTreeMap::from([("age_band".into(), "30-39".into())]),
            intersection_size: 2,
            coarse_location: "R5".into(),
        };
        assert!(ok.screen().is_ok());
        let mut bad = ok.clone();
        bad.demographics.insert("uid".into(), "x".into());
        assert!(matches!(bad.screen(), Err(Error::RejectedReport(_))));
        let mut bad = ok.clone();
        bad.intersection_size = 0;
        assert!(bad.screen().is_err());
        let mut bad = ok.clone();
        bad.coarse_location = uid(1).to_hex();
        assert!(bad.screen().is_err());
        let mut bad = ok.clone();
        bad.demographics.insert("note".into(), "10.0.0.1".into());
        assert!(bad.screen().is_err());
    }

    #[test]
    fn feedback_endpoint_rejects_unknown_fields() {
        let a = toy_authority(Duration::ZERO);
        let body = br#"{"demographics":{},"intersection_size":1,"coarse_location":"R1","uid":"00"}"#;
        assert_eq!(a.handle("POST", "/v1/feedback", body, None).status, 422);
        let body = br#"{"demographics":{},"intersection_size":1,"coarse_location":"R1"}"#;
        assert_eq!(a.handle("POST", "/v1/feedback", body, None).status, 200);
        assert_eq!(a.feedback_log().len(), 1);
    }

    #[test]
    fn routing_and_status_codes() {
        let a = toy_authority(Duration::ZERO);
        assert_eq!(a.handle("GET", "/nope", b"", None).status, 404);
        assert_eq!(a.handle("GET", "/v1/psica/query", b"", None).status, 405);
        assert_eq!(a.handle("POST", "/v1/psica/query", b"{}", None).status, 400);
        let stale = ApsiRequest::new("old".into(), vec![BigUint::from(2u8)]);
        let reply = a.handle("POST", "/v1/apsi/query", &wire::to_bytes(&stale), None);
        assert_eq!(reply.status, 409);
        let body: ErrorBody = serde_json::from_slice(&reply.body).unwrap();
        assert_eq!(body.current_epoch.as_deref(), Some(a.current().unwrap().epoch_id()));
        let params: PublicParams =
            serde_json::from_slice(&a.handle("GET", "/v1/params", b"", None).body).unwrap();
        assert_eq!(params.group_params().unwrap(), GroupParams::toy());
    }

    #[test]
    fn oversize_request_is_413() {
        let config = AuthorityConfig { v_max: 2, min_interval: Duration::ZERO, ..Default::default() };
        let a = Authority::new(GroupParams::toy(), None, DiagnosisDb::new(), config).unwrap();
        let x = BigUint::from(4u8);
        let req = PsiCaRequest::new(x.clone(), vec![x.clone(), x.clone(), x]);
        assert_eq!(a.handle("POST", "/v1/psica/query", &wire::to_bytes(&req), None).status, 413);
        assert_eq!(a.handle("GET", "/v1/apsi/digest", b"", None).status, 404);
    }

    #[test]
    fn rate_limit_per_peer() {
        let a = toy_authority(Duration::from_secs(3600));
        let x = BigUint::from(4u8);
        let req = wire::to_bytes(&PsiCaRequest::new(x.clone(), vec![x]));
        let ip: IpAddr = "10.1.2.3".parse().unwrap();
        let other: IpAddr = "10.1.2.4".parse().unwrap();
        assert_eq!(a.handle("POST", "/v1/psica/query", &req, Some(ip)).status, 200);
        assert_eq!(a.handle("POST", "/v1/psica/query", &req, Some(ip)).status, 429);
        assert_eq!(a.handle("POST", "/v1/psica/query", &req, Some(other)).status, 200);
    }
}
