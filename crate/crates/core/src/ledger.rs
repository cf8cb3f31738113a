//! Client-side contact history.
//!
//! Records are kept in first-seen order and persisted as one tab-separated
//! line per record: `hex(peer) TAB first_seen TAB duration TAB hex(sigma)|-`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::hash::ElementBytes;
use crate::rsa::ApsiCommon;
use crate::wire::{decode_uint, encode_uint};

pub const SECONDS_PER_DAY: u64 = 86_400;

/// Co-location policy: a contact counts after `t_min` seconds within
/// `radius_m` meters, and is retained for `window_days`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProximityPolicy {
    pub t_min: u64,
    pub radius_m: f64,
    pub window_days: u32,
}

impl Default for ProximityPolicy {
    fn default() -> Self {
        ProximityPolicy { t_min: 900, radius_m: 2.0, window_days: 21 }
    }
}

impl ProximityPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.t_min == 0 {
            return Err(Error::Config("t_min must be positive".into()));
        }
        if self.window_days == 0 {
            return Err(Error::Config("window_days must be positive".into()));
        }
        if !(self.radius_m > 0.0) {
            return Err(Error::Config("radius must be positive".into()));
        }
        Ok(())
    }

    pub fn window_secs(&self) -> u64 {
        self.window_days as u64 * SECONDS_PER_DAY
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactRecord {
    pub peer_id: ElementBytes,
    pub first_seen: u64,
    pub duration: u64,
    pub sigma: Option<BigUint>,
}

/// One distinct peer in the protocol input, with its signature if any record has one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewEntry {
    pub peer_id: ElementBytes,
    pub sigma: Option<BigUint>,
}

/// Issues CA signatures over contact identifiers.
pub trait SignatureAuthority {
    fn sign(&self, requester: Option<&ElementBytes>, peer: &ElementBytes) -> Result<BigUint>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContactLedger {
    owner: Option<ElementBytes>,
    records: Vec<ContactRecord>,
}

impl ContactLedger {
    pub fn new(owner: Option<ElementBytes>) -> Self {
        ContactLedger { owner, records: Vec::new() }
    }

    pub fn owner(&self) -> Option<&ElementBytes> {
        self.owner.as_ref()
    }

    pub fn set_owner(&mut self, owner: ElementBytes) {
        self.owner = Some(owner);
    }

    pub fn records(&self) -> &[ContactRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records a proximity event; sub-threshold events are dropped.
    ///
    /// Late-arriving events are placed after every record with the same or an
    /// earlier start, so the ledger stays ordered by `first_seen`.
    pub fn ingest_event(
        &mut self,
        peer_id: ElementBytes,
        start_ts: u64,
        duration: u64,
        policy: &ProximityPolicy,
    ) -> bool {
        if duration < policy.t_min {
            return false;
        }
        let record = ContactRecord { peer_id, first_seen: start_ts, duration, sigma: None };
        let pos = self.records.partition_point(|r| r.first_seen <= start_ts);
        self.records.insert(pos, record);
        true
    }

    /// Drops records older than the retention window; returns how many went.
    pub fn prune(&mut self, now_ts: u64, policy: &ProximityPolicy) -> usize {
        let window = policy.window_secs();
        let before = self.records.len();
        self.records.retain(|r| now_ts.saturating_sub(r.first_seen) <= window);
        before - self.records.len()
    }

    /// Distinct peers in first-seen order.
    pub fn query_view(&self) -> Vec<ViewEntry> {
        let mut seen = HashSet::new();
        let mut view: Vec<ViewEntry> = Vec::new();
        for r in &self.records {
            if seen.insert(r.peer_id) {
                view.push(ViewEntry { peer_id: r.peer_id, sigma: r.sigma.clone() });
            } else if let Some(sigma) = &r.sigma {
                let entry = view.iter_mut().find(|v| v.peer_id == r.peer_id).expect("seen peer");
                entry.sigma.get_or_insert_with(|| sigma.clone());
            }
        }
        view
    }

    /// Obtains a CA signature for `peer_id`, verifies it and attaches it to
    /// every record of that peer. Nothing is stored when verification fails.
    pub fn request_signature(
        &mut self,
        peer_id: &ElementBytes,
        ca: &dyn SignatureAuthority,
        common: &ApsiCommon,
    ) -> Result<BigUint> {
        let sigma = ca.sign(self.owner.as_ref(), peer_id)?;
        if !common.verify(peer_id, &sigma)? {
            return Err(Error::InvalidSignature);
        }
        for r in self.records.iter_mut().filter(|r| r.peer_id == *peer_id) {
            r.sigma = Some(sigma.clone());
        }
        Ok(sigma)
    }

    /// Signs every distinct peer lacking a signature; returns the number signed.
    pub fn sign_all(&mut self, ca: &dyn SignatureAuthority, common: &ApsiCommon) -> Result<usize> {
        let unsigned: Vec<ElementBytes> = self
            .query_view()
            .into_iter()
            .filter(|v| v.sigma.is_none())
            .map(|v| v.peer_id)
            .collect();
        for peer in &unsigned {
            self.request_signature(peer, ca, common)?;
        }
        Ok(unsigned.len())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let sigma = r.sigma.as_ref().map(encode_uint).unwrap_or_else(|| "-".into());
            writeln!(out, "{}\t{}\t{}\t{}", r.peer_id.to_hex(), r.first_seen, r.duration, sigma)
                .expect("write to string");
        }
        out
    }

    pub fn parse(text: &str, owner: Option<ElementBytes>) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Input(format!("ledger line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [peer, first_seen, duration, sigma] = fields[..] else {
                return Err(bad("expected 4 tab-separated fields"));
            };
            let peer_id: ElementBytes = peer.parse().map_err(|_| bad("bad peer id"))?;
            let first_seen: u64 = first_seen.parse().map_err(|_| bad("bad timestamp"))?;
            let duration: u64 = duration.parse().map_err(|_| bad("bad duration"))?;
            let sigma = match sigma {
                "-" => None,
                s => Some(decode_uint(s).map_err(|_| bad("bad signature"))?),
            };
            if records.last().is_some_and(|r: &ContactRecord| r.first_seen > first_seen) {
                return Err(bad("timestamps out of order"));
            }
            records.push(ContactRecord { peer_id, first_seen, duration, sigma });
        }
        Ok(ContactLedger { owner, records })
    }

    /// Loads a ledger file; a missing file is an empty ledger.
    pub fn load(path: impl AsRef<Path>, owner: Option<ElementBytes>) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => ContactLedger::parse(&text, owner),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ContactLedger::new(owner)),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_file_string())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }
}

/// CA held in-process.
pub struct LocalCa(pub crate::rsa::RsaAuthorityKey);

impl SignatureAuthority for LocalCa {
    fn sign(&self, _requester: Option<&ElementBytes>, peer: &ElementBytes) -> Result<BigUint> {
        crate::apsi::ca_sign(peer, &self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rsa::RsaAuthorityKey;
    use proptest::prelude::*;

    fn peer(i: u8) -> ElementBytes {
        ElementBytes::new([i; 16])
    }

    #[test]
    fn threshold_is_inclusive() {
        let policy = ProximityPolicy::default();
        let mut l = ContactLedger::new(None);
        assert!(l.ingest_event(peer(1), 10, policy.t_min, &policy));
        assert!(!l.ingest_event(peer(1), 20, policy.t_min - 1, &policy));
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn five_events_three_kept() {
        let policy = ProximityPolicy { t_min: 60, ..Default::default() };
        let mut l = ContactLedger::new(None);
        let durations = [10, 60, 59, 600, 61];
        let kept = durations.iter().filter(|d| **d >= 60).count();
        for (i, d) in durations.iter().enumerate() {
            l.ingest_event(peer(i as u8), i as u64, *d, &policy);
        }
        assert_eq!(l.len(), kept);
        assert_eq!(kept, 3);
    }

    #[test]
    fn prune_by_age() {
        let policy = ProximityPolicy::default();
        let mut l = ContactLedger::new(None);
        assert_eq!(l.prune(1_000, &policy), 0);
        let now = 100 * SECONDS_PER_DAY;
        l.ingest_event(peer(1), now - 22 * SECONDS_PER_DAY, 1000, &policy);
        l.ingest_event(peer(2), now - 21 * SECONDS_PER_DAY, 1000, &policy);
        l.ingest_event(peer(3), now - 5, 1000, &policy);
        assert_eq!(l.prune(now, &policy), 1);
        assert_eq!(l.len(), 2);
    }

    #[test]
    fn view_is_distinct_and_ordered() {
        let policy = ProximityPolicy::default();
        let mut l = ContactLedger::new(None);
        for (i, p) in [3u8, 1, 3, 2, 3, 3].iter().enumerate() {
            l.ingest_event(peer(*p), i as u64 * 10, 1000, &policy);
        }
        let view: Vec<_> = l.query_view().into_iter().map(|v| v.peer_id).collect();
        assert_eq!(view, vec![peer(3), peer(1), peer(2)]);
        assert!(ContactLedger::new(None).query_view().is_empty());
    }

    #[test]
    fn late_event_inserted_in_order() {
        let policy = ProximityPolicy::default();
        let mut l = ContactLedger::new(None);
        l.ingest_event(peer(1), 100, 1000, &policy);
        l.ingest_event(peer(2), 50, 1000, &policy);
        let ts: Vec<u64> = l.records().iter().map(|r| r.first_seen).collect();
        assert_eq!(ts, vec![50, 100]);
    }

    struct GarbageCa;
    impl SignatureAuthority for GarbageCa {
        fn sign(&self, _: Option<&ElementBytes>, _: &ElementBytes) -> Result<BigUint> {
            Ok(BigUint::from(12345u32))
        }
    }

    struct DownCa;
    impl SignatureAuthority for DownCa {
        fn sign(&self, _: Option<&ElementBytes>, _: &ElementBytes) -> Result<BigUint> {
            Err(Error::RetryLater("connection refused".into()))
        }
    }

    #[test]
    fn signatures_verified_before_storing() {
        let key = RsaAuthorityKey::fixture_1024();
        let common = key.common();
        let policy = ProximityPolicy::default();
        let mut l = ContactLedger::new(Some(peer(0)));
        l.ingest_event(peer(1), 1, 1000, &policy);
        l.ingest_event(peer(1), 2, 1000, &policy);
        assert!(matches!(
            l.request_signature(&peer(1), &GarbageCa, &common),
            Err(Error::InvalidSignature)
        ));
        assert!(l.records().iter().all(|r| r.sigma.is_none()));
        assert!(matches!(
            l.request_signature(&peer(1), &DownCa, &common),
            Err(Error::RetryLater(_))
        ));
        let sigma = l.request_signature(&peer(1), &LocalCa(key.clone()), &common).unwrap();
        assert!(l.records().iter().all(|r| r.sigma.as_ref() == Some(&sigma)));
        assert_eq!(sigma.modpow(key.e(), key.n()), common.hash_to_zn(&peer(1)).unwrap());
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(ContactLedger::parse("abc\t1\t2\t-\n", None).is_err());
        let p = peer(1).to_hex();
        assert!(ContactLedger::parse(&format!("{p}\t1\t2\n"), None).is_err());
        assert!(ContactLedger::parse(&format!("{p}\t5\t2\t-\n{p}\t4\t2\t-\n"), None).is_err());
        assert!(ContactLedger::parse(&format!("{p}\tx\t2\t-\n"), None).is_err());
        assert_eq!(ContactLedger::parse(&format!("{p}\t5\t2\t0abc\n"), None).unwrap().len(), 1);
    }

    #[test]
    fn policy_validation() {
        assert!(ProximityPolicy::default().validate().is_ok());
        assert!(ProximityPolicy { t_min: 0, ..Default::default() }.validate().is_err());
        assert!(ProximityPolicy { window_days: 0, ..Default::default() }.validate().is_err());
    }

    fn arb_events() -> impl Strategy<Value = Vec<(u8, u64, u64, Option<u32>)>> {
        proptest::collection::vec((0u8..20, 0u64..5_000_000, 0u64..3_600, proptest::option::of(any::<u32>())), 0..60)
    }

    proptest! {
        #[test]
        fn file_roundtrip_is_exact(events in arb_events()) {
            let policy = ProximityPolicy { t_min: 300, ..Default::default() };
            let mut l = ContactLedger::new(None);
            for (p, ts, d, sig) in &events {
                if l.ingest_event(peer(*p), *ts, *d, &policy) {
                    let idx = l.records.partition_point(|r| r.first_seen <= *ts) - 1;
                    l.records[idx].sigma = sig.map(BigUint::from);
                }
            }
            let text = l.to_file_string();
            let back = ContactLedger::parse(&text, None).unwrap();
            prop_assert_eq!(&back, &l);
            prop_assert_eq!(back.to_file_string(), text);
        }

        #[test]
        fn ingest_prune_invariants(events in arb_events(), now in 0u64..6_000_000) {
            let policy = ProximityPolicy { t_min: 300, window_days: 21, ..Default::default() };
            let mut l = ContactLedger::new(None);
            let mut ingested = HashSet::new();
            for (p, ts, d, _) in &events {
                if l.ingest_event(peer(*p), *ts, *d, &policy) {
                    ingested.insert(peer(*p));
                }
            }
            prop_assert!(l.records().iter().all(|r| r.duration >= policy.t_min));
            prop_assert!(l.records().windows(2).all(|w| w[0].first_seen <= w[1].first_seen));
            let expected_removed = l.records().iter()
                .filter(|r| now.saturating_sub(r.first_seen) > policy.window_secs()).count();
            prop_assert_eq!(l.prune(now, &policy), expected_removed);
            prop_assert!(l.records().iter().all(|r| now.saturating_sub(r.first_seen) <= policy.window_secs()));
            let view = l.query_view();
            let distinct: HashSet<_> = view.iter().map(|v| v.peer_id).collect();
            prop_assert_eq!(distinct.len(), view.len());
            prop_assert!(distinct.is_subset(&ingested));
        }
    }
}
