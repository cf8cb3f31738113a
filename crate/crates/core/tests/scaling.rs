//! APSI server online time grows linearly in the client set size.

use std::collections::HashSet;
use std::time::Instant;

use rand::rngs::OsRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use ctrace_core::apsi::{self, ApsiClientState, ApsiEpoch};
use ctrace_core::hash::ElementBytes;
use ctrace_core::psica::DEFAULT_V_MAX;
use ctrace_core::rsa::RsaAuthorityKey;

const RATIO: (f64, f64) = (5.0, 20.0);

#[test]
fn apsi_online_is_linear_in_v() {
    let key = RsaAuthorityKey::fixture_1024();
    let common = key.common();
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    let s: Vec<ElementBytes> = (0..100).map(|_| ElementBytes::new(rng.gen())).collect();
    let epoch = ApsiEpoch::new("scaling", &s, &common, &mut OsRng).unwrap();

    let mut times = Vec::new();
    for (v, trials) in [(10usize, 40), (100, 10), (1_000, 3)] {
        let mut seen = HashSet::new();
        let signed: Vec<_> = std::iter::repeat_with(|| ElementBytes::new(rng.gen()))
            .filter(|e| seen.insert(*e))
            .take(v)
            .map(|e| (e, Some(apsi::ca_sign(&e, &key).unwrap())))
            .collect();
        let mut total = 0.0;
        for _ in 0..trials {
            let mut state = ApsiClientState::new(signed.iter().cloned());
            let req = apsi::client_request(&mut state, &common, epoch.epoch_id(), &mut OsRng).unwrap();
            let t = Instant::now();
            apsi::server_respond(&req, &epoch, &common, DEFAULT_V_MAX).unwrap();
            total += t.elapsed().as_secs_f64();
        }
        times.push(total / trials as f64);
    }
    for pair in times.windows(2) {
        let ratio = pair[1] / pair[0];
        assert!(ratio >= RATIO.0 && ratio <= RATIO.1, "successive ratio {ratio:.2} from {times:?}");
    }
}
