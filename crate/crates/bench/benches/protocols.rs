use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctrace_core::apsi::{self, ApsiClientState, ApsiEpoch};
use ctrace_core::group::GroupParams;
use ctrace_core::hash::ElementBytes;
use ctrace_core::psica::{self, ServerSet, DEFAULT_V_MAX};
use ctrace_core::rsa::RsaAuthorityKey;
use ctrace_core::sim::{planted_client_set, random_set};
use rand::rngs::OsRng;
use rand::SeedableRng;

fn modexp(c: &mut Criterion) {
    let params = GroupParams::fixture_1024();
    let rsa = RsaAuthorityKey::fixture_1024();
    let mut g = c.benchmark_group("modexp");
    let base = params.hash_to_subgroup(&ElementBytes::new([1; 16])).unwrap();
    let short = params.sample_exponent(&mut OsRng);
    g.bench_function("subgroup_160", |b| b.iter(|| base.modpow(&short, params.p())));
    let common = rsa.common();
    let full = apsi::sample_blinding(&common, &mut OsRng);
    g.bench_function("rsa_1024", |b| b.iter(|| base.modpow(&full, common.n())));
    g.bench_function("hash_to_subgroup", |b| {
        b.iter(|| params.hash_to_subgroup(&ElementBytes::new([9; 16])).unwrap())
    });
    g.finish();
}

fn psica_online(c: &mut Criterion) {
    let params = GroupParams::fixture_1024();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("psica_server_online");
    g.sample_size(10);
    for w in [100usize, 1000] {
        let s = random_set(w, &mut rng);
        let set = ServerSet::prepare(&s, &params, &mut OsRng).unwrap();
        let client = planted_client_set(&s, 100, 10, &mut rng);
        let (_, req) = psica::client_prepare(&client, &params, &mut OsRng).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(w), &w, |b, _| {
            b.iter(|| psica::server_respond(&req, &set, &params, DEFAULT_V_MAX, &mut OsRng).unwrap())
        });
    }
    g.finish();
}

fn apsi_online(c: &mut Criterion) {
    let rsa = RsaAuthorityKey::fixture_1024();
    let common = rsa.common();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
    let s = random_set(200, &mut rng);
    let epoch = ApsiEpoch::new("bench", &s, &common, &mut OsRng).unwrap();
    let mut g = c.benchmark_group("apsi_server_online");
    g.sample_size(10);
    for v in [10usize, 100] {
        let signed = planted_client_set(&s, v, v / 2, &mut rng)
            .into_iter()
            .map(|e| (e, Some(apsi::ca_sign(&e, &rsa).unwrap())));
        let mut state = ApsiClientState::new(signed);
        let req = apsi::client_request(&mut state, &common, epoch.epoch_id(), &mut OsRng).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(v), &v, |b, _| {
            b.iter(|| apsi::server_respond(&req, &epoch, &common, DEFAULT_V_MAX).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, modexp, psica_online, apsi_online);
criterion_main!(benches);
