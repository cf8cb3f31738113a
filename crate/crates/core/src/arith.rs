//! Modular-arithmetic primitives shared by both protocols.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};

/// Miller-Rabin rounds; each round has error at most 1/4, so 64 rounds give
/// a 2^-128 bound.
pub const MR_ROUNDS: usize = 64;

const SMALL_PRIMES: [u32; 168] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191,
    193, 197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283, 293,
    307, 311, 313, 317, 331, 337, 347, 349, 353, 359, 367, 373, 379, 383, 389, 397, 401, 409, 419,
    421, 431, 433, 439, 443, 449, 457, 461, 463, 467, 479, 487, 491, 499, 503, 509, 521, 523, 541,
    547, 557, 563, 569, 571, 577, 587, 593, 599, 601, 607, 613, 617, 619, 631, 641, 643, 647, 653,
    659, 661, 673, 677, 683, 691, 701, 709, 719, 727, 733, 739, 743, 751, 757, 761, 769, 773, 787,
    797, 809, 811, 821, 823, 827, 829, 839, 853, 857, 859, 863, 877, 881, 883, 887, 907, 911, 919,
    929, 937, 941, 947, 953, 967, 971, 977, 983, 991, 997,
];

/// Per-party count of modular exponentiations, split by purpose.
///
/// `element` counts exponentiations applied to set elements, `key` counts the
/// Diffie-Hellman style key values (X, Y and their powers) and `validation`
/// counts subgroup-membership checks on received values.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ExpTally {
    pub element: u64,
    pub key: u64,
    pub validation: u64,
}

impl ExpTally {
    pub fn total(&self) -> u64 {
        self.element + self.key + self.validation
    }
}

impl std::ops::AddAssign for ExpTally {
    fn add_assign(&mut self, rhs: Self) {
        self.element += rhs.element;
        self.key += rhs.key;
        self.validation += rhs.validation;
    }
}

impl std::ops::Add for ExpTally {
    type Output = ExpTally;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

pub fn mod_pow(base: &BigUint, exp: &BigUint, modulus: &BigUint) -> BigUint {
    base.modpow(exp, modulus)
}

/// Multiplicative inverse of `a` modulo `m`, if it exists.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    if m.is_zero() {
        return None;
    }
    if m.is_one() {
        return Some(BigUint::zero());
    }
    a.modinv(m)
}

/// Uniform integer in `[low, high)` from a cryptographically secure source.
pub fn sample_range<R: RngCore + CryptoRng>(rng: &mut R, low: &BigUint, high: &BigUint) -> BigUint {
    rng.gen_biguint_range(low, high)
}

/// Uniform exponent in `[1, q-1]`; never zero, so it is invertible mod a prime `q`.
pub fn sample_exponent<R: RngCore + CryptoRng>(rng: &mut R, q: &BigUint) -> BigUint {
    assert!(*q > BigUint::from(2u8), "exponent modulus too small");
    rng.gen_biguint_range(&BigUint::one(), q)
}

/// Big-endian encoding left-padded to exactly `len` bytes.
pub fn to_fixed_bytes(x: &BigUint, len: usize) -> Vec<u8> {
    let raw = x.to_bytes_be();
    assert!(raw.len() <= len, "value wider than fixed encoding");
    let mut out = vec![0u8; len - raw.len()];
    out.extend_from_slice(&raw);
    out
}

pub fn byte_len(modulus: &BigUint) -> usize {
    ((modulus.bits() + 7) / 8) as usize
}

fn divisible_by_small_prime(n: &BigUint) -> Option<u32> {
    SMALL_PRIMES
        .iter()
        .copied()
        .find(|&p| (n % p).is_zero() && *n != BigUint::from(p))
}

/// Probabilistic primality test: trial division then Miller-Rabin with
/// random bases.
pub fn is_probable_prime<R: RngCore + CryptoRng>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u8);
    if *n < two {
        return false;
    }
    if *n < BigUint::from(4u8) {
        return true;
    }
    if n.is_even() {
        return false;
    }
    if SMALL_PRIMES.iter().any(|&p| *n == BigUint::from(p)) {
        return true;
    }
    if divisible_by_small_prime(n).is_some() {
        return false;
    }
    let n_minus_1 = n - 1u8;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let n_minus_2 = n - 2u8;

    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n_minus_2);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
            if x.is_one() {
                return false;
            }
        }
        return false;
    }
    true
}

/// Random prime of exactly `bits` bits.
pub fn random_prime<R: RngCore + CryptoRng>(
    bits: u64,
    max_attempts: usize,
    rng: &mut R,
) -> Option<BigUint> {
    for _ in 0..max_attempts {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MR_ROUNDS, rng) {
            return Some(candidate);
        }
    }
    None
}

/// Random safe prime `p = 2p' + 1` of exactly `bits` bits, at least 1.5·2^(bits-1).
///
/// Candidates are walked incrementally with a residue sieve over both `p'`
/// and `p` before any Miller-Rabin round is spent.
pub fn random_safe_prime<R: RngCore + CryptoRng>(
    bits: u64,
    max_attempts: usize,
    rng: &mut R,
) -> Option<BigUint> {
    assert!(bits >= 4, "safe prime too small");
    let half_bits = bits - 1;
    let mut attempts = 0usize;
    while attempts < max_attempts {
        let mut base = rng.gen_biguint(half_bits);
        // Top two bits set so a product of two such primes has full width.
        base.set_bit(half_bits - 1, true);
        base.set_bit(half_bits - 2, true);
        base.set_bit(0, true);
        let residues: Vec<u32> = SMALL_PRIMES[1..]
            .iter()
            .map(|&p| (&base % p).try_into().expect("residue fits u32"))
            .collect();
        // Walk base + 2k for a bounded window.
        for k in 0..4096u32 {
            attempts += 1;
            if attempts > max_attempts {
                break;
            }
            let offset = 2 * k;
            let sieved = SMALL_PRIMES[1..].iter().zip(&residues).any(|(&p, &r)| {
                let rp = (r as u64 + offset as u64) % p as u64;
                // p' ≡ 0 (mod p) or 2p'+1 ≡ 0 (mod p)
                rp == 0 || (2 * rp + 1) % p as u64 == 0
            });
            if sieved {
                continue;
            }
            let half = &base + offset;
            if half.bits() != half_bits {
                break;
            }
            let candidate: BigUint = (&half << 1) + 1u8;
            // Cheap Fermat filter on p before paying for full tests.
            if !BigUint::from(2u8).modpow(&(&candidate - 1u8), &candidate).is_one() {
                continue;
            }
            if is_probable_prime(&half, MR_ROUNDS, rng) && is_probable_prime(&candidate, MR_ROUNDS, rng)
            {
                return Some(candidate);
            }
        }
    }
    None
}
