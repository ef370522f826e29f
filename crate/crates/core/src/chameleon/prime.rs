use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, RngCore};

const SMALL_PRIMES: [u32; 54] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239,
    241, 251,
];

/// Deterministic witness set, exact for every n < 3.3e24.
const U64_WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

const BIG_ROUNDS: usize = 24;

pub(crate) fn is_probable_prime(n: &BigUint, rng: &mut impl RngCore) -> bool {
    if let Some(small) = n.to_u64() {
        return is_prime_u64(small);
    }
    for &sp in SMALL_PRIMES.iter() {
        if (n % sp).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    let two = BigUint::from(2u32);
    let span = n - 3u32;
    'witness: for _ in 0..BIG_ROUNDS {
        let a = random_below(rng, &span) + &two;
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

pub(crate) fn is_prime_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for &sp in SMALL_PRIMES.iter() {
        let sp = sp as u64;
        if n == sp {
            return true;
        }
        if n.is_multiple_of(sp) {
            return false;
        }
    }
    let s = (n - 1).trailing_zeros();
    let d = (n - 1) >> s;
    'witness: for &a in U64_WITNESSES.iter() {
        let mut x = pow_mod_u64(a % n, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod_u64(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn mul_mod_u64(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod_u64(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64 % m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod_u64(acc, base, m);
        }
        base = mul_mod_u64(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Uniform integer in `[0, bound)` by rejection sampling.
pub(crate) fn random_below(rng: &mut impl RngCore, bound: &BigUint) -> BigUint {
    assert!(!bound.is_zero(), "empty range");
    let bits = bound.bits();
    let len = bits.div_ceil(8) as usize;
    let excess = (len as u64 * 8 - bits) as u32;
    let mut buf = vec![0u8; len];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xffu8 >> excess;
        let candidate = BigUint::from_bytes_be(&buf);
        if &candidate < bound {
            return candidate;
        }
    }
}

/// Uniform integer with exactly `bits` bits.
pub(crate) fn random_with_bits(rng: &mut impl RngCore, bits: u32) -> BigUint {
    let low = BigUint::one() << (bits - 1);
    random_below(rng, &low) + low
}

pub(crate) fn random_prime(rng: &mut impl RngCore, bits: u32, budget: usize) -> Option<BigUint> {
    for _ in 0..budget {
        let mut candidate = random_with_bits(rng, bits);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return Some(candidate);
        }
    }
    None
}

/// Searches `p = k*q + 1` with exactly `bits` bits.
pub(crate) fn random_prime_with_factor(
    rng: &mut impl RngCore,
    q: &BigUint,
    bits: u32,
    budget: usize,
) -> Option<BigUint> {
    let low = BigUint::one() << (bits - 1);
    let high = BigUint::one() << bits;
    let k_min = Integer::div_ceil(&(&low - 1u32), q);
    let k_max = (&high - 1u32 - 1u32) / q;
    if k_max < k_min {
        return None;
    }
    let span = &k_max - &k_min + 1u32;
    for _ in 0..budget {
        let mut k = random_below(rng, &span) + &k_min;
        if k.is_odd() {
            k += 1u32;
            if k > k_max {
                continue;
            }
        }
        let p = &k * q + 1u32;
        if p.bits() != bits as u64 {
            continue;
        }
        if is_probable_prime(&p, rng) {
            return Some(p);
        }
    }
    None
}

/// Random element of `[lo, hi]`.
pub(crate) fn random_in(rng: &mut impl Rng, lo: &BigUint, hi: &BigUint) -> BigUint {
    let span = hi - lo + 1u32;
    random_below(rng, &span) + lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn u64_primality_matches_trial_division() {
        fn naive(n: u64) -> bool {
            n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| !n.is_multiple_of(d))
        }
        for n in 0..5000u64 {
            assert_eq!(is_prime_u64(n), naive(n), "n = {n}");
        }
        assert!(is_prime_u64(18_446_744_073_709_551_557));
        assert!(!is_prime_u64(3_215_031_751));
    }

    #[test]
    fn big_primality_on_known_values() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        // 2^127 - 1 is a Mersenne prime; 2^128 + 1 is composite.
        let m127 = (BigUint::one() << 127) - 1u32;
        assert!(is_probable_prime(&m127, &mut rng));
        let f7 = (BigUint::one() << 128) + 1u32;
        assert!(!is_probable_prime(&f7, &mut rng));
        let carmichael = BigUint::from(41_041u32) * BigUint::from(1_000_000_007u64);
        assert!(!is_probable_prime(&carmichael, &mut rng));
    }

    #[test]
    fn factor_search_respects_bit_length() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let q = random_prime(&mut rng, 40, 10_000).unwrap();
        let p = random_prime_with_factor(&mut rng, &q, 64, 100_000).unwrap();
        assert_eq!(p.bits(), 64);
        assert!(((&p - 1u32) % &q).is_zero());
    }
}
