//! Discrete-log chameleon hash over a prime-order subgroup of `Z_p^*`.
//!
//! `CH(m, r) = g^{H(m)} * h^r mod p`, where `H` is SHA-256 reduced modulo
//! the subgroup order `q` and `h = g^x`. Whoever knows `x` can move any
//! `(m, r)` to a new message `m'` with `r' = r + (H(m) - H(m')) / x mod q`
//! without changing the digest.

mod prime;

use std::fmt;
use std::sync::Arc;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub(crate) use prime::{is_probable_prime, random_below};

pub const KEY_MAGIC: &[u8; 8] = b"IMUPKEY1";

/// Subgroup order used for 1024-bit and larger moduli.
const LARGE_ORDER_BITS: u32 = 256;
const PRIME_BUDGET: usize = 200_000;
const COFACTOR_BUDGET: usize = 4096;
const ORDER_ATTEMPTS: usize = 256;

/// Canonical digest: fixed-width big-endian encoding of a group element.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChameleonDigest(Vec<u8>);

impl ChameleonDigest {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn value(&self) -> BigUint {
        BigUint::from_bytes_be(&self.0)
    }

    pub fn leading_zero_nibbles(&self) -> u32 {
        let mut n = 0;
        for &b in &self.0 {
            if b == 0 {
                n += 2;
                continue;
            }
            if b >> 4 == 0 {
                n += 1;
            }
            break;
        }
        n
    }
}

impl fmt::Debug for ChameleonDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChameleonDigest({self})")
    }
}

impl fmt::Display for ChameleonDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Fixed-base tables for groups whose modulus fits in 64 bits. Each
/// exponentiation is a handful of table lookups; products stay in `u64`
/// when `p` fits 32 bits and widen to `u128` otherwise.
struct SmallGroup {
    p: u64,
    q: u64,
    narrow: bool,
    windows: usize,
    g_table: Vec<u64>,
    h_table: Vec<u64>,
}

impl SmallGroup {
    fn new(p: u64, q: u64, g: u64, h: u64) -> Self {
        let windows = (64 - q.leading_zeros() as usize).div_ceil(8).max(1);
        let mut group = Self {
            p,
            q,
            narrow: p <= u32::MAX as u64,
            windows,
            g_table: Vec::new(),
            h_table: Vec::new(),
        };
        let table = |base: u64| {
            let mut out = Vec::with_capacity(windows * 256);
            let mut step = base % p;
            for _ in 0..windows {
                let mut acc = 1u64;
                for _ in 0..256 {
                    out.push(acc);
                    acc = group.mul(acc, step);
                }
                // acc is now step^256
                step = acc;
            }
            out
        };
        let (gt, ht) = (table(g), table(h));
        group.g_table = gt;
        group.h_table = ht;
        group
    }

    #[inline]
    fn mul(&self, a: u64, b: u64) -> u64 {
        if self.narrow {
            a * b % self.p
        } else {
            ((a as u128 * b as u128) % self.p as u128) as u64
        }
    }

    #[inline]
    fn pow(&self, table: &[u64], e: u64) -> u64 {
        let mut acc = 1u64;
        for w in 0..self.windows {
            let idx = ((e >> (8 * w)) & 0xff) as usize;
            acc = self.mul(acc, table[w * 256 + idx]);
        }
        acc
    }

    #[inline]
    fn chash(&self, e: u64, r: u64) -> u64 {
        self.mul(self.pow(&self.g_table, e), self.pow(&self.h_table, r))
    }

    #[inline]
    fn reduce_hash(&self, hash: &[u8; 32]) -> u64 {
        if self.q <= u32::MAX as u64 {
            let mut acc = 0u64;
            for chunk in hash.chunks_exact(4) {
                let limb = u32::from_be_bytes(chunk.try_into().unwrap()) as u64;
                acc = ((acc << 32) | limb) % self.q;
            }
            acc
        } else {
            let mut acc = 0u128;
            for chunk in hash.chunks_exact(8) {
                let limb = u64::from_be_bytes(chunk.try_into().unwrap()) as u128;
                acc = ((acc << 64) | limb) % self.q as u128;
            }
            acc as u64
        }
    }
}

/// Group element produced on the hot path before it is encoded.
pub(crate) enum Element {
    Small(u64),
    Big(BigUint),
}

impl Element {
    pub fn bits(&self) -> u64 {
        match self {
            Element::Small(v) => 64 - v.leading_zeros() as u64,
            Element::Big(v) => v.bits(),
        }
    }
}

/// Public parameters `(p, q, g, h)`.
#[derive(Clone)]
pub struct PublicKey {
    p: BigUint,
    q: BigUint,
    g: BigUint,
    h: BigUint,
    digest_width: usize,
    scalar_width: usize,
    small: Option<Arc<SmallGroup>>,
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.q == other.q && self.g == other.g && self.h == other.h
    }
}

impl Eq for PublicKey {}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("p_bits", &self.p.bits())
            .field("q_bits", &self.q.bits())
            .field("p", &self.p)
            .finish_non_exhaustive()
    }
}

impl PublicKey {
    /// Builds a key from raw parameters, checking the group structure.
    pub fn new(p: BigUint, q: BigUint, g: BigUint, h: BigUint) -> Result<Self> {
        let key = Self::assemble(p, q, g, h)?;
        key.check_group()?;
        Ok(key)
    }

    fn assemble(p: BigUint, q: BigUint, g: BigUint, h: BigUint) -> Result<Self> {
        if p < BigUint::from(5u32) || q < BigUint::from(2u32) {
            return Err(Error::InvalidKey("modulus or order too small"));
        }
        if g >= p || h >= p {
            return Err(Error::InvalidKey("element not reduced"));
        }
        let small = match (p.to_u64(), q.to_u64(), g.to_u64(), h.to_u64()) {
            (Some(ps), Some(qs), Some(gs), Some(hs)) => Some(Arc::new(SmallGroup::new(ps, qs, gs, hs))),
            _ => None,
        };
        Ok(Self {
            digest_width: p.bits().div_ceil(8) as usize,
            scalar_width: q.bits().div_ceil(8) as usize,
            p,
            q,
            g,
            h,
            small,
        })
    }

    fn check_group(&self) -> Result<()> {
        let mut rng = ChaCha20Rng::seed_from_u64(0x1a7e);
        let one = BigUint::one();
        if !is_probable_prime(&self.p, &mut rng) {
            return Err(Error::InvalidKey("p is not prime"));
        }
        if !is_probable_prime(&self.q, &mut rng) {
            return Err(Error::InvalidKey("q is not prime"));
        }
        if !((&self.p - 1u32) % &self.q).is_zero() {
            return Err(Error::InvalidKey("q does not divide p - 1"));
        }
        if self.g == one || self.g.is_zero() || self.g.modpow(&self.q, &self.p) != one {
            return Err(Error::InvalidKey("g does not generate the order-q subgroup"));
        }
        if self.h.is_zero() || self.h.modpow(&self.q, &self.p) != one {
            return Err(Error::InvalidKey("h is outside the subgroup"));
        }
        Ok(())
    }

    pub fn modulus(&self) -> &BigUint {
        &self.p
    }

    pub fn order(&self) -> &BigUint {
        &self.q
    }

    pub fn generator(&self) -> &BigUint {
        &self.g
    }

    pub fn key(&self) -> &BigUint {
        &self.h
    }

    /// Byte width of a canonical digest, `ceil(bits(p) / 8)`.
    pub fn digest_width(&self) -> usize {
        self.digest_width
    }

    /// Byte width of an integer modulo `q`.
    pub fn scalar_width(&self) -> usize {
        self.scalar_width
    }

    pub fn bits(&self) -> u64 {
        self.p.bits()
    }

    /// SHA-256 of `m` reduced modulo `q`.
    pub fn hash_to_exponent(&self, m: &[u8]) -> BigUint {
        let hash: [u8; 32] = Sha256::digest(m).into();
        self.reduce_hash(&hash)
    }

    pub(crate) fn reduce_hash(&self, hash: &[u8; 32]) -> BigUint {
        match &self.small {
            Some(s) => BigUint::from(s.reduce_hash(hash)),
            None => BigUint::from_bytes_be(hash) % &self.q,
        }
    }

    /// `CH(m, r)`; `r` must already be reduced modulo `q`.
    pub fn chash(&self, m: &[u8], r: &BigUint) -> Result<ChameleonDigest> {
        if r >= &self.q {
            return Err(Error::ScalarOutOfRange);
        }
        Ok(self.chash_exponent(&self.hash_to_exponent(m), r))
    }

    /// `g^e * h^r mod p` for exponents given directly (reduced mod `q` first).
    pub fn chash_exponent(&self, e: &BigUint, r: &BigUint) -> ChameleonDigest {
        let value = match &self.small {
            Some(s) => {
                let e = (e % &self.q).to_u64().unwrap();
                let r = (r % &self.q).to_u64().unwrap();
                Element::Small(s.chash(e, r))
            }
            None => {
                let ge = self.g.modpow(&(e % &self.q), &self.p);
                let hr = self.h.modpow(&(r % &self.q), &self.p);
                Element::Big(ge * hr % &self.p)
            }
        };
        self.encode_element(&value)
    }

    /// Hot-path variant taking a precomputed SHA-256 and a small `r`.
    pub(crate) fn chash_hashed(&self, hash: &[u8; 32], r: u64) -> Element {
        match &self.small {
            Some(s) => Element::Small(s.chash(s.reduce_hash(hash), r % s.q)),
            None => {
                let e = BigUint::from_bytes_be(hash) % &self.q;
                let r = BigUint::from(r) % &self.q;
                Element::Big(self.g.modpow(&e, &self.p) * self.h.modpow(&r, &self.p) % &self.p)
            }
        }
    }

    pub(crate) fn encode_element(&self, value: &Element) -> ChameleonDigest {
        let mut out = vec![0u8; self.digest_width];
        match value {
            Element::Small(v) => {
                let bytes = v.to_be_bytes();
                let n = self.digest_width.min(8);
                out[self.digest_width - n..].copy_from_slice(&bytes[8 - n..]);
            }
            Element::Big(v) => {
                let bytes = v.to_bytes_be();
                out[self.digest_width - bytes.len()..].copy_from_slice(&bytes);
            }
        }
        ChameleonDigest(out)
    }

    /// True iff `CH(m, r)` equals `expected`. Malformed `r` yields false.
    pub fn verify_pair(&self, m: &[u8], r: &BigUint, expected: &ChameleonDigest) -> bool {
        match self.chash(m, r) {
            Ok(d) => &d == expected,
            Err(_) => false,
        }
    }

    /// Parses a canonical digest encoding, rejecting values outside `[1, p)`.
    pub fn decode_digest(&self, bytes: &[u8]) -> Result<ChameleonDigest> {
        if bytes.len() != self.digest_width {
            return Err(Error::Malformed("digest width"));
        }
        let v = BigUint::from_bytes_be(bytes);
        if v.is_zero() || v >= self.p {
            return Err(Error::Malformed("digest outside the group"));
        }
        Ok(ChameleonDigest(bytes.to_vec()))
    }

    /// Fixed-width encoding of an integer modulo `q`.
    pub fn encode_scalar(&self, v: &BigUint) -> Vec<u8> {
        crate::codec::fixed_be(v, self.scalar_width)
    }

    pub fn random_scalar(&self, rng: &mut impl rand::RngCore) -> BigUint {
        random_below(rng, &self.q)
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_key_fields(self, None)
    }
}

/// Key pair; the trapdoor is absent when only public material was loaded.
#[derive(Clone)]
pub struct ChameleonKeyPair {
    public: PublicKey,
    trapdoor: Option<BigUint>,
}

impl fmt::Debug for ChameleonKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChameleonKeyPair")
            .field("public", &self.public)
            .field("trapdoor", &self.trapdoor.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl PartialEq for ChameleonKeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.public == other.public && self.trapdoor == other.trapdoor
    }
}

impl Eq for ChameleonKeyPair {}

impl ChameleonKeyPair {
    /// Deterministic key generation. Toy sizes are `16..=512` bits; real
    /// deployments use 1024, 2048 or 3072.
    pub fn keygen(security_bits: u32, seed: &[u8]) -> Result<Self> {
        let order_bits = match security_bits {
            16..=512 => security_bits - 8,
            1024 | 2048 | 3072 => LARGE_ORDER_BITS,
            other => return Err(Error::UnsupportedKeySize(other)),
        };
        if seed.is_empty() {
            return Err(Error::EmptySeed);
        }
        let mut hasher = Sha256::new();
        hasher.update(b"imup-keygen");
        hasher.update(security_bits.to_be_bytes());
        hasher.update(seed);
        let mut rng = ChaCha20Rng::from_seed(hasher.finalize().into());

        // With an 8-bit cofactor a given q may admit no prime p at all, so
        // draw a fresh q when its cofactor range looks exhausted.
        let mut found = None;
        for _ in 0..ORDER_ATTEMPTS {
            let q = prime::random_prime(&mut rng, order_bits, PRIME_BUDGET)
                .ok_or(Error::PrimeSearchExhausted(PRIME_BUDGET))?;
            if let Some(p) = prime::random_prime_with_factor(&mut rng, &q, security_bits, COFACTOR_BUDGET) {
                found = Some((p, q));
                break;
            }
        }
        let (p, q) = found.ok_or(Error::PrimeSearchExhausted(PRIME_BUDGET))?;
        let cofactor = (&p - 1u32) / &q;
        let two = BigUint::from(2u32);
        let top = &p - 2u32;
        let g = loop {
            let a = prime::random_in(&mut rng, &two, &top);
            let g = a.modpow(&cofactor, &p);
            if !g.is_one() {
                break g;
            }
        };
        let x = prime::random_in(&mut rng, &BigUint::one(), &(&q - 1u32));
        let h = g.modpow(&x, &p);
        Ok(Self {
            public: PublicKey::assemble(p, q, g, h)?,
            trapdoor: Some(x),
        })
    }

    /// The hand-checkable group `p = 23, q = 11, g = 2, x = 3, h = 8`.
    pub fn toy() -> Self {
        let n = |v: u32| BigUint::from(v);
        Self {
            public: PublicKey::assemble(n(23), n(11), n(2), n(8)).expect("toy group"),
            trapdoor: Some(n(3)),
        }
    }

    pub fn from_public(public: PublicKey) -> Self {
        Self { public, trapdoor: None }
    }

    pub fn with_trapdoor(public: PublicKey, x: BigUint) -> Result<Self> {
        if x.is_zero() || &x >= public.order() {
            return Err(Error::InvalidKey("trapdoor outside [1, q)"));
        }
        if &public.g.modpow(&x, &public.p) != public.key() {
            return Err(Error::InvalidKey("h != g^x"));
        }
        Ok(Self {
            public,
            trapdoor: Some(x),
        })
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn trapdoor(&self) -> Option<&BigUint> {
        self.trapdoor.as_ref()
    }

    pub fn has_trapdoor(&self) -> bool {
        self.trapdoor.is_some()
    }

    /// Re-checks every structural invariant, including `h = g^x`.
    pub fn check_invariants(&self) -> Result<()> {
        self.public.check_group()?;
        if let Some(x) = &self.trapdoor {
            if x.is_zero() || x >= &self.public.q {
                return Err(Error::InvalidKey("trapdoor outside [1, q)"));
            }
            if self.public.g.modpow(x, &self.public.p) != self.public.h {
                return Err(Error::InvalidKey("h != g^x"));
            }
        }
        Ok(())
    }

    /// `r'` such that `CH(m_new, r') = CH(m, r)`.
    pub fn find_collision(&self, m: &[u8], r: &BigUint, m_new: &[u8]) -> Result<BigUint> {
        if r >= &self.public.q {
            return Err(Error::ScalarOutOfRange);
        }
        let e = self.public.hash_to_exponent(m);
        let e_new = self.public.hash_to_exponent(m_new);
        self.find_collision_exponent(&e, r, &e_new)
    }

    /// Exponent-level collision: `r + (e - e_new) * x^{-1} mod q`.
    pub fn find_collision_exponent(&self, e: &BigUint, r: &BigUint, e_new: &BigUint) -> Result<BigUint> {
        let x = self.trapdoor.as_ref().ok_or(Error::MissingTrapdoor)?;
        collision_with(x, self.public.order(), e, r, e_new)
    }

    /// Key file bytes; `include_trapdoor = false` writes the public form.
    pub fn encode(&self, include_trapdoor: bool) -> Vec<u8> {
        let x = if include_trapdoor { self.trapdoor.as_ref() } else { None };
        encode_key_fields(&self.public, x)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(KEY_MAGIC)?;
        let mut field = || -> Result<BigUint> {
            let raw = r.lp()?;
            if raw.is_empty() || (raw.len() > 1 && raw[0] == 0) {
                return Err(Error::Malformed("non-canonical key field"));
            }
            Ok(BigUint::from_bytes_be(raw))
        };
        let (p, q, g, h) = (field()?, field()?, field()?, field()?);
        let x = if r.is_empty() {
            None
        } else {
            let raw = r.lp()?;
            if raw.is_empty() || (raw.len() > 1 && raw[0] == 0) {
                return Err(Error::Malformed("non-canonical key field"));
            }
            Some(BigUint::from_bytes_be(raw))
        };
        r.finish()?;
        let public = PublicKey::assemble(p, q, g, h)?;
        match x {
            Some(x) => Self::with_trapdoor(public, x),
            None => Ok(Self::from_public(public)),
        }
    }
}

/// Collision formula with an explicit trapdoor guess.
pub(crate) fn collision_with(x: &BigUint, q: &BigUint, e: &BigUint, r: &BigUint, e_new: &BigUint) -> Result<BigUint> {
    let x = x % q;
    assert!(!x.is_zero(), "trapdoor must be invertible modulo a prime order");
    let x_inv = x.modinv(q).expect("prime order");
    let diff = (e % q + q - e_new % q) % q;
    Ok((r % q + diff * x_inv) % q)
}

fn encode_key_fields(pk: &PublicKey, x: Option<&BigUint>) -> Vec<u8> {
    let mut w = Writer::new();
    w.magic(KEY_MAGIC);
    for v in [&pk.p, &pk.q, &pk.g, &pk.h].into_iter().chain(x) {
        w.lp(&v.to_bytes_be());
    }
    w.finish()
}
