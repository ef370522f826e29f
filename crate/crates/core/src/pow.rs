//! Proof of work whose task is iterated chameleon hashing.
//!
//! For nonce `0, 1, 2, ...` the solver evaluates `CH(m || nonce_be8, 1)`
//! until the canonical digest starts with `d` zero hex nibbles. The verifier
//! needs a single evaluation regardless of `d`.

use num_bigint::BigUint;
use sha2::{Digest as _, Sha256};

use crate::chameleon::{ChameleonDigest, PublicKey};
use crate::error::{Error, Result};

/// Identifier of the work task.
pub const TASK_TAG: &str = "CHASH-ITER";

/// Randomness held fixed while the nonce varies.
pub const POW_RANDOMNESS: u64 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PowChallenge {
    message: Vec<u8>,
    difficulty: u8,
}

impl PowChallenge {
    pub fn new(pk: &PublicKey, message: impl Into<Vec<u8>>, difficulty: u8) -> Result<Self> {
        check_difficulty(pk, difficulty)?;
        Ok(Self {
            message: message.into(),
            difficulty,
        })
    }

    pub fn message(&self) -> &[u8] {
        &self.message
    }

    pub fn difficulty(&self) -> u8 {
        self.difficulty
    }

    pub fn task(&self) -> &'static str {
        TASK_TAG
    }

    pub fn with_difficulty(&self, difficulty: u8) -> Self {
        Self {
            message: self.message.clone(),
            difficulty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PowSolution {
    pub nonce: u64,
    pub b_hash: ChameleonDigest,
}

impl PowSolution {
    /// Nonces tried by the (sequential, smallest-first) solver.
    pub fn trials(&self) -> u64 {
        self.nonce + 1
    }
}

/// Work digests are `g^e * h`, so they lie in the order-`q` subgroup. A
/// difficulty is offered only while at least `2^4` subgroup elements are
/// expected below its threshold; past that point small groups may have no
/// solution at all.
const MIN_SOLUTIONS_LOG2: f64 = 4.0;

fn log2_big(v: &BigUint) -> f64 {
    let shift = v.bits().saturating_sub(53);
    let top = (v >> shift).to_u64_digits().first().copied().unwrap_or(0) as f64;
    top.log2() + shift as f64
}

pub fn max_difficulty(pk: &PublicKey) -> u8 {
    let width_cap = (2 * pk.digest_width()).min(u8::MAX as usize) as u8;
    let ratio = log2_big(pk.order()) - log2_big(pk.modulus());
    (1..=width_cap)
        .take_while(|&d| ratio + bit_budget(pk, d) as f64 >= MIN_SOLUTIONS_LOG2)
        .last()
        .unwrap_or(0)
}

pub(crate) fn check_difficulty(pk: &PublicKey, difficulty: u8) -> Result<()> {
    let max = max_difficulty(pk);
    if difficulty > max {
        return Err(Error::DifficultyOutOfRange { difficulty, max });
    }
    Ok(())
}

/// Maximum bit length of a digest value that still has `d` leading zero nibbles.
fn bit_budget(pk: &PublicKey, difficulty: u8) -> u64 {
    (8 * pk.digest_width() as u64).saturating_sub(4 * difficulty as u64)
}

pub fn pow_digest(pk: &PublicKey, message: &[u8], nonce: u64) -> ChameleonDigest {
    let mut hasher = Sha256::new();
    hasher.update(message);
    hasher.update(nonce.to_be_bytes());
    let hash: [u8; 32] = hasher.finalize().into();
    pk.encode_element(&pk.chash_hashed(&hash, POW_RANDOMNESS))
}

/// Smallest nonce whose work digest meets the difficulty.
pub fn solve(pk: &PublicKey, challenge: &PowChallenge) -> Result<PowSolution> {
    check_difficulty(pk, challenge.difficulty)?;
    let budget = bit_budget(pk, challenge.difficulty);
    let mut prefix = Sha256::new();
    prefix.update(&challenge.message);
    let mut nonce = 0u64;
    loop {
        let mut hasher = prefix.clone();
        hasher.update(nonce.to_be_bytes());
        let hash: [u8; 32] = hasher.finalize().into();
        let element = pk.chash_hashed(&hash, POW_RANDOMNESS);
        if element.bits() <= budget {
            return Ok(PowSolution {
                nonce,
                b_hash: pk.encode_element(&element),
            });
        }
        nonce = nonce.checked_add(1).ok_or(Error::NonceSpaceExhausted)?;
    }
}

/// Recomputes the work digest once and checks it against `b_hash` and `d`.
pub fn verify(pk: &PublicKey, challenge: &PowChallenge, solution: &PowSolution) -> bool {
    if check_difficulty(pk, challenge.difficulty).is_err() {
        return false;
    }
    let digest = pow_digest(pk, &challenge.message, solution.nonce);
    digest == solution.b_hash && digest.leading_zero_nibbles() >= challenge.difficulty as u32
}

/// Verification when the solution is carried as a bare nonce.
pub fn check_nonce(pk: &PublicKey, message: &[u8], difficulty: u8, nonce: u64) -> bool {
    if check_difficulty(pk, difficulty).is_err() {
        return false;
    }
    pow_digest(pk, message, nonce).leading_zero_nibbles() >= difficulty as u32
}

/// Expected number of nonces for difficulty `d`, accounting for the top
/// nibble range of `p`: `p / 2^(8w - 4d)`.
pub fn expected_trials(pk: &PublicKey, difficulty: u8) -> f64 {
    let budget = bit_budget(pk, difficulty);
    let threshold = BigUint::from(1u32) << budget;
    let p = pk.modulus();
    if &threshold >= p {
        return 1.0;
    }
    let shift = p.bits().saturating_sub(60);
    let p_hi = (p >> shift).to_u64_digits().first().copied().unwrap_or(0) as f64;
    let t_hi = (&threshold >> shift).to_u64_digits().first().copied().unwrap_or(0) as f64;
    (p_hi / t_hi).max(1.0)
}
