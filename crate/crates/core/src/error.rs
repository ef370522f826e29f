use std::io;

use thiserror::Error;

use crate::package::ModuleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported key size: {0} bits")]
    UnsupportedKeySize(u32),
    #[error("keygen seed must not be empty")]
    EmptySeed,
    #[error("prime search exhausted after {0} candidates")]
    PrimeSearchExhausted(usize),
    #[error("invalid key: {0}")]
    InvalidKey(&'static str),
    #[error("scalar is not reduced modulo the subgroup order")]
    ScalarOutOfRange,
    #[error("operation requires the trapdoor but only the public key is available")]
    MissingTrapdoor,
    #[error("difficulty {difficulty} exceeds the {max} nibbles of the digest encoding")]
    DifficultyOutOfRange { difficulty: u8, max: u8 },
    #[error("proof-of-work nonce space exhausted")]
    NonceSpaceExhausted,

    #[error("module {0} does not exist in the catalog")]
    UnknownModule(ModuleId),
    #[error("a module named {0:?} is already registered")]
    DuplicateName(String),
    #[error("module {0} already exists in the catalog")]
    DuplicateModuleId(ModuleId),
    #[error("dependency cycle through module {0}")]
    CyclicDependency(ModuleId),
    #[error("popularity rank is not a permutation of the catalog")]
    InvalidRank,
    #[error("module count must be at least one")]
    EmptyRequest,

    #[error("crypto module pool exhausted: needed {needed}, {available} left")]
    PoolExhausted { needed: usize, available: usize },
    #[error("expected exactly {expected} functional modules, got {actual}")]
    ChainLengthMismatch { expected: usize, actual: usize },
    #[error("module {0} appears more than once")]
    DuplicateModule(ModuleId),
    #[error("request needs {needed} slots after dependency closure but the chain has {slots}")]
    Oversize { needed: usize, slots: usize },
    #[error("checkpoint is inconsistent: {0}")]
    InvalidCheckpoint(&'static str),
    #[error("image build failed: {0}")]
    BuildFailed(String),

    #[error("device is already initialized")]
    AlreadyInitialized,
    #[error("device has no trust root")]
    NotInitialized,
    #[error("image has not been accepted by the device")]
    Unverified,
    #[error("selected module {0} is not carried by the image")]
    ModuleNotInImage(ModuleId),
    #[error("dependency {0} is not carried by the image")]
    ClosureUnsatisfiable(ModuleId),

    #[error("attack scenario leaves {0} unknown bits; empirical mode is capped at 24")]
    EmpiricalCapExceeded(u32),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
