//! Modular firmware updates verified through chameleon-hash chains.

pub mod bench;
pub mod chameleon;
pub mod codec;
pub mod device;
pub mod error;
pub mod package;
pub mod pipeline;
pub mod pow;
pub mod server;

pub use chameleon::{ChameleonDigest, ChameleonKeyPair, PublicKey};
pub use device::{Branch, DeviceState};
pub use error::{Error, Result};
pub use package::{CryptoModule, CryptoPool, FunctionalModule, Manifest, ModuleCatalog, ModuleId, ModuleKind};
pub use pipeline::{Checkpoint, FilledBlock, FirmwareImage, ImageKind, VerificationChain};
pub use pow::{PowChallenge, PowSolution};
pub use server::{Server, ServerConfig, ServerMetrics};
