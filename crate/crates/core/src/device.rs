//! Device side: factory trust, the functional and security verification
//! branches, and installation bookkeeping.
//!
//! Verification parses the encoded image as a stream. Block contents are
//! hashed chunk by chunk and never held in memory, except the small
//! commitment block.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use num_bigint::BigUint;
use sha2::{Digest as _, Sha256};

use crate::chameleon::{ChameleonDigest, PublicKey};
use crate::codec::{Reader, StreamReader, Writer};
use crate::error::{Error, Result};
use crate::package::{FunctionalModule, ModuleId, BLOCK_TAG, MODULE_MAGIC};
use crate::pipeline::{commit_content, commitment_message, FirmwareImage, ImageKind, VerificationChain, IMAGE_MAGIC};
use crate::pow;

pub const DEVICE_MAGIC: &[u8; 8] = b"IMUPDEV1";

/// Upper bound on commitment-block content the device is willing to buffer.
const MAX_COMMIT_CONTENT: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Functional,
    Security,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceState {
    public_key: PublicKey,
    pow_difficulty: u8,
    chain: Option<VerificationChain>,
    installed: BTreeSet<ModuleId>,
}

/// What the stream parser learned about one image.
struct Scan {
    kind: ImageKind,
    version_id: String,
    digests: Vec<ChameleonDigest>,
    nonces: Vec<u64>,
    blocks_ok: bool,
    block_info: Vec<u8>,
    commitment: BigUint,
    proof: Option<BigUint>,
}

impl Scan {
    fn chain(&self) -> VerificationChain {
        VerificationChain {
            digests: self.digests.clone(),
            nonces: self.nonces.clone(),
            commitment: self.commitment.clone(),
            checkpoint_id: self.version_id.clone(),
        }
    }
}

/// One parsed block record.
struct ScannedBlock {
    digest: ChameleonDigest,
    nonce: u64,
    hash: [u8; 32],
    valid: bool,
    content: Vec<u8>,
}

/// Reads one block record, buffering the content only for the commitment block.
fn scan_block<R: Read>(
    s: &mut StreamReader<R>,
    pk: &PublicKey,
    difficulty: u8,
    keep_content: bool,
) -> Result<ScannedBlock> {
    let id = s.u32()?;
    let len = s.len_prefix()?;
    let mut hasher = Sha256::new();
    let mut head = Vec::with_capacity(12);
    let keep = keep_content && len <= MAX_COMMIT_CONTENT;
    let mut kept = Vec::new();
    s.stream(len, |chunk| {
        hasher.update(chunk);
        let want = 12 - head.len();
        head.extend_from_slice(&chunk[..want.min(chunk.len())]);
        if keep {
            kept.extend_from_slice(chunk);
        }
    })?;
    hasher.update(BLOCK_TAG);
    let hash: [u8; 32] = hasher.finalize().into();
    let r = BigUint::from_bytes_be(&s.vec(pk.scalar_width())?);
    let nonce = s.u64()?;
    let digest = pk.decode_digest(&s.vec(pk.digest_width())?)?;

    let looks_like_module = head.len() == 12 && &head[..8] == MODULE_MAGIC;
    let id_ok = if id == u32::MAX {
        !looks_like_module
    } else {
        looks_like_module && head[8..12] == id.to_be_bytes()
    };
    let valid = id_ok
        && keep == keep_content
        && &r < pk.order()
        && pk.chash_exponent(&pk.reduce_hash(&hash), &r) == digest
        && pow::check_nonce(pk, digest.as_bytes(), difficulty, nonce);
    Ok(ScannedBlock {
        digest,
        nonce,
        hash,
        valid,
        content: kept,
    })
}

fn scan_image<R: Read>(reader: R, pk: &PublicKey, difficulty: u8) -> Result<Scan> {
    let mut s = StreamReader::new(reader);
    if &s.exact::<8>()? != IMAGE_MAGIC {
        return Err(Error::Malformed("image magic"));
    }
    let kind = ImageKind::from_byte(s.u8()?)?;
    let len = s.len_prefix()?;
    let version_id = String::from_utf8(s.vec(len)?).map_err(|_| Error::Malformed("version id"))?;
    let l = s.u16()? as usize;
    let mut digests = Vec::with_capacity(l + 1);
    let mut nonces = Vec::with_capacity(l + 1);
    let mut hashes = Vec::with_capacity(l);
    let mut blocks_ok = true;
    for _ in 0..l {
        let b = scan_block(&mut s, pk, difficulty, false)?;
        digests.push(b.digest);
        nonces.push(b.nonce);
        hashes.push(b.hash);
        blocks_ok &= b.valid;
    }
    let cb = scan_block(&mut s, pk, difficulty, true)?;
    digests.push(cb.digest);
    nonces.push(cb.nonce);
    blocks_ok &= cb.valid;

    let len = s.len_prefix()?;
    let block_info = s.vec(len)?;
    let commitment = BigUint::from_bytes_be(&s.vec(pk.scalar_width())?);
    let proof = match s.u8()? {
        0 => None,
        1 => Some(BigUint::from_bytes_be(&s.vec(pk.scalar_width())?)),
        _ => return Err(Error::Malformed("proof flag")),
    };
    if !s.at_eof()? {
        return Err(Error::Malformed("trailing bytes"));
    }

    let expected_info: Vec<u8> = digests[..l].iter().flat_map(|d| d.as_bytes().iter().copied()).collect();
    let in_range = &commitment < pk.order() && proof.as_ref().is_none_or(|p| p < pk.order());
    let commit_ok = cb.content
        == commit_content(
            pk,
            &version_id,
            kind,
            &block_info,
            &nonces[..l],
            &hashes,
            &commitment,
            proof.as_ref(),
        );
    blocks_ok &= in_range && commit_ok && block_info == expected_info;
    Ok(Scan {
        kind,
        version_id,
        digests,
        nonces,
        blocks_ok,
        block_info,
        commitment,
        proof,
    })
}

impl DeviceState {
    /// A device that has not yet received its trust root.
    pub fn new(public_key: PublicKey, pow_difficulty: u8) -> Self {
        Self {
            public_key,
            pow_difficulty,
            chain: None,
            installed: BTreeSet::new(),
        }
    }

    /// Installs the trust root without verification.
    pub fn factory_init(&self, chain: VerificationChain) -> Result<Self> {
        if self.chain.is_some() {
            return Err(Error::AlreadyInitialized);
        }
        if chain.digests.is_empty() || chain.digests.len() != chain.nonces.len() {
            return Err(Error::InvalidCheckpoint("chain shape"));
        }
        Ok(Self {
            chain: Some(chain),
            ..self.clone()
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    pub fn pow_difficulty(&self) -> u8 {
        self.pow_difficulty
    }

    pub fn is_initialized(&self) -> bool {
        self.chain.is_some()
    }

    pub fn chain(&self) -> Option<&VerificationChain> {
        self.chain.as_ref()
    }

    pub fn installed(&self) -> &BTreeSet<ModuleId> {
        &self.installed
    }

    fn scan(&self, reader: impl Read) -> Option<Scan> {
        scan_image(reader, &self.public_key, self.pow_difficulty).ok()
    }

    /// True iff digests and nonces match the stored chain in order and every
    /// block passes its chameleon and work checks.
    fn matches_chain(&self, scan: &Scan) -> bool {
        match &self.chain {
            Some(c) => scan.blocks_ok && scan.digests == c.digests && scan.nonces == c.nonces,
            None => false,
        }
    }

    pub fn functional_verify(&self, image: &FirmwareImage) -> bool {
        self.functional_verify_reader(image.encode(&self.public_key).as_slice())
    }

    pub fn functional_verify_reader(&self, reader: impl Read) -> bool {
        match self.scan(reader) {
            Some(scan) => scan.kind == ImageKind::Functional && scan.proof.is_none() && self.matches_chain(&scan),
            None => false,
        }
    }

    /// Returns the rotated state on acceptance; `None` leaves `self` as the
    /// current state.
    pub fn security_verify(&self, image: &FirmwareImage) -> Option<Self> {
        self.security_verify_reader(image.encode(&self.public_key).as_slice())
    }

    pub fn security_verify_reader(&self, reader: impl Read) -> Option<Self> {
        let stored = self.chain.as_ref()?;
        let scan = self.scan(reader)?;
        let proof = scan.proof.as_ref()?;
        if scan.kind != ImageKind::Security || !scan.blocks_ok || scan.digests.len() != stored.digests.len() {
            return None;
        }
        let pk = &self.public_key;
        let before = pk
            .chash(&commitment_message(&stored.block_info()), &stored.commitment)
            .ok()?;
        let after = pk.chash(&commitment_message(&scan.block_info), proof).ok()?;
        if before != after {
            return None;
        }
        Some(Self {
            chain: Some(scan.chain()),
            ..self.clone()
        })
    }

    /// Dispatches on the image kind. Functional acceptance keeps the state.
    pub fn verify(&self, image_bytes: &[u8]) -> Option<(Branch, Self)> {
        let kind = ImageKind::from_byte(*image_bytes.get(8)?).ok()?;
        match kind {
            ImageKind::Functional => self
                .functional_verify_reader(image_bytes)
                .then(|| (Branch::Functional, self.clone())),
            ImageKind::Security => self.security_verify_reader(image_bytes).map(|s| (Branch::Security, s)),
        }
    }

    /// Records `selected` and its dependency closure as installed. The image
    /// must be accepted under the current chain: a functional variant, or the
    /// security image this device has already rotated to.
    pub fn install(&self, image: &FirmwareImage, selected: &BTreeSet<ModuleId>) -> Result<Self> {
        let scan = self
            .scan(image.encode(&self.public_key).as_slice())
            .ok_or(Error::Unverified)?;
        let stored = self.chain.as_ref().ok_or(Error::NotInitialized)?;
        let accepted = self.matches_chain(&scan)
            && match scan.kind {
                ImageKind::Functional => scan.proof.is_none(),
                ImageKind::Security => scan.commitment == stored.commitment,
            };
        if !accepted {
            return Err(Error::Unverified);
        }
        let modules: Vec<FunctionalModule> = image.modules()?;
        let find = |id: ModuleId| modules.iter().find(|m| m.id == id);
        let mut closure = BTreeSet::new();
        let mut stack = Vec::new();
        for &id in selected {
            if find(id).is_none() {
                return Err(Error::ModuleNotInImage(id));
            }
            stack.push(id);
        }
        while let Some(id) = stack.pop() {
            if !closure.insert(id) {
                continue;
            }
            let m = find(id).ok_or(Error::ClosureUnsatisfiable(id))?;
            stack.extend(m.manifest.dependencies.iter().copied());
        }
        let mut installed = self.installed.clone();
        installed.extend(closure);
        Ok(Self {
            installed,
            ..self.clone()
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(DEVICE_MAGIC);
        match &self.chain {
            Some(c) => {
                w.u32(c.digests.len() as u32);
                for (d, n) in c.digests.iter().zip(&c.nonces) {
                    w.lp(d.as_bytes()).u64(*n);
                }
                w.lp(&self.public_key.encode_scalar(&c.commitment))
                    .lp(c.checkpoint_id.as_bytes());
            }
            None => {
                w.u32(0);
            }
        }
        w.u32(self.installed.len() as u32);
        for id in &self.installed {
            w.u32(id.0);
        }
        w.u8(self.pow_difficulty).lp(&self.public_key.encode());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DEVICE_MAGIC)?;
        let count = r.u32()? as usize;
        let mut raw_chain = None;
        if count > 0 {
            let mut entries = Vec::with_capacity(count.min(1024));
            for _ in 0..count {
                entries.push((r.lp()?, r.u64()?));
            }
            let commitment = r.lp()?;
            let id = String::from_utf8(r.lp()?.to_vec()).map_err(|_| Error::Malformed("checkpoint id"))?;
            raw_chain = Some((entries, commitment, id));
        }
        let n = r.u32()? as usize;
        let mut installed = BTreeSet::new();
        let mut prev = None;
        for _ in 0..n {
            let id = ModuleId(r.u32()?);
            if prev.is_some_and(|p| p >= id) {
                return Err(Error::Malformed("installed ids not strictly increasing"));
            }
            prev = Some(id);
            installed.insert(id);
        }
        let pow_difficulty = r.u8()?;
        let key = crate::chameleon::ChameleonKeyPair::decode(r.lp()?)?;
        if key.has_trapdoor() {
            return Err(Error::Malformed("device state must not carry a trapdoor"));
        }
        r.finish()?;
        let public_key = key.public().clone();
        pow::check_difficulty(&public_key, pow_difficulty)?;
        let chain = match raw_chain {
            Some((entries, commitment, checkpoint_id)) => {
                if commitment.len() != public_key.scalar_width() {
                    return Err(Error::Malformed("commitment width"));
                }
                let commitment = BigUint::from_bytes_be(commitment);
                if &commitment >= public_key.order() {
                    return Err(Error::ScalarOutOfRange);
                }
                let mut digests = Vec::with_capacity(entries.len());
                let mut nonces = Vec::with_capacity(entries.len());
                for (d, nonce) in entries {
                    digests.push(public_key.decode_digest(d)?);
                    nonces.push(nonce);
                }
                Some(VerificationChain {
                    digests,
                    nonces,
                    commitment,
                    checkpoint_id,
                })
            }
            None => None,
        };
        Ok(Self {
            public_key,
            pow_difficulty,
            chain,
            installed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chameleon::ChameleonKeyPair;
    use crate::package::{CryptoPool, ModuleCatalog, ModuleKind};
    use crate::pipeline::{init_firmware, iterate_version, security_update, Checkpoint};

    struct Fixture {
        kp: ChameleonKeyPair,
        catalog: ModuleCatalog,
        pool: CryptoPool,
        ck: Checkpoint,
        device: DeviceState,
    }

    fn fixture() -> Fixture {
        let kp = ChameleonKeyPair::keygen(40, b"device").unwrap();
        let mut catalog = ModuleCatalog::new();
        let a = catalog
            .package("a", ModuleKind::Binary, vec![1; 40], vec!["run".into()], &[])
            .unwrap();
        catalog
            .package("b", ModuleKind::Script, b"echo b".to_vec(), vec![], &[a])
            .unwrap();
        catalog
            .package("c", ModuleKind::Binary, vec![3; 8], vec![], &[])
            .unwrap();
        let pool = CryptoPool::generate(kp.public(), 12, 1, 3).unwrap();
        let mods: Vec<_> = catalog.modules().take(3).cloned().collect();
        let ck = init_firmware(&kp, &pool, &mods, 3, "base", 1).unwrap();
        let device = DeviceState::new(kp.public().clone(), 1)
            .factory_init(ck.chain.clone())
            .unwrap();
        Fixture {
            kp,
            catalog,
            pool,
            ck,
            device,
        }
    }

    #[test]
    fn factory_init_is_one_shot() {
        let f = fixture();
        assert!(matches!(
            f.device.factory_init(f.ck.chain.clone()),
            Err(Error::AlreadyInitialized)
        ));
    }

    #[test]
    fn uninitialized_device_rejects_everything() {
        let f = fixture();
        let blank = DeviceState::new(f.kp.public().clone(), 1);
        assert!(!blank.functional_verify(&f.ck.image));
        assert!(matches!(
            blank.install(&f.ck.image, &BTreeSet::new()),
            Err(Error::NotInitialized | Error::Unverified)
        ));
    }

    #[test]
    fn variants_verify_and_reordering_fails() {
        let f = fixture();
        assert!(f.device.functional_verify(&f.ck.image));
        let v = iterate_version(&f.kp, &f.ck, &f.catalog, &[ModuleId(2)].into()).unwrap();
        assert!(f.device.functional_verify(&v));
        let mut swapped = v.clone();
        swapped.blocks.swap(0, 1);
        assert!(!f.device.functional_verify(&swapped));
    }

    #[test]
    fn security_branch_rotates_and_blocks_rollback() {
        let f = fixture();
        let mods: Vec<_> = f.catalog.modules().cloned().collect();
        let (next, _) = security_update(&f.kp, &f.ck, &f.pool, &mods, "s1", 7).unwrap();
        assert!(!f.device.functional_verify(&next.image));
        let rotated = f.device.security_verify(&next.image).expect("accepted");
        assert_eq!(rotated.chain(), Some(&next.chain));
        assert!(rotated.security_verify(&next.image).is_none());
        assert!(!rotated.functional_verify(&f.ck.image));
        assert!(f.device.security_verify(&f.ck.image).is_none());
    }

    #[test]
    fn install_follows_dependencies_inside_image() {
        let f = fixture();
        let img = &f.ck.image;
        let s = f.device.install(img, &BTreeSet::new()).unwrap();
        assert!(s.installed().is_empty());
        let s = f.device.install(img, &[ModuleId(1)].into()).unwrap();
        assert_eq!(s.installed(), &[ModuleId(0), ModuleId(1)].into());
        let v = iterate_version(&f.kp, &f.ck, &f.catalog, &[ModuleId(2)].into()).unwrap();
        assert!(matches!(
            f.device.install(&v, &[ModuleId(0)].into()),
            Err(Error::ModuleNotInImage(ModuleId(0)))
        ));
    }

    #[test]
    fn state_file_round_trip() {
        let f = fixture();
        let s = f.device.install(&f.ck.image, &[ModuleId(2)].into()).unwrap();
        let bytes = s.encode();
        let back = DeviceState::decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.encode(), bytes);
        let blank = DeviceState::new(f.kp.public().clone(), 0);
        assert_eq!(DeviceState::decode(&blank.encode()).unwrap(), blank);
    }

    #[test]
    fn verify_dispatches_on_kind() {
        let f = fixture();
        let bytes = f.ck.image.encode(f.kp.public());
        let (branch, same) = f.device.verify(&bytes).unwrap();
        assert_eq!(branch, Branch::Functional);
        assert_eq!(same, f.device);
    }
}
