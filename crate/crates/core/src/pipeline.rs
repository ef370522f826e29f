//! Server-side image assembly: initial trusted image, security checkpoints
//! with proof of commitment, and customized variants that share a
//! checkpoint's digest sequence.
//!
//! Every image has `L` content blocks and one commitment block. Each block
//! reuses a template [`CryptoModule`]: its content is swapped in with a
//! trapdoor collision, so the digest and the proof of work carried over from
//! the template stay valid. The commitment block's content binds the image
//! header (version, kind, block info, commitment, proof).

use std::collections::{BTreeSet, HashSet};

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use crate::chameleon::{ChameleonDigest, ChameleonKeyPair, PublicKey};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::package::{
    block_message, peek_module_id, CryptoModule, CryptoPool, FunctionalModule, ModuleCatalog, ModuleId, PADDING_LEN,
};
use crate::pow;

pub const IMAGE_MAGIC: &[u8; 8] = b"IMUPIMG1";
pub const COMMIT_MAGIC: &[u8; 8] = b"IMUPCMT1";
/// Prefix of the message hashed in the commitment equality.
pub const COMMITMENT_DOMAIN: &[u8] = b"IMUP-COMMITMENT";
pub const DEFAULT_CHAIN_LENGTH: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImageKind {
    Functional,
    Security,
}

impl ImageKind {
    pub fn to_byte(self) -> u8 {
        match self {
            ImageKind::Functional => 0,
            ImageKind::Security => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ImageKind::Functional),
            1 => Ok(ImageKind::Security),
            _ => Err(Error::Malformed("image kind")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilledBlock {
    /// `None` for filler slots and the commitment block.
    pub module_id: Option<ModuleId>,
    pub content: Vec<u8>,
    pub r: BigUint,
    pub solution_nonce: u64,
    pub digest: ChameleonDigest,
}

impl FilledBlock {
    /// The untouched template, used for unused slots.
    pub fn filler(template: &CryptoModule) -> Self {
        Self {
            module_id: None,
            content: template.pstr.to_vec(),
            r: template.pparam.clone(),
            solution_nonce: template.solution_nonce,
            digest: template.digest.clone(),
        }
    }

    /// Moves `content` into the template's digest with a trapdoor collision.
    pub fn fill(
        keypair: &ChameleonKeyPair,
        template: &CryptoModule,
        module_id: Option<ModuleId>,
        content: Vec<u8>,
    ) -> Result<Self> {
        let r = keypair.find_collision(
            &block_message(&template.pstr),
            &template.pparam,
            &block_message(&content),
        )?;
        Ok(Self {
            module_id,
            content,
            r,
            solution_nonce: template.solution_nonce,
            digest: template.digest.clone(),
        })
    }

    pub fn verify(&self, pk: &PublicKey, difficulty: u8) -> bool {
        let id_ok = match self.module_id {
            Some(id) => peek_module_id(&self.content) == Some(id),
            None => peek_module_id(&self.content).is_none(),
        };
        id_ok
            && pk.verify_pair(&block_message(&self.content), &self.r, &self.digest)
            && pow::check_nonce(pk, self.digest.as_bytes(), difficulty, self.solution_nonce)
    }

    fn write(&self, w: &mut Writer, pk: &PublicKey) {
        w.u32(self.module_id.unwrap_or(ModuleId::FILLER).0)
            .lp(&self.content)
            .scalar(&self.r, pk.scalar_width())
            .u64(self.solution_nonce)
            .raw(self.digest.as_bytes());
    }

    fn read(r: &mut Reader<'_>, pk: &PublicKey) -> Result<Self> {
        let id = ModuleId(r.u32()?);
        let content = r.lp()?.to_vec();
        let rand = r.scalar(pk.scalar_width())?;
        let solution_nonce = r.u64()?;
        let digest = pk.decode_digest(r.take(pk.digest_width())?)?;
        Ok(Self {
            module_id: (id != ModuleId::FILLER).then_some(id),
            content,
            r: rand,
            solution_nonce,
            digest,
        })
    }
}

/// Ordered concatenation of canonical block digests.
pub fn aggregate_block_info(blocks: &[FilledBlock]) -> Vec<u8> {
    blocks
        .iter()
        .flat_map(|b| b.digest.as_bytes().iter().copied())
        .collect()
}

/// Message hashed on both sides of the commitment equality.
pub fn commitment_message(block_info: &[u8]) -> Vec<u8> {
    let mut m = COMMITMENT_DOMAIN.to_vec();
    m.extend_from_slice(block_info);
    m
}

/// SHA-256 of a block message; binds the exact block content.
pub fn content_hash(content: &[u8]) -> [u8; 32] {
    Sha256::digest(block_message(content)).into()
}

/// Content of the commitment block: everything in the image outside the
/// content blocks, plus each content block's work nonce and content hash,
/// so blocks cannot be spliced between variants of one checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn commit_content(
    pk: &PublicKey,
    version_id: &str,
    kind: ImageKind,
    block_info: &[u8],
    nonces: &[u64],
    content_hashes: &[[u8; 32]],
    commitment: &BigUint,
    proof: Option<&BigUint>,
) -> Vec<u8> {
    debug_assert_eq!(nonces.len(), content_hashes.len());
    let mut w = Writer::new();
    w.magic(COMMIT_MAGIC)
        .u8(kind.to_byte())
        .lp(version_id.as_bytes())
        .lp(block_info)
        .u32(nonces.len() as u32);
    for (n, h) in nonces.iter().zip(content_hashes) {
        w.u64(*n).raw(h);
    }
    w.scalar(commitment, pk.scalar_width());
    match proof {
        Some(p) => w.u8(1).scalar(p, pk.scalar_width()),
        None => w.u8(0),
    };
    w.finish()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FirmwareImage {
    pub version_id: String,
    pub kind: ImageKind,
    pub blocks: Vec<FilledBlock>,
    pub commitment_block: FilledBlock,
    pub block_info: Vec<u8>,
    pub commitment: BigUint,
    pub proof: Option<BigUint>,
}

impl FirmwareImage {
    pub fn chain_length(&self) -> usize {
        self.blocks.len()
    }

    /// Ids carried by content blocks, excluding filler.
    pub fn module_set(&self) -> BTreeSet<ModuleId> {
        self.blocks.iter().filter_map(|b| b.module_id).collect()
    }

    /// `h_1 .. h_L` followed by the commitment-block digest.
    pub fn digests(&self) -> Vec<ChameleonDigest> {
        self.blocks
            .iter()
            .chain(std::iter::once(&self.commitment_block))
            .map(|b| b.digest.clone())
            .collect()
    }

    /// Work nonces in the same order as [`Self::digests`].
    pub fn nonces(&self) -> Vec<u64> {
        self.blocks
            .iter()
            .chain(std::iter::once(&self.commitment_block))
            .map(|b| b.solution_nonce)
            .collect()
    }

    /// The chain a device adopts when it accepts this image as a checkpoint.
    pub fn chain(&self) -> VerificationChain {
        VerificationChain {
            digests: self.digests(),
            nonces: self.nonces(),
            commitment: self.commitment.clone(),
            checkpoint_id: self.version_id.clone(),
        }
    }

    /// Decodes the functional modules carried by the image.
    pub fn modules(&self) -> Result<Vec<FunctionalModule>> {
        self.blocks
            .iter()
            .filter(|b| b.module_id.is_some())
            .map(|b| FunctionalModule::decode(&b.content))
            .collect()
    }

    pub fn encode(&self, pk: &PublicKey) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(IMAGE_MAGIC)
            .u8(self.kind.to_byte())
            .lp(self.version_id.as_bytes())
            .u16(u16::try_from(self.blocks.len()).expect("chain length fits u16"));
        for b in &self.blocks {
            b.write(&mut w, pk);
        }
        self.commitment_block.write(&mut w, pk);
        w.lp(&self.block_info).scalar(&self.commitment, pk.scalar_width());
        match &self.proof {
            Some(p) => w.u8(1).scalar(p, pk.scalar_width()),
            None => w.u8(0),
        };
        w.finish()
    }

    pub fn decode(bytes: &[u8], pk: &PublicKey) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(IMAGE_MAGIC)?;
        let kind = ImageKind::from_byte(r.u8()?)?;
        let version_id = String::from_utf8(r.lp()?.to_vec()).map_err(|_| Error::Malformed("version id"))?;
        let len = r.u16()? as usize;
        let blocks = (0..len)
            .map(|_| FilledBlock::read(&mut r, pk))
            .collect::<Result<Vec<_>>>()?;
        let commitment_block = FilledBlock::read(&mut r, pk)?;
        let block_info = r.lp()?.to_vec();
        let commitment = r.scalar(pk.scalar_width())?;
        let proof = match r.u8()? {
            0 => None,
            1 => Some(r.scalar(pk.scalar_width())?),
            _ => return Err(Error::Malformed("proof flag")),
        };
        r.finish()?;
        Ok(Self {
            version_id,
            kind,
            blocks,
            commitment_block,
            block_info,
            commitment,
            proof,
        })
    }
}

/// The device trust root: ordered digests `h_1 .. h_{L+1}` and commitment `C`.
/// The work nonce of each digest is pinned alongside it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationChain {
    pub digests: Vec<ChameleonDigest>,
    pub nonces: Vec<u64>,
    pub commitment: BigUint,
    pub checkpoint_id: String,
}

impl VerificationChain {
    pub fn chain_length(&self) -> usize {
        self.digests.len().saturating_sub(1)
    }

    /// Concatenation of the content-block digests (everything but the last).
    pub fn block_info(&self) -> Vec<u8> {
        let n = self.chain_length();
        self.digests[..n]
            .iter()
            .flat_map(|d| d.as_bytes().iter().copied())
            .collect()
    }
}

/// Server-side record of a checkpoint: its image, chain, and the templates
/// (the last one backs the commitment block).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub image: FirmwareImage,
    pub chain: VerificationChain,
    pub templates: Vec<CryptoModule>,
}

impl Checkpoint {
    pub fn id(&self) -> &str {
        &self.chain.checkpoint_id
    }

    pub fn chain_length(&self) -> usize {
        self.chain.chain_length()
    }

    fn check_consistent(&self) -> Result<()> {
        let l = self.chain_length();
        if self.templates.len() != l + 1 || self.image.blocks.len() != l {
            return Err(Error::InvalidCheckpoint("chain length"));
        }
        let template_digests: Vec<_> = self.templates.iter().map(|t| t.digest.clone()).collect();
        let template_nonces: Vec<_> = self.templates.iter().map(|t| t.solution_nonce).collect();
        if template_digests != self.chain.digests
            || self.image.digests() != self.chain.digests
            || template_nonces != self.chain.nonces
        {
            return Err(Error::InvalidCheckpoint("digest sequence"));
        }
        if self.image.block_info != self.chain.block_info() {
            return Err(Error::InvalidCheckpoint("block info"));
        }
        Ok(())
    }
}

fn checkpoint_rng(tag: &[u8], seed: u64, extra: &[u8]) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(tag);
    hasher.update(seed.to_be_bytes());
    hasher.update(extra);
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

fn check_modules(fmodules: &[FunctionalModule], l: usize) -> Result<()> {
    if fmodules.len() != l {
        return Err(Error::ChainLengthMismatch {
            expected: l,
            actual: fmodules.len(),
        });
    }
    let mut seen = HashSet::new();
    for m in fmodules {
        if !seen.insert(m.id) {
            return Err(Error::DuplicateModule(m.id));
        }
    }
    Ok(())
}

/// Fills blocks from templates and seals the image with its commitment block.
fn assemble(
    keypair: &ChameleonKeyPair,
    templates: &[CryptoModule],
    contents: Vec<(Option<ModuleId>, Vec<u8>)>,
    version_id: String,
    kind: ImageKind,
    commitment: BigUint,
    proof: Option<BigUint>,
) -> Result<FirmwareImage> {
    let (commit_template, block_templates) = templates.split_last().expect("at least one template");
    let blocks = block_templates
        .iter()
        .zip(contents)
        .map(|(t, (id, content))| match id {
            None if content.len() == PADDING_LEN && content == t.pstr => Ok(FilledBlock::filler(t)),
            _ => FilledBlock::fill(keypair, t, id, content),
        })
        .collect::<Result<Vec<_>>>()?;
    let block_info = aggregate_block_info(&blocks);
    let nonces: Vec<u64> = blocks.iter().map(|b| b.solution_nonce).collect();
    let hashes: Vec<[u8; 32]> = blocks.iter().map(|b| content_hash(&b.content)).collect();
    let content = commit_content(
        keypair.public(),
        &version_id,
        kind,
        &block_info,
        &nonces,
        &hashes,
        &commitment,
        proof.as_ref(),
    );
    let commitment_block = FilledBlock::fill(keypair, commit_template, None, content)?;
    Ok(FirmwareImage {
        version_id,
        kind,
        blocks,
        commitment_block,
        block_info,
        commitment,
        proof,
    })
}

fn module_contents(fmodules: &[FunctionalModule]) -> Vec<(Option<ModuleId>, Vec<u8>)> {
    fmodules.iter().map(|m| (Some(m.id), m.encode())).collect()
}

/// Builds the first trusted image from `L + 1` pool templates and returns
/// it with its verification chain.
pub fn init_firmware(
    keypair: &ChameleonKeyPair,
    pool: &CryptoPool,
    fmodules: &[FunctionalModule],
    chain_length: usize,
    version_id: &str,
    seed: u64,
) -> Result<Checkpoint> {
    if !keypair.has_trapdoor() {
        return Err(Error::MissingTrapdoor);
    }
    check_modules(fmodules, chain_length)?;
    let templates = pool.claim(chain_length + 1)?;
    let mut rng = checkpoint_rng(b"imup-init", seed, version_id.as_bytes());
    let commitment = keypair.public().random_scalar(&mut rng);
    let image = assemble(
        keypair,
        &templates,
        module_contents(fmodules),
        version_id.to_string(),
        ImageKind::Functional,
        commitment,
        None,
    )?;
    let chain = image.chain();
    Ok(Checkpoint {
        image,
        chain,
        templates,
    })
}

/// Builds a security checkpoint on fresh templates and proves, with the
/// trapdoor, that `CH(prev block info, prev C) = CH(new block info, P)`.
pub fn security_update(
    keypair: &ChameleonKeyPair,
    prev: &Checkpoint,
    pool: &CryptoPool,
    fmodules: &[FunctionalModule],
    version_id: &str,
    seed: u64,
) -> Result<(Checkpoint, BigUint)> {
    if !keypair.has_trapdoor() {
        return Err(Error::MissingTrapdoor);
    }
    prev.check_consistent()?;
    let l = prev.chain_length();
    check_modules(fmodules, l)?;
    let templates = pool.claim(l + 1)?;
    let pk = keypair.public();

    let new_block_info: Vec<u8> = templates[..l]
        .iter()
        .flat_map(|t| t.digest.as_bytes().iter().copied())
        .collect();
    let proof = keypair.find_collision(
        &commitment_message(&prev.chain.block_info()),
        &prev.chain.commitment,
        &commitment_message(&new_block_info),
    )?;
    let mut rng = checkpoint_rng(b"imup-security", seed, version_id.as_bytes());
    let commitment = pk.random_scalar(&mut rng);
    let image = assemble(
        keypair,
        &templates,
        module_contents(fmodules),
        version_id.to_string(),
        ImageKind::Security,
        commitment,
        Some(proof.clone()),
    )?;
    let chain = image.chain();
    Ok((
        Checkpoint {
            image,
            chain,
            templates,
        },
        proof,
    ))
}

/// Per-variant commitment, derived from the checkpoint commitment and the
/// exact block contents.
fn variant_commitment(pk: &PublicKey, checkpoint: &Checkpoint, contents: &[(Option<ModuleId>, Vec<u8>)]) -> BigUint {
    let mut hasher = Sha256::new();
    hasher.update(b"imup-variant");
    hasher.update(pk.encode_scalar(&checkpoint.chain.commitment));
    for (id, content) in contents {
        hasher.update(id.unwrap_or(ModuleId::FILLER).0.to_be_bytes());
        hasher.update(Sha256::digest(content));
    }
    pk.reduce_hash(&hasher.finalize().into())
}

/// Builds a customized image whose digest sequence equals the checkpoint
/// chain. The request is closed over dependencies; remaining slots keep
/// their template padding.
pub fn iterate_version(
    keypair: &ChameleonKeyPair,
    checkpoint: &Checkpoint,
    catalog: &ModuleCatalog,
    requested: &BTreeSet<ModuleId>,
) -> Result<FirmwareImage> {
    if !keypair.has_trapdoor() {
        return Err(Error::MissingTrapdoor);
    }
    checkpoint.check_consistent()?;
    let l = checkpoint.chain_length();
    let closure = catalog.closure(requested.iter().copied())?;
    if closure.len() > l {
        return Err(Error::Oversize {
            needed: closure.len(),
            slots: l,
        });
    }
    let mut contents: Vec<(Option<ModuleId>, Vec<u8>)> = closure
        .iter()
        .map(|id| (Some(*id), catalog.get(*id).expect("closure ids exist").encode()))
        .collect();
    for t in &checkpoint.templates[contents.len()..l] {
        contents.push((None, t.pstr.to_vec()));
    }
    let pk = keypair.public();
    let commitment = variant_commitment(pk, checkpoint, &contents);
    let ids: Vec<String> = closure.iter().map(|id| id.0.to_string()).collect();
    let version_id = format!("{}+[{}]", checkpoint.id(), ids.join(","));
    assemble(
        keypair,
        &checkpoint.templates,
        contents,
        version_id,
        ImageKind::Functional,
        commitment,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::package::ModuleKind;

    struct Fixture {
        kp: ChameleonKeyPair,
        catalog: ModuleCatalog,
        pool: CryptoPool,
    }

    fn fixture(modules: usize, pool: usize) -> Fixture {
        let kp = ChameleonKeyPair::keygen(40, b"pipeline").unwrap();
        let mut catalog = ModuleCatalog::new();
        for i in 0..modules {
            catalog
                .package(
                    &format!("m{i}"),
                    ModuleKind::Binary,
                    vec![i as u8; 16 + i],
                    vec!["install".into()],
                    &[],
                )
                .unwrap();
        }
        let pool = CryptoPool::generate(kp.public(), pool, 1, 5).unwrap();
        Fixture { kp, catalog, pool }
    }

    fn first(f: &Fixture, n: usize) -> Vec<FunctionalModule> {
        f.catalog.modules().take(n).cloned().collect()
    }

    #[test]
    fn init_preserves_template_digests() {
        let f = fixture(2, 3);
        let templates = f.pool.snapshot();
        let ck = init_firmware(&f.kp, &f.pool, &first(&f, 2), 2, "v1", 1).unwrap();
        let expected: Vec<_> = templates.iter().map(|t| t.digest.clone()).collect();
        assert_eq!(ck.image.digests(), expected);
        for b in ck.image.blocks.iter().chain([&ck.image.commitment_block]) {
            assert!(b.verify(f.kp.public(), 1));
        }
    }

    #[test]
    fn permuted_modules_change_block_info_and_commitment_content() {
        let f = fixture(2, 6);
        let mods = first(&f, 2);
        let a = init_firmware(&f.kp, &f.pool, &mods, 2, "v1", 1).unwrap();
        let reversed: Vec<_> = mods.iter().rev().cloned().collect();
        // Same templates, opposite order, so the block info differs.
        let mut swapped_pool_modules = a.templates.clone();
        swapped_pool_modules.swap(0, 1);
        let pool = CryptoPool::new(1, swapped_pool_modules);
        let b = init_firmware(&f.kp, &pool, &reversed, 2, "v1", 1).unwrap();
        assert_ne!(a.image.block_info, b.image.block_info);
        assert_ne!(a.image.commitment_block.content, b.image.commitment_block.content);
        assert_eq!(a.image.commitment, b.image.commitment);
    }

    #[test]
    fn init_rejects_wrong_count_duplicates_and_exhaustion() {
        let f = fixture(3, 3);
        let mods = first(&f, 3);
        assert!(matches!(
            init_firmware(&f.kp, &f.pool, &mods[..1], 2, "v", 0),
            Err(Error::ChainLengthMismatch { expected: 2, actual: 1 })
        ));
        let dup = vec![mods[0].clone(), mods[0].clone()];
        assert!(matches!(
            init_firmware(&f.kp, &f.pool, &dup, 2, "v", 0),
            Err(Error::DuplicateModule(_))
        ));
        assert!(matches!(
            init_firmware(&f.kp, &f.pool, &mods, 3, "v", 0),
            Err(Error::PoolExhausted { .. })
        ));
    }

    #[test]
    fn aggregate_concatenates_in_order() {
        let f = fixture(3, 4);
        let ck = init_firmware(&f.kp, &f.pool, &first(&f, 3), 3, "v", 0).unwrap();
        let w = f.kp.public().digest_width();
        assert_eq!(
            aggregate_block_info(&ck.image.blocks[..1]),
            ck.image.blocks[0].digest.as_bytes()
        );
        assert_eq!(ck.image.block_info.len(), 3 * w);
        let mut swapped = ck.image.blocks.clone();
        swapped.swap(0, 1);
        assert_ne!(aggregate_block_info(&swapped), ck.image.block_info);
    }

    #[test]
    fn security_update_satisfies_commitment_equality() {
        let f = fixture(2, 9);
        let mods = first(&f, 2);
        let ck = init_firmware(&f.kp, &f.pool, &mods, 2, "v1", 1).unwrap();
        let (next, proof) = security_update(&f.kp, &ck, &f.pool, &mods, "v2", 2).unwrap();
        let pk = f.kp.public();
        let lhs = pk
            .chash(&commitment_message(&ck.chain.block_info()), &ck.chain.commitment)
            .unwrap();
        let rhs = pk.chash(&commitment_message(&next.image.block_info), &proof).unwrap();
        assert_eq!(lhs, rhs);
        assert_ne!(proof, ck.chain.commitment);
        assert_ne!(next.chain.commitment, ck.chain.commitment);
        assert_eq!(next.image.proof.as_ref(), Some(&proof));
    }

    #[test]
    fn iterate_version_keeps_digest_sequence_and_fills_slots() {
        let f = fixture(4, 4);
        let ck = init_firmware(&f.kp, &f.pool, &first(&f, 3), 3, "v1", 1).unwrap();
        let empty = iterate_version(&f.kp, &ck, &f.catalog, &BTreeSet::new()).unwrap();
        assert_eq!(empty.digests(), ck.chain.digests);
        assert!(empty.module_set().is_empty());
        for (b, t) in empty.blocks.iter().zip(&ck.templates) {
            assert_eq!(b.content, t.pstr);
        }
        let req: BTreeSet<_> = [ModuleId(3)].into();
        let one = iterate_version(&f.kp, &ck, &f.catalog, &req).unwrap();
        assert_eq!(one.module_set(), req);
        assert_ne!(one.commitment, empty.commitment);
        let too_many: BTreeSet<_> = (0..4).map(ModuleId).collect();
        assert!(matches!(
            iterate_version(&f.kp, &ck, &f.catalog, &too_many),
            Err(Error::Oversize { needed: 4, slots: 3 })
        ));
        assert!(matches!(
            iterate_version(&f.kp, &ck, &f.catalog, &[ModuleId(99)].into()),
            Err(Error::UnknownModule(ModuleId(99)))
        ));
    }

    #[test]
    fn public_only_key_cannot_build() {
        let f = fixture(2, 3);
        let public = ChameleonKeyPair::from_public(f.kp.public().clone());
        assert!(matches!(
            init_firmware(&public, &f.pool, &first(&f, 2), 2, "v", 0),
            Err(Error::MissingTrapdoor)
        ));
        assert_eq!(f.pool.remaining(), 3);
    }

    #[test]
    fn image_decode_inverts_encode() {
        let f = fixture(2, 3);
        let ck = init_firmware(&f.kp, &f.pool, &first(&f, 2), 2, "v1", 1).unwrap();
        let bytes = ck.image.encode(f.kp.public());
        assert_eq!(FirmwareImage::decode(&bytes, f.kp.public()).unwrap(), ck.image);
    }
}
