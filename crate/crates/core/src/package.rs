//! Functional-module packaging, the module catalog, and crypto-module
//! generation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use num_bigint::BigUint;
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use sha2::{Digest as _, Sha256};

use crate::chameleon::{ChameleonDigest, PublicKey};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::pow::{self, PowChallenge};

pub const MODULE_MAGIC: &[u8; 8] = b"IMUPMOD1";
pub const POOL_MAGIC: &[u8; 8] = b"IMUPPOL1";

/// Suffix appended to every block's content before chameleon hashing so
/// block digests never coincide with proof-of-work inputs.
pub const BLOCK_TAG: &[u8] = b"IMUP-BLOCK";

pub const PADDING_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModuleId(pub u32);

impl ModuleId {
    /// Marker for slots holding untouched padding.
    pub const FILLER: ModuleId = ModuleId(u32::MAX);
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    Script,
    Binary,
}

impl ModuleKind {
    fn to_byte(self) -> u8 {
        match self {
            ModuleKind::Script => 0,
            ModuleKind::Binary => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ModuleKind::Script),
            1 => Ok(ModuleKind::Binary),
            _ => Err(Error::Malformed("module kind")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub install_steps: Vec<String>,
    /// Sorted and deduplicated.
    pub dependencies: Vec<ModuleId>,
}

impl Manifest {
    fn to_text(&self) -> String {
        let mut out = String::new();
        for step in &self.install_steps {
            out.push_str("step:");
            out.push_str(step);
            out.push('\n');
        }
        for dep in &self.dependencies {
            out.push_str(&format!("dep:{}\n", dep.0));
        }
        out
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut manifest = Manifest::default();
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(Error::Malformed("manifest line not terminated"));
        }
        for line in text.split_terminator('\n') {
            if let Some(step) = line.strip_prefix("step:") {
                if !manifest.dependencies.is_empty() {
                    return Err(Error::Malformed("manifest step after dependency"));
                }
                manifest.install_steps.push(step.to_string());
            } else if let Some(dep) = line.strip_prefix("dep:") {
                if dep.is_empty() || (dep.len() > 1 && dep.starts_with('0')) {
                    return Err(Error::Malformed("manifest dependency id"));
                }
                let id = ModuleId(dep.parse().map_err(|_| Error::Malformed("manifest dependency id"))?);
                if manifest.dependencies.last().is_some_and(|last| *last >= id) {
                    return Err(Error::Malformed("manifest dependencies not sorted"));
                }
                manifest.dependencies.push(id);
            } else {
                return Err(Error::Malformed("manifest line"));
            }
        }
        Ok(manifest)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionalModule {
    pub id: ModuleId,
    pub name: String,
    pub kind: ModuleKind,
    pub payload: Vec<u8>,
    pub manifest: Manifest,
}

impl FunctionalModule {
    /// Module file bytes. This is also the block content shipped in images.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(MODULE_MAGIC)
            .u32(self.id.0)
            .u8(self.kind.to_byte())
            .lp(self.name.as_bytes())
            .lp(&self.payload)
            .lp(self.manifest.to_text().as_bytes());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODULE_MAGIC)?;
        let id = ModuleId(r.u32()?);
        if id == ModuleId::FILLER {
            return Err(Error::Malformed("reserved module id"));
        }
        let kind = ModuleKind::from_byte(r.u8()?)?;
        let name = String::from_utf8(r.lp()?.to_vec()).map_err(|_| Error::Malformed("module name"))?;
        let payload = r.lp()?.to_vec();
        let text = std::str::from_utf8(r.lp()?).map_err(|_| Error::Malformed("manifest text"))?;
        let manifest = Manifest::from_text(text)?;
        r.finish()?;
        Ok(Self {
            id,
            name,
            kind,
            payload,
            manifest,
        })
    }
}

/// Module id stored in the first bytes of an encoded module, if it looks like one.
pub(crate) fn peek_module_id(content: &[u8]) -> Option<ModuleId> {
    if content.len() >= 12 && &content[..8] == MODULE_MAGIC {
        Some(ModuleId(u32::from_be_bytes(content[8..12].try_into().unwrap())))
    } else {
        None
    }
}

/// `content || BLOCK_TAG`, the message hashed for every image block.
pub fn block_message(content: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(content.len() + BLOCK_TAG.len());
    m.extend_from_slice(content);
    m.extend_from_slice(BLOCK_TAG);
    m
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModuleCatalog {
    modules: BTreeMap<ModuleId, FunctionalModule>,
    /// Most popular first.
    popularity_rank: Vec<ModuleId>,
    next_id: u32,
}

impl ModuleCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new module under a fresh id, appended at the end of the
    /// popularity rank.
    pub fn package(
        &mut self,
        name: &str,
        kind: ModuleKind,
        payload: Vec<u8>,
        install_steps: Vec<String>,
        dependencies: &[ModuleId],
    ) -> Result<ModuleId> {
        let id = ModuleId(self.next_id);
        if self.modules.values().any(|m| m.name == name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        if install_steps.iter().any(|s| s.contains('\n')) {
            return Err(Error::InvalidParameter("install step contains a newline".into()));
        }
        let mut deps: Vec<ModuleId> = dependencies.to_vec();
        deps.sort();
        deps.dedup();
        for dep in &deps {
            if *dep == id {
                return Err(Error::CyclicDependency(id));
            }
            if !self.modules.contains_key(dep) {
                return Err(Error::UnknownModule(*dep));
            }
        }
        self.modules.insert(
            id,
            FunctionalModule {
                id,
                name: name.to_string(),
                kind,
                payload,
                manifest: Manifest {
                    install_steps,
                    dependencies: deps,
                },
            },
        );
        self.popularity_rank.push(id);
        self.next_id += 1;
        Ok(id)
    }

    /// Builds a catalog from existing modules, checking ids, names,
    /// dependencies and acyclicity. An empty rank defaults to id order.
    pub fn from_modules(modules: Vec<FunctionalModule>, rank: Vec<ModuleId>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut names = HashSet::new();
        for m in modules {
            if m.id == ModuleId::FILLER {
                return Err(Error::InvalidParameter("reserved module id".into()));
            }
            if !names.insert(m.name.clone()) {
                return Err(Error::DuplicateName(m.name));
            }
            let id = m.id;
            if map.insert(id, m).is_some() {
                return Err(Error::DuplicateModuleId(id));
            }
        }
        let next_id = map.keys().next_back().map_or(0, |id: &ModuleId| id.0 + 1);
        let catalog = Self {
            popularity_rank: if rank.is_empty() {
                map.keys().copied().collect()
            } else {
                rank
            },
            modules: map,
            next_id,
        };
        catalog.check_rank()?;
        catalog.check_graph()?;
        Ok(catalog)
    }

    fn check_rank(&self) -> Result<()> {
        let set: BTreeSet<_> = self.popularity_rank.iter().copied().collect();
        if set.len() != self.popularity_rank.len() || !set.iter().eq(self.modules.keys()) {
            return Err(Error::InvalidRank);
        }
        Ok(())
    }

    fn check_graph(&self) -> Result<()> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Fresh,
            Active,
            Done,
        }
        let mut marks: BTreeMap<ModuleId, Mark> = self.modules.keys().map(|k| (*k, Mark::Fresh)).collect();
        for &root in self.modules.keys() {
            if marks[&root] != Mark::Fresh {
                continue;
            }
            // Iterative DFS: (node, next dependency index).
            let mut stack = vec![(root, 0usize)];
            marks.insert(root, Mark::Active);
            while let Some((node, idx)) = stack.pop() {
                let deps = &self.modules[&node].manifest.dependencies;
                if idx < deps.len() {
                    stack.push((node, idx + 1));
                    let dep = deps[idx];
                    match marks.get(&dep) {
                        None => return Err(Error::UnknownModule(dep)),
                        Some(Mark::Active) => return Err(Error::CyclicDependency(dep)),
                        Some(Mark::Done) => {}
                        Some(Mark::Fresh) => {
                            marks.insert(dep, Mark::Active);
                            stack.push((dep, 0));
                        }
                    }
                } else {
                    marks.insert(node, Mark::Done);
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ModuleId) -> Option<&FunctionalModule> {
        self.modules.get(&id)
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn modules(&self) -> impl Iterator<Item = &FunctionalModule> {
        self.modules.values()
    }

    pub fn popularity_rank(&self) -> &[ModuleId] {
        &self.popularity_rank
    }

    pub fn set_popularity_rank(&mut self, rank: Vec<ModuleId>) -> Result<()> {
        let old = std::mem::replace(&mut self.popularity_rank, rank);
        if let Err(e) = self.check_rank() {
            self.popularity_rank = old;
            return Err(e);
        }
        Ok(())
    }

    /// The requested modules plus everything they transitively depend on.
    pub fn closure(&self, ids: impl IntoIterator<Item = ModuleId>) -> Result<BTreeSet<ModuleId>> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<ModuleId> = ids.into_iter().collect();
        while let Some(id) = stack.pop() {
            let module = self.modules.get(&id).ok_or(Error::UnknownModule(id))?;
            if out.insert(id) {
                stack.extend(module.manifest.dependencies.iter().copied());
            }
        }
        Ok(out)
    }

    /// Swaps in a new payload for an existing module (a maintenance patch).
    pub fn update_payload(&mut self, id: ModuleId, payload: Vec<u8>) -> Result<()> {
        let module = self.modules.get_mut(&id).ok_or(Error::UnknownModule(id))?;
        module.payload = payload;
        Ok(())
    }

    /// Writes one `<id>.mod` file per module plus a `popularity` file.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for m in self.modules.values() {
            fs::write(dir.join(format!("{}.mod", m.id.0)), m.encode())?;
        }
        let rank: String = self.popularity_rank.iter().map(|id| format!("{}\n", id.0)).collect();
        fs::write(dir.join("popularity"), rank)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut modules = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "mod") {
                modules.push(FunctionalModule::decode(&fs::read(&path)?)?);
            }
        }
        let rank_path = dir.join("popularity");
        let rank = if rank_path.exists() {
            fs::read_to_string(rank_path)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.trim().parse().map(ModuleId).map_err(|_| Error::InvalidRank))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Self::from_modules(modules, rank)
    }
}

/// Pre-generated template block: random padding, collision parameter,
/// proof-of-work nonce over the digest, and the digest itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CryptoModule {
    pub pstr: [u8; PADDING_LEN],
    pub pparam: BigUint,
    pub solution_nonce: u64,
    pub digest: ChameleonDigest,
    pub difficulty: u8,
}

impl CryptoModule {
    /// Both embedded checks, using only public verifiers.
    pub fn verify(&self, pk: &PublicKey) -> bool {
        pk.verify_pair(&block_message(&self.pstr), &self.pparam, &self.digest)
            && pow::check_nonce(pk, self.digest.as_bytes(), self.difficulty, self.solution_nonce)
    }

    /// `pstr || pparam || solution_nonce || digest`.
    pub fn encode_record(&self, pk: &PublicKey) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.pstr)
            .scalar(&self.pparam, pk.scalar_width())
            .u64(self.solution_nonce)
            .raw(self.digest.as_bytes());
        w.finish()
    }

    pub(crate) fn read_record(r: &mut Reader<'_>, pk: &PublicKey, difficulty: u8) -> Result<Self> {
        let pstr: [u8; PADDING_LEN] = r.take(PADDING_LEN)?.try_into().unwrap();
        let pparam = r.scalar(pk.scalar_width())?;
        let solution_nonce = r.u64()?;
        let digest = pk.decode_digest(r.take(pk.digest_width())?)?;
        Ok(Self {
            pstr,
            pparam,
            solution_nonce,
            digest,
            difficulty,
        })
    }

    pub fn decode_record(bytes: &[u8], pk: &PublicKey, difficulty: u8) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let m = Self::read_record(&mut r, pk, difficulty)?;
        r.finish()?;
        Ok(m)
    }
}

/// Generates one template: padding, digest, and proof of work on the digest.
pub fn gen_crypto_module(pk: &PublicKey, difficulty: u8, rng: &mut impl RngCore) -> Result<CryptoModule> {
    let mut pstr = [0u8; PADDING_LEN];
    rng.fill_bytes(&mut pstr);
    let pparam = pk.random_scalar(rng);
    let digest = pk.chash(&block_message(&pstr), &pparam)?;
    let challenge = PowChallenge::new(pk, digest.as_bytes().to_vec(), difficulty)?;
    let solution = pow::solve(pk, &challenge)?;
    Ok(CryptoModule {
        pstr,
        pparam,
        solution_nonce: solution.nonce,
        digest,
        difficulty,
    })
}

/// Generates `count` templates deterministically under `seed`, sorted by
/// padding string.
pub fn gen_crypto_modules(pk: &PublicKey, count: usize, difficulty: u8, seed: u64) -> Result<Vec<CryptoModule>> {
    if count == 0 {
        return Err(Error::EmptyRequest);
    }
    pow::check_difficulty(pk, difficulty)?;
    let mut modules = (0..count)
        .into_par_iter()
        .map(|i| gen_crypto_module(pk, difficulty, &mut module_rng(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    modules.sort_by_key(|m| m.pstr);
    Ok(modules)
}

fn module_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"imup-cmodule");
    hasher.update(seed.to_be_bytes());
    hasher.update(index.to_be_bytes());
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

/// Shared template pool. Each claim removes modules so no template ends up
/// in two images.
#[derive(Debug)]
pub struct CryptoPool {
    difficulty: u8,
    modules: Mutex<Vec<CryptoModule>>,
}

impl CryptoPool {
    pub fn new(difficulty: u8, modules: Vec<CryptoModule>) -> Self {
        Self {
            difficulty,
            modules: Mutex::new(modules),
        }
    }

    pub fn generate(pk: &PublicKey, count: usize, difficulty: u8, seed: u64) -> Result<Self> {
        Ok(Self::new(difficulty, gen_crypto_modules(pk, count, difficulty, seed)?))
    }

    pub fn difficulty(&self) -> u8 {
        self.difficulty
    }

    pub fn remaining(&self) -> usize {
        self.modules.lock().len()
    }

    /// Takes `n` modules from the front of the pool, or none at all.
    pub fn claim(&self, n: usize) -> Result<Vec<CryptoModule>> {
        let mut modules = self.modules.lock();
        if modules.len() < n {
            return Err(Error::PoolExhausted {
                needed: n,
                available: modules.len(),
            });
        }
        Ok(modules.drain(..n).collect())
    }

    pub fn snapshot(&self) -> Vec<CryptoModule> {
        self.modules.lock().clone()
    }

    /// `IMUPPOL1 || difficulty || count || records`.
    pub fn encode(&self, pk: &PublicKey) -> Vec<u8> {
        let modules = self.modules.lock();
        let mut w = Writer::new();
        w.magic(POOL_MAGIC).u8(self.difficulty).u32(modules.len() as u32);
        for m in modules.iter() {
            w.raw(&m.encode_record(pk));
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8], pk: &PublicKey) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(POOL_MAGIC)?;
        let difficulty = r.u8()?;
        pow::check_difficulty(pk, difficulty)?;
        let count = r.u32()? as usize;
        let record_len = PADDING_LEN + pk.scalar_width() + 8 + pk.digest_width();
        if count.saturating_mul(record_len) > bytes.len() {
            return Err(Error::Malformed("pool count exceeds input"));
        }
        let modules = (0..count)
            .map(|_| CryptoModule::read_record(&mut r, pk, difficulty))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self::new(difficulty, modules))
    }
}
