#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use imup::{ChameleonKeyPair, Checkpoint, CryptoPool, FunctionalModule, ModuleCatalog, ModuleId, ModuleKind};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// 60-bit key shared by the pre-solved pools.
pub fn fixture_key() -> ChameleonKeyPair {
    let bytes = std::fs::read(fixture_dir().join("key.bin")).unwrap();
    ChameleonKeyPair::decode(&bytes).unwrap()
}

/// Two crypto modules solved at difficulty `d` (d in {0, 5, 6, 7, 8}).
pub fn fixture_pool(kp: &ChameleonKeyPair, d: u8) -> CryptoPool {
    let bytes = std::fs::read(fixture_dir().join(format!("pool-d{d}.bin"))).unwrap();
    CryptoPool::decode(&bytes, kp.public()).unwrap()
}

/// Small catalog: `n` modules, module `i` (i >= 2, even) depends on `i - 1`.
pub fn catalog(n: usize) -> ModuleCatalog {
    let mut c = ModuleCatalog::new();
    for i in 0..n {
        let deps = if i >= 2 && i % 2 == 0 {
            vec![ModuleId(i as u32 - 1)]
        } else {
            vec![]
        };
        let kind = if i % 3 == 0 {
            ModuleKind::Script
        } else {
            ModuleKind::Binary
        };
        c.package(
            &format!("mod-{i}"),
            kind,
            format!("payload of module {i}").into_bytes(),
            vec![format!("install {i}")],
            &deps,
        )
        .unwrap();
    }
    c
}

pub struct Setup {
    pub kp: ChameleonKeyPair,
    pub catalog: ModuleCatalog,
    pub pool: CryptoPool,
    pub checkpoint: Checkpoint,
    pub difficulty: u8,
}

/// Key, catalog, a pool with room for `spare_checkpoints` more checkpoints,
/// and an initial checkpoint of length `l`.
pub fn setup(bits: u32, l: usize, d: u8, modules: usize, spare_checkpoints: usize) -> Setup {
    let kp = ChameleonKeyPair::keygen(bits, format!("test-{bits}-{l}-{d}").as_bytes()).unwrap();
    let catalog = catalog(modules);
    let pool = CryptoPool::generate(kp.public(), (l + 1) * (spare_checkpoints + 1), d, 11).unwrap();
    let fmodules: Vec<FunctionalModule> = catalog.modules().take(l).cloned().collect();
    let checkpoint = imup::pipeline::init_firmware(&kp, &pool, &fmodules, l, "ckpt-0", 5).unwrap();
    Setup {
        kp,
        catalog,
        pool,
        checkpoint,
        difficulty: d,
    }
}

pub fn ids(v: &[u32]) -> BTreeSet<ModuleId> {
    v.iter().copied().map(ModuleId).collect()
}
