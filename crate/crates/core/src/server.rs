//! Distribution server: answers customization requests from a cache of
//! variants built on the active checkpoint, building on a miss.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::chameleon::ChameleonKeyPair;
use crate::error::{Error, Result};
use crate::package::{CryptoPool, FunctionalModule, ModuleCatalog, ModuleId};
use crate::pipeline::{init_firmware, iterate_version, security_update, Checkpoint, FirmwareImage};

pub mod wire;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub chain_length: usize,
    pub store_dir: PathBuf,
    /// Prune images of retired checkpoints (least recently served first)
    /// once storage exceeds this many bytes.
    pub max_storage: Option<u64>,
    /// Pad each built image with popular modules so later requests can reuse it.
    pub fill_popular: bool,
    pub seed: u64,
}

impl ServerConfig {
    pub fn new(chain_length: usize, store_dir: impl Into<PathBuf>) -> Self {
        Self {
            chain_length,
            store_dir: store_dir.into(),
            max_storage: None,
            fill_popular: true,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct CachedImage {
    pub image_id: String,
    pub module_set: BTreeSet<ModuleId>,
    pub checkpoint_id: String,
    pub size_bytes: u64,
    pub path: PathBuf,
    last_used: AtomicU64,
}

impl CachedImage {
    pub fn read_bytes(&self) -> Result<Vec<u8>> {
        Ok(fs::read(&self.path)?)
    }
}

/// Cached images grouped by checkpoint, then by module-set size.
#[derive(Default)]
pub struct ImageCache {
    entries: BTreeMap<String, Arc<CachedImage>>,
    by_checkpoint: HashMap<String, BTreeMap<usize, Vec<Arc<CachedImage>>>>,
    storage_bytes: u64,
}

impl ImageCache {
    /// Smallest cached superset of `wanted` under `checkpoint_id`, ties broken
    /// by the smaller image id.
    pub fn find_superset(&self, checkpoint_id: &str, wanted: &BTreeSet<ModuleId>) -> Option<Arc<CachedImage>> {
        let buckets = self.by_checkpoint.get(checkpoint_id)?;
        for (_, bucket) in buckets.range(wanted.len()..) {
            let best = bucket
                .iter()
                .filter(|e| wanted.is_subset(&e.module_set))
                .min_by(|a, b| a.image_id.cmp(&b.image_id));
            if best.is_some() {
                return best.cloned();
            }
        }
        None
    }

    fn insert(&mut self, entry: Arc<CachedImage>) {
        self.storage_bytes += entry.size_bytes;
        self.by_checkpoint
            .entry(entry.checkpoint_id.clone())
            .or_default()
            .entry(entry.module_set.len())
            .or_default()
            .push(entry.clone());
        self.entries.insert(entry.image_id.clone(), entry);
    }

    fn remove(&mut self, image_id: &str) -> Option<Arc<CachedImage>> {
        let entry = self.entries.remove(image_id)?;
        self.storage_bytes -= entry.size_bytes;
        if let Some(buckets) = self.by_checkpoint.get_mut(&entry.checkpoint_id) {
            if let Some(bucket) = buckets.get_mut(&entry.module_set.len()) {
                bucket.retain(|e| e.image_id != image_id);
            }
        }
        Some(entry)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn storage_bytes(&self) -> u64 {
        self.storage_bytes
    }

    pub fn entries(&self) -> impl Iterator<Item = &Arc<CachedImage>> {
        self.entries.values()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ServerMetrics {
    pub total_time_s: f64,
    pub hit_rate_pct: f64,
    pub firmware_count: u64,
    pub storage_bytes: u64,
    pub preparation_time_s: f64,
    pub first_processing_time_s: f64,
    pub subsequent_processing_time_s: f64,
    pub avg_search_time_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub requests: u64,
    pub hits: u64,
    pub builds: u64,
    pub rejected: u64,
}

#[derive(Default)]
struct Timings {
    preparation: Duration,
    init: Duration,
    handling: Duration,
    build: Duration,
    search: Duration,
}

type BuildCell = Arc<OnceLock<std::result::Result<Arc<CachedImage>, String>>>;

pub struct Server {
    keypair: ChameleonKeyPair,
    pool: CryptoPool,
    config: ServerConfig,
    catalog: RwLock<ModuleCatalog>,
    active: RwLock<Arc<Checkpoint>>,
    checkpoints: Mutex<Vec<String>>,
    cache: RwLock<ImageCache>,
    inflight: Mutex<HashMap<(String, BTreeSet<ModuleId>), BuildCell>>,
    counters: Mutex<Counters>,
    timings: Mutex<Timings>,
    next_image: AtomicU64,
    clock: AtomicU64,
}

#[derive(Clone, Debug)]
pub struct Served {
    pub image: Arc<CachedImage>,
    pub hit: bool,
}

fn top_modules(catalog: &ModuleCatalog, n: usize) -> Result<Vec<FunctionalModule>> {
    if catalog.len() < n {
        return Err(Error::ChainLengthMismatch {
            expected: n,
            actual: catalog.len(),
        });
    }
    Ok(catalog
        .popularity_rank()
        .iter()
        .take(n)
        .map(|id| catalog.get(*id).expect("rank covers the catalog").clone())
        .collect())
}

impl Server {
    /// Builds the initial checkpoint from the `L` most popular modules.
    pub fn new(
        keypair: ChameleonKeyPair,
        catalog: ModuleCatalog,
        pool: CryptoPool,
        config: ServerConfig,
    ) -> Result<Self> {
        if config.chain_length == 0 {
            return Err(Error::InvalidParameter("chain length must be positive".into()));
        }
        fs::create_dir_all(&config.store_dir)?;
        let start = Instant::now();
        let fmodules = top_modules(&catalog, config.chain_length)?;
        let ck = init_firmware(&keypair, &pool, &fmodules, config.chain_length, "ckpt-0", config.seed)?;
        let init = start.elapsed();
        Ok(Self {
            keypair,
            pool,
            catalog: RwLock::new(catalog),
            checkpoints: Mutex::new(vec![ck.id().to_string()]),
            active: RwLock::new(Arc::new(ck)),
            cache: RwLock::new(ImageCache::default()),
            inflight: Mutex::new(HashMap::new()),
            counters: Mutex::new(Counters::default()),
            timings: Mutex::new(Timings {
                init,
                ..Timings::default()
            }),
            next_image: AtomicU64::new(0),
            clock: AtomicU64::new(0),
            config,
        })
    }

    /// Records how long crypto module generation took before construction.
    pub fn set_preparation_time(&self, d: Duration) {
        self.timings.lock().preparation = d;
    }

    pub fn keypair(&self) -> &ChameleonKeyPair {
        &self.keypair
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Arc<Checkpoint> {
        self.active.read().clone()
    }

    pub fn checkpoint_ids(&self) -> Vec<String> {
        self.checkpoints.lock().clone()
    }

    pub fn catalog(&self) -> parking_lot::RwLockReadGuard<'_, ModuleCatalog> {
        self.catalog.read()
    }

    pub fn cache(&self) -> parking_lot::RwLockReadGuard<'_, ImageCache> {
        self.cache.read()
    }

    pub fn counters(&self) -> Counters {
        *self.counters.lock()
    }

    pub fn pool_remaining(&self) -> usize {
        self.pool.remaining()
    }

    /// Serves an image containing the closure of `requested`, reusing a
    /// cached superset from the active checkpoint when one exists.
    pub fn handle_request(&self, requested: &BTreeSet<ModuleId>) -> Result<Served> {
        let start = Instant::now();
        let result = self.serve(requested);
        let elapsed = start.elapsed();
        let mut c = self.counters.lock();
        match &result {
            Ok((served, built)) => {
                c.requests += 1;
                if *built {
                    c.builds += 1;
                } else {
                    c.hits += 1;
                }
                drop(c);
                self.timings.lock().handling += elapsed;
                served
                    .image
                    .last_used
                    .store(self.clock.fetch_add(1, Ordering::Relaxed), Ordering::Relaxed);
            }
            Err(_) => c.rejected += 1,
        }
        result.map(|(served, _)| served)
    }

    /// Returns the served image and whether this call performed the build.
    fn serve(&self, requested: &BTreeSet<ModuleId>) -> Result<(Served, bool)> {
        let l = self.config.chain_length;
        let ck = self.checkpoint();
        let catalog = self.catalog.read();
        let closure = catalog.closure(requested.iter().copied())?;
        if closure.len() > l {
            return Err(Error::Oversize {
                needed: closure.len(),
                slots: l,
            });
        }

        let search = Instant::now();
        let found = self.cache.read().find_superset(ck.id(), &closure);
        self.timings.lock().search += search.elapsed();
        if let Some(image) = found {
            return Ok((Served { image, hit: true }, false));
        }

        let target = if self.config.fill_popular {
            fill_popular(&catalog, closure.clone(), l)?
        } else {
            closure.clone()
        };
        let key = (ck.id().to_string(), target.clone());
        let cell = {
            let mut inflight = self.inflight.lock();
            if let Some(image) = self.cache.read().find_superset(ck.id(), &closure) {
                return Ok((Served { image, hit: true }, false));
            }
            inflight.entry(key.clone()).or_default().clone()
        };
        let mut built = false;
        let outcome = cell.get_or_init(|| {
            built = true;
            let r = self.build(&ck, &catalog, &target).map_err(|e| e.to_string());
            self.inflight.lock().remove(&key);
            r
        });
        match outcome {
            Ok(image) => Ok((
                Served {
                    image: image.clone(),
                    hit: !built,
                },
                built,
            )),
            Err(msg) => Err(Error::BuildFailed(msg.clone())),
        }
    }

    fn build(&self, ck: &Checkpoint, catalog: &ModuleCatalog, target: &BTreeSet<ModuleId>) -> Result<Arc<CachedImage>> {
        let start = Instant::now();
        let image = iterate_version(&self.keypair, ck, catalog, target)?;
        let bytes = image.encode(self.keypair.public());
        let image_id = format!("img-{:08}", self.next_image.fetch_add(1, Ordering::Relaxed));
        let path = self.config.store_dir.join(format!("{image_id}.img"));
        fs::write(&path, &bytes)?;
        let entry = Arc::new(CachedImage {
            image_id,
            module_set: image.module_set(),
            checkpoint_id: ck.id().to_string(),
            size_bytes: bytes.len() as u64,
            path,
            last_used: AtomicU64::new(self.clock.fetch_add(1, Ordering::Relaxed)),
        });
        self.cache.write().insert(entry.clone());
        self.timings.lock().build += start.elapsed();
        self.prune()?;
        Ok(entry)
    }

    /// Drops images of retired checkpoints, least recently served first,
    /// until storage fits the configured budget.
    fn prune(&self) -> Result<()> {
        let Some(max) = self.config.max_storage else {
            return Ok(());
        };
        let active = self.checkpoint().id().to_string();
        let mut cache = self.cache.write();
        if cache.storage_bytes <= max {
            return Ok(());
        }
        let mut retired: Vec<_> = cache
            .entries
            .values()
            .filter(|e| e.checkpoint_id != active)
            .map(|e| (e.last_used.load(Ordering::Relaxed), e.image_id.clone()))
            .collect();
        retired.sort();
        for (_, id) in retired {
            if cache.storage_bytes <= max {
                break;
            }
            if let Some(e) = cache.remove(&id) {
                fs::remove_file(&e.path)?;
            }
        }
        Ok(())
    }

    /// Applies payload updates and moves to a new security checkpoint built
    /// from the `L` most popular modules. Older variants stop matching.
    pub fn checkpoint_rollover(&self, updates: &[(ModuleId, Vec<u8>)]) -> Result<Arc<Checkpoint>> {
        let mut catalog = self.catalog.write();
        let mut staged = catalog.clone();
        for (id, payload) in updates {
            staged.update_payload(*id, payload.clone())?;
        }
        let prev = self.checkpoint();
        let fmodules = top_modules(&staged, self.config.chain_length)?;
        let n = self.checkpoints.lock().len();
        let id = format!("ckpt-{n}");
        let (next, _) = security_update(
            &self.keypair,
            &prev,
            &self.pool,
            &fmodules,
            &id,
            self.config.seed.wrapping_add(n as u64),
        )?;
        let next = Arc::new(next);
        *catalog = staged;
        *self.active.write() = next.clone();
        self.checkpoints.lock().push(id);
        drop(catalog);
        self.prune()?;
        Ok(next)
    }

    pub fn metrics(&self) -> ServerMetrics {
        let c = self.counters();
        let t = self.timings.lock();
        let storage = self.cache.read().storage_bytes;
        let secs = |d: Duration| d.as_secs_f64();
        ServerMetrics {
            total_time_s: secs(t.preparation + t.init + t.handling),
            hit_rate_pct: if c.requests == 0 {
                0.0
            } else {
                100.0 * c.hits as f64 / c.requests as f64
            },
            firmware_count: c.builds,
            storage_bytes: storage,
            preparation_time_s: secs(t.preparation),
            first_processing_time_s: secs(t.preparation + t.init),
            subsequent_processing_time_s: if c.builds == 0 {
                0.0
            } else {
                secs(t.build) / c.builds as f64
            },
            avg_search_time_ms: if c.requests == 0 {
                0.0
            } else {
                1e3 * secs(t.search) / c.requests as f64
            },
        }
    }

    /// Encoded image of the active checkpoint.
    pub fn checkpoint_image(&self) -> Vec<u8> {
        self.checkpoint().image.encode(self.keypair.public())
    }

    pub fn load_image(&self, served: &Served) -> Result<FirmwareImage> {
        FirmwareImage::decode(&served.image.read_bytes()?, self.keypair.public())
    }
}

/// Extends `set` with the most popular modules whose closure still fits.
pub fn fill_popular(catalog: &ModuleCatalog, mut set: BTreeSet<ModuleId>, slots: usize) -> Result<BTreeSet<ModuleId>> {
    for &id in catalog.popularity_rank() {
        if set.len() >= slots {
            break;
        }
        if set.contains(&id) {
            continue;
        }
        let mut candidate = set.clone();
        candidate.extend(catalog.closure([id])?);
        if candidate.len() <= slots {
            set = candidate;
        }
    }
    Ok(set)
}

/// Sum of file sizes under `dir`, for checking the storage counter.
pub fn dir_bytes(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for entry in fs::read_dir(dir)? {
        let meta = entry?.metadata()?;
        if meta.is_file() {
            total += meta.len();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceState;
    use crate::package::ModuleKind;

    fn server(modules: usize, l: usize, fill: bool) -> (Server, tempfile::TempDir) {
        let kp = ChameleonKeyPair::keygen(40, b"server").unwrap();
        let mut catalog = ModuleCatalog::new();
        for i in 0..modules {
            catalog
                .package(&format!("m{i}"), ModuleKind::Binary, vec![i as u8; 24], vec![], &[])
                .unwrap();
        }
        let pool = CryptoPool::generate(kp.public(), 4 * (l + 1), 1, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ServerConfig::new(l, dir.path());
        cfg.fill_popular = fill;
        (Server::new(kp, catalog, pool, cfg).unwrap(), dir)
    }

    fn set(ids: &[u32]) -> BTreeSet<ModuleId> {
        ids.iter().copied().map(ModuleId).collect()
    }

    #[test]
    fn cold_then_repeat_then_subset() {
        let (s, _dir) = server(10, 4, false);
        assert_eq!(s.metrics().hit_rate_pct, 0.0);
        assert!(!s.handle_request(&set(&[1, 2, 3])).unwrap().hit);
        assert!(s.handle_request(&set(&[1, 2, 3])).unwrap().hit);
        assert!(s.handle_request(&set(&[1, 3])).unwrap().hit);
        assert!(!s.handle_request(&set(&[1, 4])).unwrap().hit);
        let c = s.counters();
        assert_eq!((c.requests, c.hits, c.builds), (4, 2, 2));
    }

    #[test]
    fn superset_choice_is_smallest_set() {
        let (s, _dir) = server(10, 4, false);
        s.handle_request(&set(&[1, 2, 3, 4])).unwrap();
        let small = s.handle_request(&set(&[1, 2, 5])).unwrap();
        assert!(!small.hit);
        assert_eq!(
            s.handle_request(&set(&[1, 2])).unwrap().image.image_id,
            small.image.image_id
        );
    }

    #[test]
    fn oversize_and_unknown_are_rejected_without_counting() {
        let (s, _dir) = server(10, 2, false);
        assert!(matches!(
            s.handle_request(&set(&[1, 2, 3])),
            Err(Error::Oversize { .. })
        ));
        assert!(matches!(s.handle_request(&set(&[77])), Err(Error::UnknownModule(_))));
        assert_eq!(s.counters().requests, 0);
        assert_eq!(s.counters().rejected, 2);
    }

    #[test]
    fn rollover_partitions_cache_and_rotates_devices() {
        let (s, dir) = server(8, 3, true);
        let device = DeviceState::new(s.keypair().public().clone(), 1)
            .factory_init(s.checkpoint().chain.clone())
            .unwrap();
        let first = s.handle_request(&set(&[5])).unwrap();
        assert!(device.functional_verify(&s.load_image(&first).unwrap()));
        s.checkpoint_rollover(&[(ModuleId(0), b"patched".to_vec())]).unwrap();
        assert!(!s.handle_request(&set(&[5])).unwrap().hit);
        let rotated = device.security_verify(&s.checkpoint().image).unwrap();
        let again = s.handle_request(&set(&[5])).unwrap();
        assert!(rotated.functional_verify(&s.load_image(&again).unwrap()));
        s.checkpoint_rollover(&[]).unwrap();
        assert_eq!(s.checkpoint_ids(), vec!["ckpt-0", "ckpt-1", "ckpt-2"]);
        assert_eq!(s.metrics().storage_bytes, dir_bytes(dir.path()).unwrap());
    }

    #[test]
    fn pruning_only_touches_retired_checkpoints() {
        let (s, dir) = server(8, 3, false);
        s.handle_request(&set(&[1])).unwrap();
        s.handle_request(&set(&[2])).unwrap();
        let before = s.cache().storage_bytes();
        let mut cfg = s.config().clone();
        cfg.max_storage = Some(1);
        let s = Server { config: cfg, ..s };
        s.prune().unwrap();
        assert_eq!(s.cache().storage_bytes(), before);
        s.checkpoint_rollover(&[]).unwrap();
        assert_eq!(s.cache().storage_bytes(), 0);
        assert_eq!(dir_bytes(dir.path()).unwrap(), 0);
    }

    #[test]
    fn fill_prefers_popular_modules_that_fit() {
        let mut catalog = ModuleCatalog::new();
        let a = catalog.package("a", ModuleKind::Binary, vec![], vec![], &[]).unwrap();
        let b = catalog.package("b", ModuleKind::Binary, vec![], vec![], &[a]).unwrap();
        let c = catalog.package("c", ModuleKind::Binary, vec![], vec![], &[]).unwrap();
        catalog.set_popularity_rank(vec![b, c, a]).unwrap();
        let filled = fill_popular(&catalog, [c].into(), 2).unwrap();
        assert_eq!(filled, [a, c].into());
        let filled = fill_popular(&catalog, BTreeSet::new(), 2).unwrap();
        assert_eq!(filled, [a, b].into());
    }
}
