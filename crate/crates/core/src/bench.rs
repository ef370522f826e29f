//! Desk-scale experiments: Zipf request workloads against the server, and
//! a brute-force attacker recovering partially exposed trapdoor bits.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::path::Path;
use std::time::Instant;

use num_bigint::BigUint;
use num_traits::Zero;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use crate::chameleon::{collision_with, ChameleonKeyPair};
use crate::device::DeviceState;
use crate::error::{Error, Result};
use crate::package::{block_message, CryptoModule, CryptoPool, FunctionalModule, ModuleCatalog, ModuleId, ModuleKind};
use crate::pipeline::{commit_content, content_hash, init_firmware, security_update, Checkpoint, FirmwareImage};
use crate::server::{Server, ServerConfig, ServerMetrics};

/// Environment variable capping the worker threads used for module generation.
pub const THREADS_ENV: &str = "IMUP_THREADS";

/// Largest number of unknown trapdoor bits searched empirically.
pub const EMPIRICAL_CAP_BITS: u32 = 24;

/// Chain length of the image the attacker targets.
pub const ATTACK_CHAIN_LENGTH: usize = 1;

/// Installs a global worker pool sized by `IMUP_THREADS`, if set. Safe to
/// call more than once.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    if n == 0 {
        return Err(Error::InvalidParameter(format!("{THREADS_ENV} must be positive")));
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

fn seeded(tag: &[u8], seed: u64, extra: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(seed.to_be_bytes());
    h.update(extra.to_be_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub num_modules: usize,
    pub num_requests: usize,
    pub zipf_exponent: f64,
    pub min_per_request: usize,
    pub max_per_request: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(num_modules: usize, num_requests: usize, seed: u64) -> Self {
        Self {
            num_modules,
            num_requests,
            zipf_exponent: 1.0,
            min_per_request: 1,
            max_per_request: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::InvalidParameter("zipf exponent must be positive".into()));
        }
        if self.min_per_request == 0 || self.min_per_request > self.max_per_request {
            return Err(Error::InvalidParameter(
                "modules per request must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.num_modules < self.max_per_request {
            return Err(Error::InvalidParameter(
                "catalog smaller than the largest request".into(),
            ));
        }
        Ok(())
    }
}

/// Requests drawn with module probability proportional to `rank^-s`.
/// Duplicate draws inside one request collapse.
pub fn gen_workload(spec: &WorkloadSpec, rank: &[ModuleId]) -> Result<Vec<BTreeSet<ModuleId>>> {
    spec.validate()?;
    if rank.len() < spec.num_modules {
        return Err(Error::InvalidParameter(
            "popularity rank shorter than the module count".into(),
        ));
    }
    let weights: Vec<f64> = (1..=spec.num_modules)
        .map(|r| (r as f64).powf(-spec.zipf_exponent))
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = seeded(b"imup-workload", spec.seed, 0);
    Ok((0..spec.num_requests)
        .map(|_| {
            let k = rng.random_range(spec.min_per_request..=spec.max_per_request);
            (0..k).map(|_| rank[dist.sample(&mut rng)]).collect()
        })
        .collect())
}

/// Random catalog whose popularity follows id order. A few modules depend
/// on a more popular one.
pub fn synthetic_catalog(num_modules: usize, seed: u64) -> Result<ModuleCatalog> {
    let mut rng = seeded(b"imup-catalog", seed, 0);
    let mut catalog = ModuleCatalog::new();
    for i in 0..num_modules {
        let mut payload = vec![0u8; rng.random_range(64..=512)];
        rng.fill_bytes(&mut payload);
        let kind = if rng.random_bool(0.3) {
            ModuleKind::Script
        } else {
            ModuleKind::Binary
        };
        let deps = if i > 0 && rng.random_bool(0.08) {
            vec![ModuleId(rng.random_range(0..i as u32))]
        } else {
            Vec::new()
        };
        catalog.package(
            &format!("module-{i:04}"),
            kind,
            payload,
            vec![format!("install module-{i:04}")],
            &deps,
        )?;
    }
    Ok(catalog)
}

/// Drops the highest ids from a request until its closure fits `slots`.
pub fn trim_request(
    catalog: &ModuleCatalog,
    mut request: BTreeSet<ModuleId>,
    slots: usize,
) -> Result<BTreeSet<ModuleId>> {
    while catalog.closure(request.iter().copied())?.len() > slots {
        request.pop_last();
    }
    Ok(request)
}

#[derive(Clone, Debug)]
pub struct ServerBenchConfig {
    pub workload: WorkloadSpec,
    pub chain_length: usize,
    pub pow_difficulty: u8,
    pub key_bits: u32,
}

impl ServerBenchConfig {
    pub fn new(workload: WorkloadSpec, chain_length: usize, pow_difficulty: u8) -> Self {
        Self {
            workload,
            chain_length,
            pow_difficulty,
            key_bits: 40,
        }
    }
}

/// Prepares keys, catalog and crypto modules, then replays the workload
/// against a fresh server.
pub fn run_server_bench(cfg: &ServerBenchConfig, store_dir: Option<&Path>) -> Result<ServerMetrics> {
    let seed = cfg.workload.seed;
    let kp = ChameleonKeyPair::keygen(cfg.key_bits, format!("imup-bench-{seed}").as_bytes())?;
    let catalog = synthetic_catalog(cfg.workload.num_modules, seed)?;
    let requests = gen_workload(&cfg.workload, catalog.popularity_rank())?
        .into_iter()
        .map(|r| trim_request(&catalog, r, cfg.chain_length))
        .collect::<Result<Vec<_>>>()?;

    let temp;
    let dir = match store_dir {
        Some(d) => d.to_path_buf(),
        None => {
            temp = tempfile::tempdir()?;
            temp.path().to_path_buf()
        }
    };

    let start = Instant::now();
    let pool = CryptoPool::generate(kp.public(), cfg.chain_length + 1, cfg.pow_difficulty, seed)?;
    let preparation = start.elapsed();
    let mut config = ServerConfig::new(cfg.chain_length, dir);
    config.seed = seed;
    let server = Server::new(kp, catalog, pool, config)?;
    server.set_preparation_time(preparation);
    for r in &requests {
        server.handle_request(r)?;
    }
    Ok(server.metrics())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackScenario {
    pub key_bits: u32,
    pub exposed_fraction: f64,
    pub pow_difficulty: u8,
    pub attacker_speedup: f64,
    pub trials: u32,
    pub seed: u64,
}

impl AttackScenario {
    pub fn new(key_bits: u32, exposed_fraction: f64, pow_difficulty: u8, trials: u32) -> Self {
        Self {
            key_bits,
            exposed_fraction,
            pow_difficulty,
            attacker_speedup: 1000.0,
            trials,
            seed: 0,
        }
    }

    /// Unknown low-order bits of the trapdoor: `round((1 - p) * key_bits)`.
    pub fn unknown_bits(&self) -> u32 {
        ((1.0 - self.exposed_fraction) * self.key_bits as f64).round() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.exposed_fraction) {
            return Err(Error::InvalidParameter("exposed fraction must lie in [0, 1)".into()));
        }
        if self.attacker_speedup.is_nan() || self.attacker_speedup <= 0.0 {
            return Err(Error::InvalidParameter("attacker speedup must be positive".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("at least one run is required".into()));
        }
        Ok(())
    }
}

/// One brute-force run.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackRun {
    pub trials: u64,
    pub search_time_s: f64,
    pub forge_time_s: f64,
    pub defender_build_time_s: f64,
    pub device_verify_time_s: f64,
    /// True when the device accepted the final forged checkpoint.
    pub forged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackReport {
    pub measured_attacker_trials: f64,
    /// Mean attacker seconds per run: key search plus the final forgery.
    pub measured_attacker_time: f64,
    pub defender_build_time: f64,
    pub device_verify_time: f64,
    /// Model, not a measurement: per-trial time x 2^u x 16^d / speedup.
    pub extrapolated_time: f64,
    pub unknown_bits: u32,
    pub runs: Vec<AttackRun>,
}

impl AttackReport {
    pub fn mean_search_time(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.search_time_s))
    }

    pub fn mean_forge_time(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.forge_time_s))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn extrapolate(per_trial_s: f64, unknown_bits: u32, difficulty: u8, speedup: f64) -> f64 {
    per_trial_s * 2f64.powi(unknown_bits as i32) * 16f64.powi(difficulty as i32) / speedup
}

/// Templates an attacker holding a candidate trapdoor can derive from a
/// captured image: fresh padding collided onto each published digest.
fn derive_templates(kp: &ChameleonKeyPair, image: &FirmwareImage, rng: &mut impl RngCore) -> Result<Vec<CryptoModule>> {
    image
        .blocks
        .iter()
        .chain([&image.commitment_block])
        .map(|b| {
            let mut pstr = [0u8; crate::package::PADDING_LEN];
            rng.fill_bytes(&mut pstr);
            let pparam = kp.find_collision(&block_message(&b.content), &b.r, &block_message(&pstr))?;
            Ok(CryptoModule {
                pstr,
                pparam,
                solution_nonce: b.solution_nonce,
                digest: b.digest.clone(),
                difficulty: 0,
            })
        })
        .collect()
}

fn attack_run(s: &AttackScenario, run: u32) -> Result<AttackRun> {
    let l = ATTACK_CHAIN_LENGTH;
    let d = s.pow_difficulty;
    let run_seed = s.seed.wrapping_mul(1_000_003).wrapping_add(run as u64);
    let mut rng = seeded(b"imup-attack", run_seed, 0);
    let kp = ChameleonKeyPair::keygen(s.key_bits, format!("imup-attack-{run_seed}").as_bytes())?;
    let pk = kp.public().clone();
    let x = kp.trapdoor().expect("fresh key").clone();
    let q_bits = pk.order().bits() as u32;
    let u = s.unknown_bits().min(q_bits);

    // Defender: one legitimate build, crypto modules included.
    let catalog = synthetic_catalog(l + 1, run_seed)?;
    let fmodules: Vec<FunctionalModule> = catalog.modules().take(l).cloned().collect();
    let start = Instant::now();
    let pool = CryptoPool::generate(&pk, l + 1, d, run_seed)?;
    let ck = init_firmware(&kp, &pool, &fmodules, l, "field-1", run_seed)?;
    let defender = start.elapsed();

    let device = DeviceState::new(pk.clone(), d).factory_init(ck.chain.clone())?;
    let start = Instant::now();
    let honest = device.functional_verify(&ck.image);
    let verify = start.elapsed();
    if !honest {
        return Err(Error::BuildFailed("honest image rejected".into()));
    }

    // Attacker: knows the high bits of x, swaps block 0 for a payload of its
    // own and asks the device whether the resulting image is accepted.
    let captured = ck.image.clone();
    let target = &captured.blocks[0];
    let mut evil = FunctionalModule::decode(&target.content)?;
    evil.payload = b"attacker payload".to_vec();
    let evil_content = evil.encode();
    let e_old = pk.hash_to_exponent(&block_message(&target.content));
    let e_new = pk.hash_to_exponent(&block_message(&evil_content));
    let known_high = &x >> u;
    let q = pk.order().clone();

    // The commitment block binds every content hash, so it is re-sealed too.
    let mut forged_image = captured.clone();
    forged_image.blocks[0].content = evil_content;
    let hashes: Vec<[u8; 32]> = forged_image.blocks.iter().map(|b| content_hash(&b.content)).collect();
    let seal = commit_content(
        &pk,
        &captured.version_id,
        captured.kind,
        &captured.block_info,
        &captured.nonces()[..l],
        &hashes,
        &captured.commitment,
        captured.proof.as_ref(),
    );
    let cb = &captured.commitment_block;
    let c_old = pk.hash_to_exponent(&block_message(&cb.content));
    let c_new = pk.hash_to_exponent(&block_message(&seal));
    forged_image.commitment_block.content = seal;
    let start = Instant::now();
    let mut trials = 0u64;
    let mut recovered = None;
    for low in 0..(1u64 << u) {
        trials += 1;
        let candidate = (&known_high << u) | BigUint::from(low);
        if candidate.is_zero() || candidate >= q {
            continue;
        }
        forged_image.blocks[0].r = collision_with(&candidate, &q, &e_old, &target.r, &e_new)?;
        forged_image.commitment_block.r = collision_with(&candidate, &q, &c_old, &cb.r, &c_new)?;
        if device.functional_verify(&forged_image) {
            recovered = Some(candidate);
            break;
        }
    }
    let search = start.elapsed();
    let recovered = recovered.ok_or_else(|| Error::BuildFailed("key search exhausted".into()))?;

    // Final forgery: a security checkpoint on fresh crypto modules.
    let start = Instant::now();
    let attacker = ChameleonKeyPair::with_trapdoor(pk.clone(), recovered)?;
    let templates = derive_templates(&attacker, &captured, &mut rng)?;
    let base = Checkpoint {
        chain: captured.chain(),
        image: captured,
        templates,
    };
    let fresh = CryptoPool::generate(&pk, l + 1, d, rng.next_u64())?;
    let (evil_ck, _) = security_update(&attacker, &base, &fresh, &[evil], "field-2", rng.next_u64())?;
    let forge = start.elapsed();
    let forged = device.security_verify(&evil_ck.image).is_some();

    Ok(AttackRun {
        trials,
        search_time_s: search.as_secs_f64(),
        forge_time_s: forge.as_secs_f64(),
        defender_build_time_s: defender.as_secs_f64(),
        device_verify_time_s: verify.as_secs_f64(),
        forged,
    })
}

/// Runs the key search end to end `scenario.trials` times. Success is only
/// ever established by the device accepting a forged image.
pub fn run_attack_sim(scenario: &AttackScenario) -> Result<AttackReport> {
    scenario.validate()?;
    let u = scenario.unknown_bits();
    if u > EMPIRICAL_CAP_BITS {
        return Err(Error::EmpiricalCapExceeded(u));
    }
    let runs = (0..scenario.trials)
        .map(|i| attack_run(scenario, i))
        .collect::<Result<Vec<_>>>()?;
    let trials = mean(runs.iter().map(|r| r.trials as f64));
    let attacker = mean(runs.iter().map(|r| r.search_time_s + r.forge_time_s));
    Ok(AttackReport {
        measured_attacker_trials: trials,
        measured_attacker_time: attacker,
        defender_build_time: mean(runs.iter().map(|r| r.defender_build_time_s)),
        device_verify_time: mean(runs.iter().map(|r| r.device_verify_time_s)),
        extrapolated_time: extrapolate(attacker / trials, u, scenario.pow_difficulty, scenario.attacker_speedup),
        unknown_bits: u,
        runs,
    })
}

/// Model-only estimate for scenarios beyond the empirical cap: times a
/// sample of candidate checks and scales it.
pub fn analytic_attack_estimate(scenario: &AttackScenario, sample: u32) -> Result<AttackReport> {
    scenario.validate()?;
    let kp = ChameleonKeyPair::keygen(scenario.key_bits.min(64), b"imup-analytic")?;
    let pk = kp.public();
    let m = b"probe".as_slice();
    let r0 = pk.random_scalar(&mut seeded(b"imup-analytic", scenario.seed, 0));
    let digest = pk.chash(m, &r0)?;
    let e_old = pk.hash_to_exponent(m);
    let e_new = pk.hash_to_exponent(b"forged");
    let sample = sample.max(1);
    let start = Instant::now();
    for i in 1..=sample as u64 {
        let r = collision_with(&BigUint::from(i), pk.order(), &e_old, &r0, &e_new)?;
        std::hint::black_box(pk.verify_pair(b"forged", &r, &digest));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let u = scenario.unknown_bits();
    Ok(AttackReport {
        measured_attacker_trials: sample as f64,
        measured_attacker_time: elapsed,
        defender_build_time: f64::NAN,
        device_verify_time: f64::NAN,
        extrapolated_time: extrapolate(
            elapsed / sample as f64,
            u,
            scenario.pow_difficulty,
            scenario.attacker_speedup,
        ),
        unknown_bits: u,
        runs: Vec::new(),
    })
}

/// Rows written to CSV reports with a fixed column order.
pub trait CsvRow: Sized {
    const HEADER: &'static [&'static str];
    fn to_record(&self) -> Vec<String>;
    fn from_record(record: &csv::StringRecord) -> Result<Self>;
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize) -> Result<T> {
    record
        .get(i)
        .and_then(|v| v.parse().ok())
        .ok_or(Error::Malformed("csv field"))
}

impl CsvRow for ServerMetrics {
    const HEADER: &'static [&'static str] = &[
        "total_time_s",
        "hit_rate_pct",
        "firmware_count",
        "storage_bytes",
        "preparation_time_s",
        "first_processing_time_s",
        "subsequent_processing_time_s",
        "avg_search_time_ms",
    ];

    fn to_record(&self) -> Vec<String> {
        vec![
            self.total_time_s.to_string(),
            self.hit_rate_pct.to_string(),
            self.firmware_count.to_string(),
            self.storage_bytes.to_string(),
            self.preparation_time_s.to_string(),
            self.first_processing_time_s.to_string(),
            self.subsequent_processing_time_s.to_string(),
            self.avg_search_time_ms.to_string(),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        Ok(Self {
            total_time_s: field(r, 0)?,
            hit_rate_pct: field(r, 1)?,
            firmware_count: field(r, 2)?,
            storage_bytes: field(r, 3)?,
            preparation_time_s: field(r, 4)?,
            first_processing_time_s: field(r, 5)?,
            subsequent_processing_time_s: field(r, 6)?,
            avg_search_time_ms: field(r, 7)?,
        })
    }
}

impl CsvRow for AttackReport {
    const HEADER: &'static [&'static str] = &[
        "measured_attacker_trials",
        "measured_attacker_time",
        "defender_build_time",
        "device_verify_time",
        "extrapolated_time",
    ];

    fn to_record(&self) -> Vec<String> {
        vec![
            self.measured_attacker_trials.to_string(),
            self.measured_attacker_time.to_string(),
            self.defender_build_time.to_string(),
            self.device_verify_time.to_string(),
            self.extrapolated_time.to_string(),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        Ok(Self {
            measured_attacker_trials: field(r, 0)?,
            measured_attacker_time: field(r, 1)?,
            defender_build_time: field(r, 2)?,
            device_verify_time: field(r, 3)?,
            extrapolated_time: field(r, 4)?,
            ..Self::default()
        })
    }
}

/// Writes a header and `rows`, replacing any existing file.
pub fn write_report<T: CsvRow>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(T::HEADER)?;
    for row in rows {
        w.write_record(row.to_record())?;
    }
    w.flush()?;
    Ok(())
}

/// Appends `rows`, writing the header only when the file is new or empty.
/// An existing header must match.
pub fn append_report<T: CsvRow>(path: &Path, rows: &[T]) -> Result<()> {
    let existing = path.metadata().map(|m| m.len()).unwrap_or(0);
    if existing > 0 {
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().ne(T::HEADER.iter().copied()) {
            return Err(Error::Malformed("report header does not match"));
        }
    }
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if existing == 0 {
        w.write_record(T::HEADER)?;
    }
    for row in rows {
        w.write_record(row.to_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report<T: CsvRow>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(T::HEADER.iter().copied()) {
        return Err(Error::Malformed("report header does not match"));
    }
    r.records().map(|rec| T::from_record(&rec?)).collect()
}

/// Renders seconds with a readable unit.
pub fn human_duration(secs: f64) -> String {
    match secs.max(0.0) {
        s if s < 1e-3 => format!("{:.1} us", s * 1e6),
        s if s < 1.0 => format!("{:.2} ms", s * 1e3),
        s if s < 3600.0 => format!("{s:.2} s"),
        s if s < 86_400.0 => format!("{:.2} hrs", s / 3600.0),
        s if s < 86_400.0 * 365.0 => format!("{:.2} days", s / 86_400.0),
        s => format!("{:.2} years", s / (86_400.0 * 365.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workload_is_deterministic_and_deduplicated() {
        let rank: Vec<_> = (0..50).map(ModuleId).collect();
        let spec = WorkloadSpec::new(50, 200, 4);
        let a = gen_workload(&spec, &rank).unwrap();
        assert_eq!(a, gen_workload(&spec, &rank).unwrap());
        assert!(a.iter().all(|r| (1..=5).contains(&r.len())));
        let other = gen_workload(&WorkloadSpec { seed: 5, ..spec }, &rank).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn steep_exponent_concentrates_on_top_rank() {
        let rank: Vec<_> = (0..20).map(ModuleId).collect();
        let spec = WorkloadSpec {
            zipf_exponent: 10.0,
            min_per_request: 1,
            max_per_request: 1,
            ..WorkloadSpec::new(20, 2000, 1)
        };
        let reqs = gen_workload(&spec, &rank).unwrap();
        let top = reqs.iter().filter(|r| r.contains(&ModuleId(0))).count();
        assert!(top as f64 / reqs.len() as f64 > 0.9);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let rank: Vec<_> = (0..3).map(ModuleId).collect();
        assert!(gen_workload(&WorkloadSpec::new(3, 1, 0), &rank).is_err());
        let spec = WorkloadSpec {
            zipf_exponent: 0.0,
            ..WorkloadSpec::new(10, 1, 0)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn trimming_respects_slots() {
        let catalog = synthetic_catalog(60, 3).unwrap();
        let req: BTreeSet<_> = (10..16).map(ModuleId).collect();
        let trimmed = trim_request(&catalog, req, 3).unwrap();
        assert!(catalog.closure(trimmed.iter().copied()).unwrap().len() <= 3);
    }

    #[test]
    fn full_exposure_needs_one_trial() {
        let s = AttackScenario::new(32, 0.99, 0, 2);
        assert_eq!(s.unknown_bits(), 0);
        let report = run_attack_sim(&s).unwrap();
        assert_eq!(report.measured_attacker_trials, 1.0);
        assert!(report.runs.iter().all(|r| r.forged));
    }

    #[test]
    fn cap_is_enforced() {
        let s = AttackScenario::new(64, 0.5, 0, 1);
        assert!(matches!(run_attack_sim(&s), Err(Error::EmpiricalCapExceeded(32))));
        assert!(analytic_attack_estimate(&s, 16).unwrap().extrapolated_time > 0.0);
    }

    #[test]
    fn extrapolation_follows_the_model() {
        let v = extrapolate(1e-6, 10, 2, 1000.0);
        assert!((v - 1e-6 * 1024.0 * 256.0 / 1000.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_report::<ServerMetrics>(&path, &[]).unwrap();
        assert!(read_report::<ServerMetrics>(&path).unwrap().is_empty());
        let row = ServerMetrics {
            total_time_s: 1.25,
            hit_rate_pct: 100.0 / 3.0,
            firmware_count: 7,
            storage_bytes: 12345,
            preparation_time_s: 0.1,
            first_processing_time_s: 0.2,
            subsequent_processing_time_s: 1e-5,
            avg_search_time_ms: 0.003,
        };
        append_report(&path, std::slice::from_ref(&row)).unwrap();
        append_report(&path, std::slice::from_ref(&row)).unwrap();
        assert_eq!(read_report::<ServerMetrics>(&path).unwrap(), vec![row.clone(), row]);
        assert!(append_report::<AttackReport>(&path, &[]).is_err());
    }
}
