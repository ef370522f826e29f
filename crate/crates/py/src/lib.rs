//! Python bindings. Byte strings cross the boundary as `bytes`, scalars as
//! Python `int`, module ids as `int`.

use std::collections::BTreeSet;
use std::path::PathBuf;

use num_bigint::BigUint;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use imup::bench::{self, AttackScenario, ServerBenchConfig, WorkloadSpec};
use imup::pipeline::{self, ImageKind};
use imup::{pow, ModuleId, ModuleKind, ServerMetrics};

fn err(e: imup::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn ids(v: Vec<u32>) -> BTreeSet<ModuleId> {
    v.into_iter().map(ModuleId).collect()
}

fn id_list(set: &BTreeSet<ModuleId>) -> Vec<u32> {
    set.iter().map(|id| id.0).collect()
}

#[pyclass(name = "KeyPair", module = "imup_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct KeyPair(imup::ChameleonKeyPair);

#[pymethods]
impl KeyPair {
    #[staticmethod]
    fn keygen(bits: u32, seed: &[u8]) -> PyResult<Self> {
        imup::ChameleonKeyPair::keygen(bits, seed).map(Self).map_err(err)
    }

    /// The p = 23, q = 11 group with g = 2 and x = 3.
    #[staticmethod]
    fn toy() -> Self {
        Self(imup::ChameleonKeyPair::toy())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        imup::ChameleonKeyPair::decode(data).map(Self).map_err(err)
    }

    #[pyo3(signature = (include_trapdoor = true))]
    fn to_bytes<'py>(&self, py: Python<'py>, include_trapdoor: bool) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.encode(include_trapdoor))
    }

    fn public_only(&self) -> Self {
        Self(imup::ChameleonKeyPair::from_public(self.0.public().clone()))
    }

    #[getter]
    fn has_trapdoor(&self) -> bool {
        self.0.has_trapdoor()
    }

    #[getter]
    fn p(&self) -> BigUint {
        self.0.public().modulus().clone()
    }

    #[getter]
    fn q(&self) -> BigUint {
        self.0.public().order().clone()
    }

    #[getter]
    fn g(&self) -> BigUint {
        self.0.public().generator().clone()
    }

    #[getter]
    fn h(&self) -> BigUint {
        self.0.public().key().clone()
    }

    #[getter]
    fn digest_width(&self) -> usize {
        self.0.public().digest_width()
    }

    fn hash_to_exponent(&self, m: &[u8]) -> BigUint {
        self.0.public().hash_to_exponent(m)
    }

    fn chash<'py>(&self, py: Python<'py>, m: &[u8], r: BigUint) -> PyResult<Bound<'py, PyBytes>> {
        let d = self.0.public().chash(m, &r).map_err(err)?;
        Ok(PyBytes::new(py, d.as_bytes()))
    }

    fn find_collision(&self, m: &[u8], r: BigUint, m_new: &[u8]) -> PyResult<BigUint> {
        self.0.find_collision(m, &r, m_new).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "KeyPair(bits={}, trapdoor={})",
            self.0.public().bits(),
            self.0.has_trapdoor()
        )
    }
}

/// Smallest nonce meeting difficulty `d`; returns `(nonce, digest)`.
#[pyfunction]
fn pow_solve<'py>(
    py: Python<'py>,
    key: &KeyPair,
    message: &[u8],
    difficulty: u8,
) -> PyResult<(u64, Bound<'py, PyBytes>)> {
    let pk = key.0.public();
    let challenge = pow::PowChallenge::new(pk, message.to_vec(), difficulty).map_err(err)?;
    let sol = py.detach(|| pow::solve(pk, &challenge)).map_err(err)?;
    Ok((sol.nonce, PyBytes::new(py, sol.b_hash.as_bytes())))
}

#[pyfunction]
fn pow_verify(key: &KeyPair, message: &[u8], difficulty: u8, nonce: u64) -> bool {
    pow::check_nonce(key.0.public(), message, difficulty, nonce)
}

#[pyclass(name = "Catalog", module = "imup_py")]
struct Catalog(imup::ModuleCatalog);

#[pymethods]
impl Catalog {
    #[new]
    fn new() -> Self {
        Self(imup::ModuleCatalog::new())
    }

    #[staticmethod]
    fn synthetic(num_modules: usize, seed: u64) -> PyResult<Self> {
        bench::synthetic_catalog(num_modules, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        imup::ModuleCatalog::load_dir(&dir).map(Self).map_err(err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save_dir(&dir).map_err(err)
    }

    #[pyo3(signature = (name, payload, kind = "binary", steps = Vec::new(), deps = Vec::new()))]
    fn package(
        &mut self,
        name: &str,
        payload: Vec<u8>,
        kind: &str,
        steps: Vec<String>,
        deps: Vec<u32>,
    ) -> PyResult<u32> {
        let kind = match kind {
            "binary" => ModuleKind::Binary,
            "script" => ModuleKind::Script,
            other => return Err(PyValueError::new_err(format!("unknown module kind {other:?}"))),
        };
        let deps: Vec<ModuleId> = deps.into_iter().map(ModuleId).collect();
        self.0
            .package(name, kind, payload, steps, &deps)
            .map(|id| id.0)
            .map_err(err)
    }

    fn closure(&self, ids_in: Vec<u32>) -> PyResult<Vec<u32>> {
        self.0.closure(ids(ids_in)).map(|s| id_list(&s)).map_err(err)
    }

    fn popularity_rank(&self) -> Vec<u32> {
        self.0.popularity_rank().iter().map(|id| id.0).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "CryptoPool", module = "imup_py")]
struct CryptoPool(imup::CryptoPool);

#[pymethods]
impl CryptoPool {
    #[staticmethod]
    fn generate(py: Python<'_>, key: &KeyPair, count: usize, difficulty: u8, seed: u64) -> PyResult<Self> {
        py.detach(|| imup::CryptoPool::generate(key.0.public(), count, difficulty, seed))
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8], key: &KeyPair) -> PyResult<Self> {
        imup::CryptoPool::decode(data, key.0.public()).map(Self).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>, key: &KeyPair) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.encode(key.0.public()))
    }

    #[getter]
    fn difficulty(&self) -> u8 {
        self.0.difficulty()
    }

    fn remaining(&self) -> usize {
        self.0.remaining()
    }
}

#[pyclass(name = "Image", module = "imup_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Image(imup::FirmwareImage);

#[pymethods]
impl Image {
    #[staticmethod]
    fn from_bytes(data: &[u8], key: &KeyPair) -> PyResult<Self> {
        imup::FirmwareImage::decode(data, key.0.public()).map(Self).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>, key: &KeyPair) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.encode(key.0.public()))
    }

    #[getter]
    fn version_id(&self) -> String {
        self.0.version_id.clone()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.0.kind {
            ImageKind::Functional => "functional",
            ImageKind::Security => "security",
        }
    }

    #[getter]
    fn module_set(&self) -> Vec<u32> {
        id_list(&self.0.module_set())
    }

    #[getter]
    fn commitment(&self) -> BigUint {
        self.0.commitment.clone()
    }

    #[getter]
    fn proof(&self) -> Option<BigUint> {
        self.0.proof.clone()
    }

    fn digests<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyBytes>> {
        self.0
            .digests()
            .iter()
            .map(|d| PyBytes::new(py, d.as_bytes()))
            .collect()
    }
}

#[pyclass(name = "Checkpoint", module = "imup_py", frozen)]
struct Checkpoint(imup::Checkpoint);

fn modules_for(catalog: &Catalog, module_ids: Vec<u32>) -> PyResult<Vec<imup::FunctionalModule>> {
    module_ids
        .into_iter()
        .map(|id| {
            catalog
                .0
                .get(ModuleId(id))
                .cloned()
                .ok_or_else(|| err(imup::Error::UnknownModule(ModuleId(id))))
        })
        .collect()
}

#[pymethods]
impl Checkpoint {
    /// First trusted image; `module_ids` fills the chain in order.
    #[staticmethod]
    #[pyo3(signature = (key, pool, catalog, module_ids, version_id = "ckpt-0", seed = 0))]
    fn init(
        key: &KeyPair,
        pool: &CryptoPool,
        catalog: &Catalog,
        module_ids: Vec<u32>,
        version_id: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let fmodules = modules_for(catalog, module_ids)?;
        let l = fmodules.len();
        pipeline::init_firmware(&key.0, &pool.0, &fmodules, l, version_id, seed)
            .map(Self)
            .map_err(err)
    }

    /// Next checkpoint; returns `(checkpoint, proof)`.
    #[pyo3(signature = (key, pool, catalog, module_ids, version_id, seed = 0))]
    fn security_update(
        &self,
        key: &KeyPair,
        pool: &CryptoPool,
        catalog: &Catalog,
        module_ids: Vec<u32>,
        version_id: &str,
        seed: u64,
    ) -> PyResult<(Self, BigUint)> {
        let fmodules = modules_for(catalog, module_ids)?;
        pipeline::security_update(&key.0, &self.0, &pool.0, &fmodules, version_id, seed)
            .map(|(ck, p)| (Self(ck), p))
            .map_err(err)
    }

    fn iterate(&self, key: &KeyPair, catalog: &Catalog, requested: Vec<u32>) -> PyResult<Image> {
        pipeline::iterate_version(&key.0, &self.0, &catalog.0, &ids(requested))
            .map(Image)
            .map_err(err)
    }

    #[getter]
    fn image(&self) -> Image {
        Image(self.0.image.clone())
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id().to_string()
    }

    #[getter]
    fn chain_length(&self) -> usize {
        self.0.chain_length()
    }
}

#[pyclass(name = "Device", module = "imup_py", frozen)]
struct Device(imup::DeviceState);

#[pymethods]
impl Device {
    #[new]
    fn new(key: &KeyPair, pow_difficulty: u8) -> Self {
        Self(imup::DeviceState::new(key.0.public().clone(), pow_difficulty))
    }

    fn factory_init(&self, checkpoint: &Checkpoint) -> PyResult<Self> {
        self.0.factory_init(checkpoint.0.chain.clone()).map(Self).map_err(err)
    }

    fn functional_verify(&self, image: &[u8]) -> bool {
        self.0.functional_verify_reader(image)
    }

    /// The rotated device on acceptance, otherwise `None`.
    fn security_verify(&self, image: &[u8]) -> Option<Self> {
        self.0.security_verify_reader(image).map(Self)
    }

    fn install(&self, image: &Image, selected: Vec<u32>) -> PyResult<Self> {
        self.0.install(&image.0, &ids(selected)).map(Self).map_err(err)
    }

    #[getter]
    fn installed(&self) -> Vec<u32> {
        id_list(self.0.installed())
    }

    #[getter]
    fn checkpoint_id(&self) -> Option<String> {
        self.0.chain().map(|c| c.checkpoint_id.clone())
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        imup::DeviceState::decode(data).map(Self).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.encode())
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &ServerMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total_time_s", m.total_time_s)?;
    d.set_item("hit_rate_pct", m.hit_rate_pct)?;
    d.set_item("firmware_count", m.firmware_count)?;
    d.set_item("storage_bytes", m.storage_bytes)?;
    d.set_item("preparation_time_s", m.preparation_time_s)?;
    d.set_item("first_processing_time_s", m.first_processing_time_s)?;
    d.set_item("subsequent_processing_time_s", m.subsequent_processing_time_s)?;
    d.set_item("avg_search_time_ms", m.avg_search_time_ms)?;
    Ok(d)
}

#[pyclass(name = "Server", module = "imup_py", frozen)]
struct Server(imup::Server);

#[pymethods]
impl Server {
    /// Consumes copies of the catalog and pool; builds the first checkpoint.
    #[new]
    #[pyo3(signature = (key, catalog, pool, chain_length, store_dir, seed = 0))]
    fn new(
        py: Python<'_>,
        key: &KeyPair,
        catalog: &Catalog,
        pool: &CryptoPool,
        chain_length: usize,
        store_dir: PathBuf,
        seed: u64,
    ) -> PyResult<Self> {
        let pool = imup::CryptoPool::new(pool.0.difficulty(), pool.0.claim(pool.0.remaining()).map_err(err)?);
        let mut cfg = imup::ServerConfig::new(chain_length, store_dir);
        cfg.seed = seed;
        let catalog = catalog.0.clone();
        let kp = key.0.clone();
        py.detach(|| imup::Server::new(kp, catalog, pool, cfg))
            .map(Self)
            .map_err(err)
    }

    /// Returns `(image_id, hit, image_bytes)`.
    fn handle_request<'py>(
        &self,
        py: Python<'py>,
        requested: Vec<u32>,
    ) -> PyResult<(String, bool, Bound<'py, PyBytes>)> {
        let served = py.detach(|| self.0.handle_request(&ids(requested))).map_err(err)?;
        let bytes = served.image.read_bytes().map_err(err)?;
        Ok((served.image.image_id.clone(), served.hit, PyBytes::new(py, &bytes)))
    }

    #[pyo3(signature = (updates = Vec::new()))]
    fn checkpoint_rollover(&self, py: Python<'_>, updates: Vec<(u32, Vec<u8>)>) -> PyResult<String> {
        let updates: Vec<_> = updates.into_iter().map(|(id, p)| (ModuleId(id), p)).collect();
        py.detach(|| self.0.checkpoint_rollover(&updates))
            .map(|ck| ck.id().to_string())
            .map_err(err)
    }

    fn checkpoint_image<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.checkpoint_image())
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint((*self.0.checkpoint()).clone())
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        metrics_dict(py, &self.0.metrics())
    }
}

#[pyfunction]
#[pyo3(signature = (modules, requests, chain_length = 7, pow_difficulty = 1, zipf = 1.0, seed = 1))]
fn run_server_bench<'py>(
    py: Python<'py>,
    modules: usize,
    requests: usize,
    chain_length: usize,
    pow_difficulty: u8,
    zipf: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let workload = WorkloadSpec {
        zipf_exponent: zipf,
        ..WorkloadSpec::new(modules, requests, seed)
    };
    let cfg = ServerBenchConfig::new(workload, chain_length, pow_difficulty);
    let m = py.detach(|| bench::run_server_bench(&cfg, None)).map_err(err)?;
    metrics_dict(py, &m)
}

#[pyfunction]
#[pyo3(signature = (key_bits, exposed_frac, pow_difficulty, runs = 1, speedup = 1000.0, seed = 0))]
fn run_attack_sim<'py>(
    py: Python<'py>,
    key_bits: u32,
    exposed_frac: f64,
    pow_difficulty: u8,
    runs: u32,
    speedup: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let scenario = AttackScenario {
        attacker_speedup: speedup,
        seed,
        ..AttackScenario::new(key_bits, exposed_frac, pow_difficulty, runs)
    };
    let r = py.detach(|| bench::run_attack_sim(&scenario)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("measured_attacker_trials", r.measured_attacker_trials)?;
    d.set_item("measured_attacker_time", r.measured_attacker_time)?;
    d.set_item("defender_build_time", r.defender_build_time)?;
    d.set_item("device_verify_time", r.device_verify_time)?;
    d.set_item("extrapolated_time", r.extrapolated_time)?;
    d.set_item("unknown_bits", r.unknown_bits)?;
    d.set_item("forged_runs", r.runs.iter().filter(|x| x.forged).count())?;
    Ok(d)
}

#[pymodule]
fn imup_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<KeyPair>()?;
    m.add_class::<Catalog>()?;
    m.add_class::<CryptoPool>()?;
    m.add_class::<Image>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Device>()?;
    m.add_class::<Server>()?;
    m.add_function(wrap_pyfunction!(pow_solve, m)?)?;
    m.add_function(wrap_pyfunction!(pow_verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_server_bench, m)?)?;
    m.add_function(wrap_pyfunction!(run_attack_sim, m)?)?;
    Ok(())
}
