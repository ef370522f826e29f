use std::collections::BTreeSet;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use imup::bench::{
    analytic_attack_estimate, append_report, configure_threads, human_duration, run_attack_sim, run_server_bench,
    synthetic_catalog, AttackScenario, ServerBenchConfig, WorkloadSpec,
};
use imup::pipeline::init_firmware;
use imup::server::wire;
use imup::{ChameleonKeyPair, CryptoPool, DeviceState, ModuleCatalog, ModuleId, ModuleKind, Server, ServerConfig};

#[derive(Parser)]
#[command(
    name = "imup",
    version,
    about = "Modular firmware updates over chameleon-hash chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Functional,
    Security,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Script,
    Binary,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a key pair file (trapdoor included).
    Keygen {
        #[arg(long, default_value_t = 1024)]
        bits: u32,
        #[arg(long)]
        seed: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the public half here.
        #[arg(long)]
        public_out: Option<PathBuf>,
    },
    /// Pre-generate crypto modules into a pool file.
    GenPool {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        pow_difficulty: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a module to a catalog directory, or fill it with synthetic modules.
    Package {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, conflicts_with_all = ["name", "payload"])]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, requires = "payload")]
        name: Option<String>,
        #[arg(long)]
        payload: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "binary")]
        kind: KindArg,
        #[arg(long = "step")]
        steps: Vec<String>,
        #[arg(long = "dep", value_delimiter = ',')]
        deps: Vec<u32>,
    },
    /// Write a device state holding the trust root the server will start from.
    FactoryInit {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 7)]
        chain_length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        state: PathBuf,
    },
    /// Check an image against a device state; exits 0 when accepted.
    Verify {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum)]
        branch: Option<BranchArg>,
    },
    /// Run the distribution server.
    Serve {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        listen: String,
        #[arg(long, default_value_t = 7)]
        chain_length: usize,
        #[arg(long)]
        pow_difficulty: u8,
        #[arg(long, default_value = "imup-store")]
        store: PathBuf,
        #[arg(long)]
        max_storage: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ask a running server for an image.
    Request {
        #[arg(long)]
        addr: String,
        #[arg(long, value_delimiter = ',')]
        modules: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a Zipf workload against a fresh in-process server.
    Bench {
        #[arg(long)]
        modules: usize,
        #[arg(long)]
        requests: usize,
        #[arg(long, default_value_t = 7)]
        chain_length: usize,
        #[arg(long, default_value_t = 1)]
        pow_difficulty: u8,
        #[arg(long, default_value_t = 1.0)]
        zipf: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        key_bits: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Brute-force partially exposed trapdoor bits against a simulated device.
    AttackSim {
        #[arg(long)]
        key_bits: u32,
        #[arg(long)]
        exposed_frac: f64,
        #[arg(long)]
        pow_difficulty: u8,
        #[arg(long, default_value_t = 10)]
        runs: u32,
        #[arg(long, default_value_t = 1000.0)]
        speedup: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the search and only report the model estimate.
        #[arg(long)]
        analytic: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_key(path: &Path) -> Result<ChameleonKeyPair> {
    let bytes = fs::read(path).with_context(|| format!("reading key {}", path.display()))?;
    Ok(ChameleonKeyPair::decode(&bytes)?)
}

fn read_pool(path: &Path, kp: &ChameleonKeyPair) -> Result<CryptoPool> {
    let bytes = fs::read(path).with_context(|| format!("reading pool {}", path.display()))?;
    Ok(CryptoPool::decode(&bytes, kp.public())?)
}

fn verify(state_path: &Path, image: &Path, branch: Option<BranchArg>) -> Result<bool> {
    let state = DeviceState::load(state_path).with_context(|| format!("reading state {}", state_path.display()))?;
    let bytes = fs::read(image).with_context(|| format!("reading image {}", image.display()))?;
    let accepted = match branch {
        Some(BranchArg::Functional) => state.functional_verify_reader(bytes.as_slice()).then(|| state.clone()),
        Some(BranchArg::Security) => state.security_verify_reader(bytes.as_slice()),
        None => state.verify(&bytes).map(|(_, s)| s),
    };
    match accepted {
        Some(next) => {
            if next != state {
                next.save(state_path)?;
                println!(
                    "accepted; chain rotated to {}",
                    next.chain().map_or("?", |c| &c.checkpoint_id)
                );
            } else {
                println!("accepted");
            }
            Ok(true)
        }
        None => {
            println!("rejected");
            Ok(false)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Keygen {
            bits,
            seed,
            out,
            public_out,
        } => {
            let kp = ChameleonKeyPair::keygen(bits, seed.as_bytes())?;
            fs::write(&out, kp.encode(true))?;
            if let Some(p) = public_out {
                fs::write(p, kp.encode(false))?;
            }
            println!("wrote {bits}-bit key to {}", out.display());
        }
        Command::GenPool {
            key,
            count,
            pow_difficulty,
            seed,
            out,
        } => {
            let kp = read_key(&key)?;
            let start = Instant::now();
            let pool = CryptoPool::generate(kp.public(), count, pow_difficulty, seed)?;
            fs::write(&out, pool.encode(kp.public()))?;
            println!(
                "generated {count} crypto modules at difficulty {pow_difficulty} in {}",
                human_duration(start.elapsed().as_secs_f64())
            );
        }
        Command::Package {
            catalog,
            synthetic,
            seed,
            name,
            payload,
            kind,
            steps,
            deps,
        } => {
            if let Some(n) = synthetic {
                synthetic_catalog(n, seed)?.save_dir(&catalog)?;
                println!("wrote {n} synthetic modules to {}", catalog.display());
            } else {
                let Some(name) = name else {
                    bail!("either --synthetic or --name/--payload is required");
                };
                let mut cat = if catalog.exists() {
                    ModuleCatalog::load_dir(&catalog)?
                } else {
                    ModuleCatalog::new()
                };
                let payload = fs::read(payload.expect("clap enforces --payload"))?;
                let kind = match kind {
                    KindArg::Script => ModuleKind::Script,
                    KindArg::Binary => ModuleKind::Binary,
                };
                let deps: Vec<ModuleId> = deps.into_iter().map(ModuleId).collect();
                let id = cat.package(&name, kind, payload, steps, &deps)?;
                cat.save_dir(&catalog)?;
                println!("packaged {name} as {id}");
            }
        }
        Command::FactoryInit {
            key,
            catalog,
            pool,
            chain_length,
            seed,
            state,
        } => {
            let kp = read_key(&key)?;
            let pool = read_pool(&pool, &kp)?;
            let catalog = ModuleCatalog::load_dir(&catalog)?;
            let fmodules: Vec<_> = catalog
                .popularity_rank()
                .iter()
                .take(chain_length)
                .map(|id| catalog.get(*id).expect("rank covers catalog").clone())
                .collect();
            let ck = init_firmware(&kp, &pool, &fmodules, chain_length, "ckpt-0", seed)?;
            let device = DeviceState::new(kp.public().clone(), pool.difficulty()).factory_init(ck.chain.clone())?;
            device.save(&state)?;
            println!("device trust root written to {}", state.display());
        }
        Command::Verify { state, image, branch } => return verify(&state, &image, branch),
        Command::Serve {
            catalog,
            pool,
            key,
            listen,
            chain_length,
            pow_difficulty,
            store,
            max_storage,
            seed,
        } => {
            configure_threads()?;
            let kp = read_key(&key)?;
            if !kp.has_trapdoor() {
                bail!("the server key must include the trapdoor");
            }
            let pool = read_pool(&pool, &kp)?;
            if pool.difficulty() != pow_difficulty {
                bail!(
                    "pool was generated at difficulty {}, not {pow_difficulty}",
                    pool.difficulty()
                );
            }
            let catalog = ModuleCatalog::load_dir(&catalog)?;
            let mut config = ServerConfig::new(chain_length, &store);
            config.max_storage = max_storage;
            config.seed = seed;
            let server = Server::new(kp, catalog, pool, config)?;
            let ck_path = store.join("checkpoint-ckpt-0.bin");
            fs::write(&ck_path, server.checkpoint_image())?;
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            println!(
                "serving on {} (checkpoint image at {})",
                listener.local_addr()?,
                ck_path.display()
            );
            wire::serve(Arc::new(server), listener)?;
        }
        Command::Request { addr, modules, out } => {
            let ids: BTreeSet<ModuleId> = modules.into_iter().map(ModuleId).collect();
            let resp = wire::request(addr.as_str(), &ids)?;
            match resp.status {
                wire::Status::Ok => {
                    fs::write(&out, &resp.image)?;
                    println!(
                        "{} image, {} bytes -> {}",
                        if resp.hit { "cached" } else { "new" },
                        resp.image.len(),
                        out.display()
                    );
                }
                wire::Status::Oversize => bail!("request does not fit the chain length"),
                wire::Status::UnknownModule => bail!("request names an unknown module"),
            }
        }
        Command::Bench {
            modules,
            requests,
            chain_length,
            pow_difficulty,
            zipf,
            seed,
            key_bits,
            out,
        } => {
            configure_threads()?;
            let workload = WorkloadSpec {
                zipf_exponent: zipf,
                ..WorkloadSpec::new(modules, requests, seed)
            };
            let mut cfg = ServerBenchConfig::new(workload, chain_length, pow_difficulty);
            cfg.key_bits = key_bits;
            let m = run_server_bench(&cfg, None)?;
            append_report(&out, std::slice::from_ref(&m))?;
            println!("seed {seed}, zipf {zipf}, L={chain_length}, d={pow_difficulty}, {key_bits}-bit key");
            println!(
                "hit rate {:.2}%  firmware {}  storage {} B  total {}",
                m.hit_rate_pct,
                m.firmware_count,
                m.storage_bytes,
                human_duration(m.total_time_s)
            );
            println!(
                "preparation {}  first {}  subsequent {}  search {:.4} ms",
                human_duration(m.preparation_time_s),
                human_duration(m.first_processing_time_s),
                human_duration(m.subsequent_processing_time_s),
                m.avg_search_time_ms
            );
        }
        Command::AttackSim {
            key_bits,
            exposed_frac,
            pow_difficulty,
            runs,
            speedup,
            seed,
            analytic,
            out,
        } => {
            configure_threads()?;
            let scenario = AttackScenario {
                attacker_speedup: speedup,
                seed,
                ..AttackScenario::new(key_bits, exposed_frac, pow_difficulty, runs)
            };
            let report = if analytic {
                analytic_attack_estimate(&scenario, 4096)?
            } else {
                run_attack_sim(&scenario)?
            };
            append_report(&out, std::slice::from_ref(&report))?;
            println!(
                "seed {seed}, {} unknown bits, d={pow_difficulty}, speedup {speedup}x",
                report.unknown_bits
            );
            if !analytic {
                let forged = report.runs.iter().filter(|r| r.forged).count();
                println!(
                    "mean trials {:.1}  attacker {} (search {}, forgery {})  defender {}  device verify {}  forged {forged}/{}",
                    report.measured_attacker_trials,
                    human_duration(report.measured_attacker_time),
                    human_duration(report.mean_search_time()),
                    human_duration(report.mean_forge_time()),
                    human_duration(report.defender_build_time),
                    human_duration(report.device_verify_time),
                    report.runs.len()
                );
            }
            println!(
                "model estimate (not measured): {}",
                human_duration(report.extrapolated_time)
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
