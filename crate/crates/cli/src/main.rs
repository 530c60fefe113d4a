//! Command-line front end: image creation, replica service, workloads,
//! crash exploration, stencil audit and throughput runs.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use twinfs::blockstore::{BlockStore, BLOCK_SIZE};
use twinfs::device::StencilSource;
use twinfs::harness::bench::{run_bench, BenchConfig, BenchMode};
use twinfs::harness::crashes::explore_crashes;
use twinfs::harness::workload::{drive, run_workload, Driver, Profile, RunConfig, WorkloadParams};
use twinfs::harness::{AttackKind, Rig, RigConfig};
use twinfs::minifs::{layout::Superblock, mkfs};
use twinfs::stencil::StencilMap;

mod serve;

/// Exit status when a run detected the injected attack.
const EXIT_ATTACK_DETECTED: u8 = 3;

#[derive(Parser)]
#[command(name = "twinfs", about = "Twin-filesystem verification harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Device,
    Cloud,
}

impl From<Source> for StencilSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Device => StencilSource::Device,
            Source::Cloud => StencilSource::Cloud,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Writes `full.img` and `metadata.img` into OUT.
    Mkfs {
        #[arg(long, default_value_t = 4096)]
        blocks: u32,
        #[arg(long, default_value_t = 128)]
        inodes: u32,
        out: PathBuf,
    },
    /// Runs the metadata replica service.
    Replica {
        #[arg(long, default_value = "127.0.0.1:7447")]
        listen: String,
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Runs a workload profile and prints the JSON report.
    Run {
        #[arg(long)]
        profile: Profile,
        /// Simulated network round trip in milliseconds.
        #[arg(long, default_value_t = 0)]
        delay: u64,
        #[arg(long)]
        attack: Option<AttackKind>,
        /// Matching ops the attacker lets through first.
        #[arg(long, default_value_t = 0)]
        attack_skip: usize,
        #[arg(long)]
        untrusted_reads: bool,
        #[arg(long)]
        no_memo: bool,
        #[arg(long, value_enum, default_value_t = Source::Device)]
        stencil_source: Source,
        #[arg(long)]
        cache_pages: Option<usize>,
        /// External replica; one runs in-process otherwise.
        #[arg(long)]
        replica: Option<SocketAddr>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Crashes every short op log at every protocol step and checks that
    /// device and replica converge.
    Crashes {
        #[arg(long, default_value_t = 6)]
        ops: usize,
    },
    /// Prints the stencil map, one `block N: CLASS [ranges]` line per block.
    AuditStencil {
        /// Full image written by `mkfs`. A fresh filesystem is used otherwise.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Runs this profile first so the map covers real files.
        #[arg(long, conflicts_with = "image")]
        profile: Option<Profile>,
    },
    /// Paired throughput runs with and without the stencil gate.
    Bench {
        #[arg(long = "iozone-like")]
        mode: BenchMode,
        #[arg(long, default_value_t = 524288)]
        size: usize,
        #[arg(long, default_value_t = 4096)]
        chunk: usize,
        #[arg(long, default_value_t = 0)]
        delay: u64,
    },
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn cmd_mkfs(blocks: u32, inodes: u32, out: PathBuf) -> Result<ExitCode, String> {
    let (store, meta) = mkfs(blocks, inodes).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    store.save_image(&out.join("full.img")).map_err(|e| e.to_string())?;
    let bytes = meta.encode();
    std::fs::write(out.join("metadata.img"), &bytes).map_err(|e| e.to_string())?;
    let sb = Superblock::layout(blocks, inodes).map_err(|e| e.to_string())?;
    let full = store.image_len();
    print_json(&json!({
        "blocks": blocks,
        "inodes": inodes,
        "full_bytes": full,
        "metadata_bytes": bytes.len(),
        "metadata_region_bytes": sb.metadata_region_bytes(),
        "metadata_pct": sb.metadata_region_bytes() as f64 * 100.0 / full as f64,
    }));
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    profile: Profile,
    delay: u64,
    attack: Option<AttackKind>,
    attack_skip: usize,
    untrusted_reads: bool,
    no_memo: bool,
    source: Source,
    cache_pages: Option<usize>,
    replica: Option<SocketAddr>,
    iterations: Option<usize>,
    seed: Option<u64>,
) -> Result<ExitCode, String> {
    let mut cfg = RunConfig::new(profile);
    cfg.rig.device.delay = Duration::from_millis(delay);
    cfg.rig.device.memo = !no_memo;
    cfg.rig.device.stencil_source = source.into();
    if let Some(n) = cache_pages {
        cfg.rig.device.cache_pages = n;
    }
    cfg.rig.attack = attack;
    cfg.rig.replica_addr = replica;
    cfg.untrusted_reads = untrusted_reads;
    cfg.attack_skip = attack_skip;
    if let Some(n) = iterations {
        cfg.params.iterations = n;
    }
    if let Some(s) = seed {
        cfg.params.seed = s;
    }
    let report = run_workload(&cfg).map_err(|e| e.to_string())?;
    print_json(&report);
    Ok(if report.attack_detected {
        ExitCode::from(EXIT_ATTACK_DETECTED)
    } else if report.error.is_some() || !report.converged() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_crashes(ops: usize) -> Result<ExitCode, String> {
    let r = explore_crashes(ops);
    print_json(&r);
    Ok(if r.all_converged() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_audit(image: Option<PathBuf>, profile: Option<Profile>) -> Result<ExitCode, String> {
    let text = match (image, profile) {
        (Some(path), _) => {
            let store = BlockStore::load_image(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            StencilMap::build(&store).map_err(|e| e.to_string())?.audit_text()
        }
        (None, Some(p)) => {
            let mut rig = Rig::new(RigConfig::default()).map_err(|e| e.to_string())?;
            let params = WorkloadParams::for_profile(p);
            let mut d = Driver::new(&mut rig, params.seed);
            drive(&mut d, p, &params, false).map_err(|e| e.to_string())?;
            rig.device.quiesce().map_err(|e| e.to_string())?;
            rig.device.stencil().audit_text()
        }
        (None, None) => {
            let (store, _) = mkfs(4096, 128).map_err(|e| e.to_string())?;
            StencilMap::build(&store).map_err(|e| e.to_string())?.audit_text()
        }
    };
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(mode: BenchMode, size: usize, chunk: usize, delay: u64) -> Result<ExitCode, String> {
    if chunk == 0 || chunk > BLOCK_SIZE * 4 {
        return Err(format!("chunk must be 1..={}", BLOCK_SIZE * 4));
    }
    let mut cfg = BenchConfig::new(mode, size);
    cfg.chunk = chunk;
    cfg.rig.device.delay = Duration::from_millis(delay);
    print_json(&run_bench(&cfg).map_err(|e| e.to_string())?);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let r = match Cli::parse().cmd {
        Cmd::Mkfs { blocks, inodes, out } => cmd_mkfs(blocks, inodes, out),
        Cmd::Replica { listen, state } => serve::run(&listen, state).map(|()| ExitCode::SUCCESS),
        Cmd::Run {
            profile,
            delay,
            attack,
            attack_skip,
            untrusted_reads,
            no_memo,
            stencil_source,
            cache_pages,
            replica,
            iterations,
            seed,
        } => cmd_run(profile, delay, attack, attack_skip, untrusted_reads, no_memo, stencil_source, cache_pages, replica, iterations, seed),
        Cmd::Crashes { ops } => cmd_crashes(ops),
        Cmd::AuditStencil { image, profile } => cmd_audit(image, profile),
        Cmd::Bench { mode, size, chunk, delay } => cmd_bench(mode, size, chunk, delay),
    };
    r.unwrap_or_else(|e| {
        eprintln!("twinfs: {e}");
        ExitCode::FAILURE
    })
}
