//! iozone-style throughput runs, each paired with a run that bypasses the
//! stencil gate.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::oracle::payload;
use super::{Rig, RigConfig};
use crate::device::{DeviceError, Fd};
use crate::minifs::layout::MAX_FILE_SIZE;
use crate::op::{OpenFlags, Whence};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    SeqWrite,
    SeqRead,
    RandWrite,
    RandRead,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [BenchMode::SeqWrite, BenchMode::SeqRead, BenchMode::RandWrite, BenchMode::RandRead];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::SeqWrite => "seq-write",
            BenchMode::SeqRead => "seq-read",
            BenchMode::RandWrite => "rand-write",
            BenchMode::RandRead => "rand-read",
        }
    }

    fn is_write(self) -> bool {
        matches!(self, BenchMode::SeqWrite | BenchMode::RandWrite)
    }

    fn is_rand(self) -> bool {
        matches!(self, BenchMode::RandWrite | BenchMode::RandRead)
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        BenchMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown bench mode {s}"))
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mode: BenchMode,
    /// Total bytes, spread over files of at most the size limit.
    pub size: usize,
    pub chunk: usize,
    pub rig: RigConfig,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(mode: BenchMode, size: usize) -> Self {
        BenchConfig { mode, size, chunk: 4096, rig: RigConfig::default(), seed: 7 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Throughput {
    pub elapsed_us: u64,
    pub mb_per_s: f64,
    pub rpc_count: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchResult {
    pub mode: String,
    pub size: usize,
    pub gated: Throughput,
    pub ungated: Throughput,
    /// Throughput lost to the gate, in percent of the ungated run.
    pub gate_overhead_pct: f64,
}

/// `(file index, offset)` for every chunk, in access order.
fn plan(cfg: &BenchConfig) -> Vec<(usize, u64)> {
    let per_file = (MAX_FILE_SIZE as usize / cfg.chunk) * cfg.chunk;
    let mut out = Vec::new();
    let mut left = cfg.size;
    let mut file = 0;
    while left > 0 {
        let n = left.min(per_file);
        let mut off = 0;
        while off < n {
            out.push((file, off as u64));
            off += cfg.chunk;
        }
        left -= n;
        file += 1;
    }
    if cfg.mode.is_rand() {
        out.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    }
    out
}

fn one(cfg: &BenchConfig, gate: bool) -> Result<Throughput, DeviceError> {
    let mut rc = cfg.rig.clone();
    rc.device.stencil_gate = gate;
    let mut rig = Rig::new(rc)?;
    let plan = plan(cfg);
    let files = plan.iter().map(|p| p.0).max().map_or(0, |m| m + 1);
    let data = payload(cfg.seed, cfg.chunk);
    let mut fds: Vec<Fd> = Vec::new();
    for i in 0..files {
        fds.push(rig.device.open(&format!("bench{i}"), OpenFlags::CREATE)?);
    }
    let d = &mut rig.device;
    if !cfg.mode.is_write() {
        // Lay the files down sequentially first; only the reads are timed.
        for &fd in &fds {
            d.lseek(fd, 0, Whence::Set)?;
        }
        let mut seq = plan.clone();
        seq.sort_unstable();
        for &(f, off) in &seq {
            d.lseek(fds[f], off as i64, Whence::Set)?;
            d.write(fds[f], &data)?;
        }
        for &fd in &fds {
            d.fsync(fd)?;
        }
        d.evict_cache()?;
    }
    let rpcs = d.counters().fileop_rpcs;
    let t = Instant::now();
    for &(f, off) in &plan {
        d.lseek(fds[f], off as i64, Whence::Set)?;
        if cfg.mode.is_write() {
            d.write(fds[f], &data)?;
        } else {
            d.read(fds[f], cfg.chunk)?;
        }
    }
    for &fd in &fds {
        d.fsync(fd)?;
    }
    let elapsed = t.elapsed().max(Duration::from_micros(1));
    Ok(Throughput {
        elapsed_us: elapsed.as_micros() as u64,
        mb_per_s: cfg.size as f64 / (1024.0 * 1024.0) / elapsed.as_secs_f64(),
        rpc_count: d.counters().fileop_rpcs - rpcs,
    })
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchResult, DeviceError> {
    let gated = one(cfg, true)?;
    let ungated = one(cfg, false)?;
    let gate_overhead_pct = if ungated.mb_per_s > 0.0 { (1.0 - gated.mb_per_s / ungated.mb_per_s) * 100.0 } else { 0.0 };
    Ok(BenchResult { mode: cfg.mode.name().into(), size: cfg.size, gated, ungated, gate_overhead_pct })
}
