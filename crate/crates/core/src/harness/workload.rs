//! Synthetic application profiles and the JSON run report.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{payload, RefFs};
use super::{Rig, RigConfig};
use crate::device::{Barrier, DeviceError, Fd, Trust};
use crate::minifs::layout::MAX_FILE_SIZE;
use crate::op::{OpenFlags, Whence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    /// New directory every few frames; fixed-length frames written by
    /// appends; recent frames read back.
    Camera,
    /// Small config scans, sequential wav writes, three fstat per round.
    Voice,
    /// Append a log, read it back sequentially, write a result file.
    Robot,
    StressSeq,
    StressRand,
}

impl Profile {
    pub const ALL: [Profile; 5] = [Profile::Camera, Profile::Voice, Profile::Robot, Profile::StressSeq, Profile::StressRand];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Camera => "camera",
            Profile::Voice => "voice",
            Profile::Robot => "robot",
            Profile::StressSeq => "stress-seq",
            Profile::StressRand => "stress-rand",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Profile::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| format!("unknown profile {s}"))
    }
}

#[derive(Clone, Debug)]
pub struct WorkloadParams {
    pub iterations: usize,
    /// Bytes per file (camera frame, wav, stress file). Capped at the
    /// filesystem's file size limit.
    pub file_size: usize,
    /// Bytes per write or read call.
    pub chunk: usize,
    /// Total bytes for stress-seq, spread over as many files as needed.
    pub total: usize,
    pub seed: u64,
}

impl WorkloadParams {
    pub fn for_profile(p: Profile) -> Self {
        let base = WorkloadParams { iterations: 20, file_size: 16 * 1024, chunk: 4096, total: 512 * 1024, seed: 1 };
        match p {
            Profile::Camera => base,
            Profile::Voice => WorkloadParams { iterations: 10, file_size: 32 * 1024, ..base },
            Profile::Robot => WorkloadParams { iterations: 64, chunk: 256, ..base },
            Profile::StressSeq => WorkloadParams { file_size: MAX_FILE_SIZE as usize, ..base },
            Profile::StressRand => WorkloadParams { iterations: 200, file_size: MAX_FILE_SIZE as usize, ..base },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub rig: RigConfig,
    pub profile: Profile,
    pub params: WorkloadParams,
    /// Open read-back files with UNTRUSTED and validate with a barrier.
    pub untrusted_reads: bool,
    /// Matching ops the attacker lets through before firing.
    pub attack_skip: usize,
    pub attack_count: usize,
}

impl RunConfig {
    pub fn new(profile: Profile) -> Self {
        RunConfig {
            rig: RigConfig::default(),
            profile,
            params: WorkloadParams::for_profile(profile),
            untrusted_reads: false,
            attack_skip: 0,
            attack_count: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    #[serde(rename = "match")]
    pub matched: u64,
    pub mismatch: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub p50: u64,
    pub p95: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Digests {
    pub device: String,
    pub replica: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub profile: String,
    pub delay_ms: u64,
    pub ops: u64,
    pub rpc_count: u64,
    pub verdicts: Verdicts,
    pub latency_us: Latency,
    pub taint_clean: bool,
    pub digests: Digests,
    pub latency_by_op: BTreeMap<String, Latency>,
    pub net_messages: u64,
    pub fsync_failures: u64,
    pub read_mismatches: u64,
    pub readback_ok: bool,
    pub attack: Option<String>,
    pub attack_fired: u64,
    pub attack_detected: bool,
    pub wall_us: u64,
    pub error: Option<String>,
}

impl Report {
    pub fn converged(&self) -> bool {
        self.digests.replica.as_deref().is_none_or(|r| r == self.digests.device)
    }
}

/// Nearest-rank percentile over microsecond samples.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn latency_of(samples: &[u64]) -> Latency {
    let mut s = samples.to_vec();
    s.sort_unstable();
    Latency { p50: percentile(&s, 0.50), p95: percentile(&s, 0.95) }
}

pub fn hex(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies client calls to the device and the reference model together,
/// timing each device call.
pub struct Driver<'a> {
    pub rig: &'a mut Rig,
    pub model: RefFs,
    fds: HashMap<Fd, u32>,
    lat: BTreeMap<&'static str, Vec<u64>>,
    rng: ChaCha8Rng,
    pub fsync_failures: u64,
    pub read_mismatches: u64,
}

impl<'a> Driver<'a> {
    pub fn new(rig: &'a mut Rig, seed: u64) -> Self {
        Driver {
            rig,
            model: RefFs::new(),
            fds: HashMap::new(),
            lat: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            fsync_failures: 0,
            read_mismatches: 0,
        }
    }

    fn timed<T>(&mut self, op: &'static str, f: impl FnOnce(&mut Rig) -> T) -> T {
        let t = Instant::now();
        let r = f(self.rig);
        self.lat.entry(op).or_default().push(t.elapsed().as_micros() as u64);
        r
    }

    pub fn samples(&self, op: &str) -> &[u64] {
        self.lat.get(op).map_or(&[], |v| v.as_slice())
    }

    pub fn ops(&self) -> u64 {
        self.lat.values().map(|v| v.len() as u64).sum()
    }

    pub fn mkdir(&mut self, path: &str) -> Result<(), DeviceError> {
        let fd = self.timed("mkdir", |r| r.device.mkdir(path))?;
        self.rig.device.close(fd)
    }

    pub fn open(&mut self, path: &str, flags: OpenFlags) -> Result<Fd, DeviceError> {
        let fd = self.timed("open", |r| r.device.open(path, flags))?;
        let create = flags.contains(OpenFlags::CREATE);
        let trunc = flags.contains(OpenFlags::TRUNC);
        let m = self.model.open(path, create, trunc).ok_or_else(|| DeviceError::Protocol(format!("model has no {path}")))?;
        self.fds.insert(fd, m);
        Ok(fd)
    }

    /// Writes `len` fresh high-entropy bytes.
    pub fn write(&mut self, fd: Fd, len: usize) -> Result<usize, DeviceError> {
        let data = payload(self.rng.gen(), len);
        self.rig.scanner.register(&data);
        let n = self.timed("write", |r| r.device.write(fd, &data))?;
        self.model.write(self.fds[&fd], &data[..n]);
        // Staged records for this write may now sit at the replica.
        self.rig.scan_replica();
        Ok(n)
    }

    pub fn read(&mut self, fd: Fd, len: usize) -> Result<(usize, Trust), DeviceError> {
        let (got, trust) = self.timed("read", |r| r.device.read(fd, len))?;
        let want = self.model.read(self.fds[&fd], len).unwrap_or_default();
        if got != want {
            self.read_mismatches += 1;
        }
        Ok((got.len(), trust))
    }

    pub fn lseek(&mut self, fd: Fd, off: i64, whence: Whence) -> Result<u64, DeviceError> {
        let p = self.timed("lseek", |r| r.device.lseek(fd, off, whence))?;
        self.model.lseek(self.fds[&fd], off, whence);
        Ok(p)
    }

    pub fn fstat(&mut self, fd: Fd) -> Result<u64, DeviceError> {
        self.timed("fstat", |r| r.device.fstat(fd))
    }

    /// Failed validations are counted, not propagated.
    pub fn fsync(&mut self, fd: Fd) -> Result<(), DeviceError> {
        match self.timed("fsync", |r| r.device.fsync(fd)) {
            Err(DeviceError::VerificationFailed(_)) => {
                self.fsync_failures += 1;
                Ok(())
            }
            r => r,
        }
    }

    pub fn barrier(&mut self, fd: Fd) -> Result<Barrier, DeviceError> {
        self.timed("select", |r| r.device.select_validate(fd))
    }

    pub fn close(&mut self, fd: Fd) -> Result<(), DeviceError> {
        self.timed("close", |r| r.device.close(fd))?;
        if let Some(m) = self.fds.remove(&fd) {
            self.model.close(m);
        }
        Ok(())
    }

    pub fn evict(&mut self) -> Result<(), DeviceError> {
        self.rig.device.evict_cache()
    }

    fn latency_by_op(&self) -> BTreeMap<String, Latency> {
        self.lat.iter().map(|(k, v)| (k.to_string(), latency_of(v))).collect()
    }

    fn all_samples(&self) -> Vec<u64> {
        self.lat.values().flatten().copied().collect()
    }
}

fn read_flags(untrusted: bool) -> OpenFlags {
    if untrusted {
        OpenFlags::UNTRUSTED
    } else {
        OpenFlags::empty()
    }
}

fn append_file(d: &mut Driver, path: &str, size: usize, chunk: usize) -> Result<(), DeviceError> {
    let fd = d.open(path, OpenFlags::CREATE | OpenFlags::TRUNC)?;
    let mut left = size;
    while left > 0 {
        let n = left.min(chunk);
        d.write(fd, n)?;
        left -= n;
    }
    d.fsync(fd)?;
    d.close(fd)
}

/// Reads every file in `paths` with one open per file; untrusted mode
/// validates all of them with a single barrier round at the end.
fn read_back(d: &mut Driver, paths: &[String], chunk: usize, untrusted: bool) -> Result<(), DeviceError> {
    let mut open = Vec::new();
    for p in paths {
        let fd = d.open(p, read_flags(untrusted))?;
        while d.read(fd, chunk)?.0 > 0 {}
        open.push(fd);
    }
    for fd in open {
        if untrusted && d.barrier(fd)? != Barrier::AllMatch {
            d.read_mismatches += 1;
        }
        d.close(fd)?;
    }
    Ok(())
}

fn camera(d: &mut Driver, p: &WorkloadParams, untrusted: bool) -> Result<(), DeviceError> {
    const DIR_EVERY: usize = 5;
    const RECENT: usize = 3;
    let mut frames = Vec::new();
    for i in 0..p.iterations {
        if i % DIR_EVERY == 0 {
            d.mkdir(&format!("cam{}", i / DIR_EVERY))?;
        }
        let path = format!("cam{}/frame{i}.raw", i / DIR_EVERY);
        append_file(d, &path, p.file_size, p.chunk)?;
        frames.push(path);
        // Preview pass over recent frames after memory pressure.
        d.evict()?;
        let start = frames.len().saturating_sub(RECENT);
        let recent = frames[start..].to_vec();
        read_back(d, &recent, p.file_size, untrusted)?;
    }
    Ok(())
}

fn voice(d: &mut Driver, p: &WorkloadParams, untrusted: bool) -> Result<(), DeviceError> {
    const CONFIGS: usize = 4;
    d.mkdir("voice")?;
    let cfgs: Vec<String> = (0..CONFIGS).map(|k| format!("voice/cfg{k}")).collect();
    for c in &cfgs {
        append_file(d, c, 48, 48)?;
    }
    for i in 0..p.iterations {
        read_back(d, &cfgs, 4096, untrusted)?;
        let fd = d.open(&format!("voice/rec{i}.wav"), OpenFlags::CREATE)?;
        let mut left = p.file_size;
        while left > 0 {
            let n = left.min(p.chunk);
            d.write(fd, n)?;
            left -= n;
            if left == 0 || left.is_multiple_of(4 * p.chunk) {
                for _ in 0..3 {
                    d.fstat(fd)?;
                }
            }
        }
        d.fsync(fd)?;
        d.close(fd)?;
    }
    Ok(())
}

fn robot(d: &mut Driver, p: &WorkloadParams, untrusted: bool) -> Result<(), DeviceError> {
    let log = d.open("robot.log", OpenFlags::CREATE)?;
    for i in 0..p.iterations {
        d.write(log, p.chunk)?;
        if i % 16 == 15 {
            d.fsync(log)?;
        }
    }
    d.fsync(log)?;
    d.close(log)?;
    read_back(d, &["robot.log".to_string()], 4096, untrusted)?;
    append_file(d, "robot.out", 4 * 4096, 4096)
}

fn stress_seq(d: &mut Driver, p: &WorkloadParams, untrusted: bool) -> Result<(), DeviceError> {
    let per_file = p.file_size.min(MAX_FILE_SIZE as usize);
    let mut paths = Vec::new();
    let mut left = p.total;
    while left > 0 {
        let n = left.min(per_file);
        let path = format!("seq{}.bin", paths.len());
        append_file(d, &path, n, p.chunk)?;
        paths.push(path);
        left -= n;
    }
    d.evict()?;
    read_back(d, &paths, p.chunk, untrusted)
}

fn stress_rand(d: &mut Driver, p: &WorkloadParams, untrusted: bool) -> Result<(), DeviceError> {
    const FILES: usize = 4;
    let size = p.file_size.min(MAX_FILE_SIZE as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed);
    let mut fds = Vec::new();
    for k in 0..FILES {
        let path = format!("rand{k}.bin");
        append_file(d, &path, size, p.chunk)?;
        fds.push(d.open(&path, read_flags(untrusted))?);
    }
    for i in 0..p.iterations {
        let fd = fds[rng.gen_range(0..FILES)];
        let len = rng.gen_range(1..=p.chunk);
        let off = rng.gen_range(0..=size - len) as i64;
        d.lseek(fd, off, Whence::Set)?;
        if rng.gen_bool(0.5) {
            d.write(fd, len)?;
        } else {
            d.read(fd, len)?;
        }
        if i % 32 == 31 {
            d.evict()?;
        }
    }
    for fd in fds {
        if untrusted && d.barrier(fd)? != Barrier::AllMatch {
            d.read_mismatches += 1;
        }
        d.fsync(fd)?;
        d.close(fd)?;
    }
    Ok(())
}

/// Runs the body of `profile` on an existing rig.
pub fn drive(d: &mut Driver, profile: Profile, p: &WorkloadParams, untrusted: bool) -> Result<(), DeviceError> {
    match profile {
        Profile::Camera => camera(d, p, untrusted),
        Profile::Voice => voice(d, p, untrusted),
        Profile::Robot => robot(d, p, untrusted),
        Profile::StressSeq => stress_seq(d, p, untrusted),
        Profile::StressRand => stress_rand(d, p, untrusted),
    }
}

/// Every model file must read back byte for byte.
fn verify_read_back(rig: &mut Rig, model: &RefFs) -> Result<bool, DeviceError> {
    rig.device.evict_cache()?;
    for (path, want) in model.files() {
        let fd = rig.device.open(path, OpenFlags::empty())?;
        let (got, _) = rig.device.read(fd, want.len() + 1)?;
        rig.device.close(fd)?;
        if got != want {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn run_workload(cfg: &RunConfig) -> Result<Report, DeviceError> {
    let mut rig = Rig::new(cfg.rig.clone())?;
    if let Some(h) = &rig.attack {
        h.arm(cfg.attack_skip, cfg.attack_count);
    }
    let base = rig.device.counters();
    let start = Instant::now();
    let mut d = Driver::new(&mut rig, cfg.params.seed);
    let outcome = drive(&mut d, cfg.profile, &cfg.params, cfg.untrusted_reads);
    let wall_us = start.elapsed().as_micros() as u64;
    let (model, ops, all, by_op, fsync_failures, read_mismatches) =
        (d.model.clone(), d.ops(), d.all_samples(), d.latency_by_op(), d.fsync_failures, d.read_mismatches);
    if let Some(h) = &rig.attack {
        h.disarm();
    }
    let mut error = outcome.err().map(|e| e.to_string());
    let settle = rig.device.quiesce();
    if error.is_none() {
        error = settle.err().map(|e| e.to_string());
    }
    let readback_ok = error.is_none() && verify_read_back(&mut rig, &model).unwrap_or(false);
    let _ = rig.device.quiesce();
    let hits = rig.scan_replica();
    let c = rig.device.counters();
    let detected = rig.detections() > 0 || fsync_failures > 0;
    Ok(Report {
        profile: cfg.profile.name().to_string(),
        delay_ms: cfg.rig.device.delay.as_millis() as u64,
        ops,
        rpc_count: c.fileop_rpcs - base.fileop_rpcs,
        verdicts: Verdicts {
            matched: c.matches - base.matches,
            mismatch: c.mismatches + c.local_rejects + c.cloud_rejects - base.mismatches - base.local_rejects - base.cloud_rejects,
        },
        latency_us: latency_of(&all),
        taint_clean: rig.scanner.hits() == 0 && hits == 0,
        digests: Digests { device: hex(&rig.device.metadata_digest()), replica: rig.replica_digest().map(|d| hex(&d)) },
        latency_by_op: by_op,
        net_messages: c.net_messages - base.net_messages,
        fsync_failures,
        read_mismatches,
        readback_ok,
        attack: rig.attack.as_ref().map(|h| h.kind().name().to_string()),
        attack_fired: rig.attack.as_ref().map_or(0, |h| h.fired() as u64),
        attack_detected: detected,
        wall_us,
        error,
    })
}
