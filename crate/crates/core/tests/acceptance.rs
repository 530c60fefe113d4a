//! Acceptance criteria. Runs as a plain binary so the nine result lines are
//! always printed; exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twinfs::blockstore::{Block, BlockId, BLOCK_SIZE};
use twinfs::device::{DeviceError, StencilSource};
use twinfs::harness::crashes::explore_crashes;
use twinfs::harness::oracle::{apply_device_step, payload, random_steps, run_against_model, Step};
use twinfs::harness::workload::{latency_of, run_workload, Profile, RunConfig};
use twinfs::harness::{AttackKind, Rig, RigConfig};
use twinfs::minifs::{layout::Superblock, mkfs};
use twinfs::op::{BlockRequest, FileOp, NameToken, OpError, OpKind, OpenFlags, Whence, MAX_RESULT_VALUE};
use twinfs::stencil::{BlockClass, StencilDelta};
use twinfs::wire::channel::{to_frames, ChannelFrame, ChannelMsg, Direction, FrameKind, Reassembler, FRAME_SIZE};
use twinfs::wire::net::{NetBody, NetMessage};

const DELAY: Duration = Duration::from_millis(50);

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_oracle_equivalence() -> Outcome {
    const SEQUENCES: u64 = 1000;
    const STEPS: usize = 40;
    let t = Instant::now();
    for seed in 0..SEQUENCES {
        let mut rig = Rig::new(RigConfig::default()).map_err(|e| format!("seed {seed}: {e}"))?;
        let steps = random_steps(&mut ChaCha8Rng::seed_from_u64(seed), STEPS);
        run_against_model(&mut rig.device, &steps, |_| {}).map_err(|d| format!("seed {seed} step {}: {}", d.step, d.what))?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s, limit 60 s"))?;
    Ok(format!("{SEQUENCES} sequences x {STEPS} steps identical to the reference map in {secs:.1} s"))
}

/// One injected attack. Every step is settled before the next so the
/// digest taken before a step is the last validated state.
fn attack_instance(kind: AttackKind, seed: u64) -> Result<(), String> {
    let mut cfg = RigConfig::default();
    cfg.device.memo = false;
    cfg.attack = Some(kind);
    let mut rig = Rig::new(cfg).map_err(|e| e.to_string())?;
    let h = rig.attack.clone().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77ac4);
    h.arm(rng.gen_range(0..6), 1);
    let steps = random_steps(&mut rng, 150);
    let mut slots = Vec::new();
    for s in &steps {
        rig.device.quiesce().map_err(|e| format!("settle before attack: {e}"))?;
        if matches!(s, Step::Read { .. }) {
            rig.device.evict_cache().map_err(|e| e.to_string())?;
        }
        let validated = rig.device.store_digest();
        let seen = rig.detections();
        let r = apply_device_step(&mut rig.device, &mut slots, s);
        let settled = rig.device.quiesce();
        if h.fired() == 0 {
            match r {
                Ok(()) | Err(DeviceError::Op(_)) => continue,
                Err(e) => return Err(format!("honest step failed: {e}")),
            }
        }
        let caught = rig.detections() > seen || matches!(r, Err(DeviceError::VerificationFailed(_))) || settled.is_err();
        ensure(caught, || format!("{s:?} accepted"))?;
        ensure(rig.device.store_digest() == validated, || format!("{s:?}: store differs from last validated state"))?;
        return Ok(());
    }
    Err("no matching op to attack".into())
}

fn c2_attack_detection() -> Outcome {
    const POINTS: u64 = 50;
    let mut detail = Vec::new();
    for kind in AttackKind::ALL {
        let mut caught = 0;
        for seed in 0..POINTS {
            attack_instance(kind, seed).map_err(|e| format!("{kind} seed {seed}: {e}"))?;
            caught += 1;
        }
        detail.push(format!("{kind} {caught}/{POINTS}"));
    }
    Ok(detail.join(", "))
}

fn c3_taint() -> Outcome {
    let mut runs = 0;
    let mut scanned = 0;
    for profile in Profile::ALL {
        for source in [StencilSource::Device, StencilSource::Cloud] {
            for untrusted in [false, true] {
                let mut cfg = RunConfig::new(profile);
                cfg.rig.device.stencil_source = source;
                cfg.untrusted_reads = untrusted;
                let r = run_workload(&cfg).map_err(|e| format!("{profile}: {e}"))?;
                let tag = format!("{profile} {source:?} untrusted={untrusted}");
                ensure(r.error.is_none(), || format!("{tag}: {:?}", r.error))?;
                ensure(r.taint_clean, || format!("{tag}: payload bytes crossed the boundary"))?;
                ensure(r.readback_ok, || format!("{tag}: read-back differs"))?;
                runs += 1;
                scanned += r.net_messages;
            }
        }
    }
    Ok(format!("{runs} runs, 0 payload hits across channel frames, {scanned} network messages and replica state"))
}

fn c4_convergence() -> Outcome {
    let r = explore_crashes(6);
    ensure(r.failures.is_empty(), || {
        let f = &r.failures[0];
        format!("{} failures, first: log {} op {} {}: {}", r.failures.len(), f.log, f.at_op, f.point, f.reason)
    })?;
    ensure(r.cases == 5 * (1..=6).map(|n| n * 3usize.pow(n as u32)).sum::<usize>(), || format!("{} cases", r.cases))?;
    let secs = r.elapsed_ms as f64 / 1000.0;
    ensure(secs < 120.0, || format!("took {secs:.1} s, limit 120 s"))?;
    Ok(format!("{} logs, {}/{} cases converged in {secs:.1} s", r.logs, r.converged, r.cases))
}

/// Writes `total` bytes over files of at most 48 KiB, evicts the cache and
/// times a sequential read-back. Returns (read-back time, verifier RPCs
/// during read-back).
fn read_back_run(memo: bool, total: usize) -> Result<(Duration, u64), String> {
    let mut cfg = RigConfig::default();
    cfg.device.memo = memo;
    cfg.device.delay = DELAY;
    let mut rig = Rig::new(cfg).map_err(|e| e.to_string())?;
    let d = &mut rig.device;
    let per_file = 48 * 1024;
    let mut fds = Vec::new();
    let mut left = total;
    let mut seed = 0;
    while left > 0 {
        let fd = d.open(&format!("big{}", fds.len()), OpenFlags::CREATE).map_err(|e| e.to_string())?;
        let n = left.min(per_file);
        for off in (0..n).step_by(4096) {
            seed += 1;
            d.write(fd, &payload(seed, 4096.min(n - off))).map_err(|e| e.to_string())?;
        }
        d.fsync(fd).map_err(|e| e.to_string())?;
        fds.push(fd);
        left -= n;
    }
    d.evict_cache().map_err(|e| e.to_string())?;
    for &fd in &fds {
        d.lseek(fd, 0, Whence::Set).map_err(|e| e.to_string())?;
    }
    let rpcs = d.counters().fileop_rpcs;
    let t = Instant::now();
    let mut got = 0;
    for &fd in &fds {
        loop {
            let (b, _) = d.read(fd, 16 * 1024).map_err(|e| e.to_string())?;
            if b.is_empty() {
                break;
            }
            got += b.len();
        }
    }
    let took = t.elapsed();
    ensure(got == total, || format!("read back {got} of {total} bytes"))?;
    Ok((took, d.counters().fileop_rpcs - rpcs))
}

fn c5_memoization() -> Outcome {
    const TOTAL: usize = 512 * 1024;
    let (memo_t, memo_rpcs) = read_back_run(true, TOTAL)?;
    let (plain_t, plain_rpcs) = read_back_run(false, TOTAL)?;
    ensure(memo_rpcs == 0, || format!("{memo_rpcs} verifier round trips with memoization"))?;
    let ratio = plain_t.as_secs_f64() / memo_t.as_secs_f64().max(1e-6);
    ensure(ratio >= 10.0, || format!("speedup {ratio:.1}x, need 10x"))?;
    Ok(format!(
        "read-back RPCs {memo_rpcs} (vs {plain_rpcs}); {:.1} ms vs {:.1} ms, {ratio:.0}x",
        memo_t.as_secs_f64() * 1e3,
        plain_t.as_secs_f64() * 1e3
    ))
}

fn c6_async_writes() -> Outcome {
    let mut cfg = RigConfig::default();
    cfg.device.delay = DELAY;
    let mut rig = Rig::new(cfg).map_err(|e| e.to_string())?;
    let d = &mut rig.device;
    let (mut writes, mut fstats, mut fsyncs) = (Vec::new(), Vec::new(), Vec::new());
    let us = |t: Instant| t.elapsed().as_micros() as u64;
    for f in 0..4 {
        let fd = d.open(&format!("w{f}"), OpenFlags::CREATE).map_err(|e| e.to_string())?;
        for i in 0..11u64 {
            let data = payload(f * 100 + i, 4096);
            let t = Instant::now();
            d.write(fd, &data).map_err(|e| e.to_string())?;
            writes.push(us(t));
        }
        for _ in 0..3 {
            let t = Instant::now();
            d.fstat(fd).map_err(|e| e.to_string())?;
            fstats.push(us(t));
        }
        d.write(fd, b"tail").map_err(|e| e.to_string())?;
        let t = Instant::now();
        d.fsync(fd).map_err(|e| e.to_string())?;
        fsyncs.push(us(t));
    }
    let w = latency_of(&writes);
    let s = latency_of(&fstats);
    let min_fsync = *fsyncs.iter().min().unwrap();
    ensure(w.p95 < 5_000, || format!("write p95 {} us", w.p95))?;
    ensure(s.p50 >= 50_000, || format!("fstat p50 {} us", s.p50))?;
    ensure(min_fsync >= 50_000, || format!("fsync min {min_fsync} us"))?;
    Ok(format!("write p95 {} us, fstat p50 {} us, fsync min {} us at 50 ms delay", w.p95, s.p50, min_fsync))
}

fn c7_space() -> Outcome {
    const BLOCKS: u32 = 1 << 20;
    let full = BLOCKS as u64 * BLOCK_SIZE as u64;
    let mut detail = Vec::new();
    // The replica geometry used for sizing, and an ext2-style dense inode
    // table (one inode per 16 KiB).
    for inodes in [8192u32, BLOCKS / 4] {
        let sb = Superblock::layout(BLOCKS, inodes).map_err(|e| e.to_string())?;
        let region = sb.metadata_region_bytes();
        let expect = (1 + BLOCKS.div_ceil(32768) + inodes.div_ceil(32768) + (inodes * 128).div_ceil(4096)) as u64 * 4096;
        ensure(region == expect, || format!("region {region} != layout arithmetic {expect}"))?;
        let pct = region as f64 * 100.0 / full as f64;
        ensure(pct <= 1.6, || format!("{inodes} inodes: export is {pct:.3}% of the image"))?;
        let (_, meta) = mkfs(BLOCKS, inodes).map_err(|e| e.to_string())?;
        ensure((meta.stored_blocks() as u64) * (BLOCK_SIZE as u64) <= region, || "export exceeds region".into())?;
        detail.push(format!("{inodes} inodes: {:.2} MiB = {pct:.3}%", region as f64 / (1 << 20) as f64));
    }
    Ok(format!("4 GiB image; metadata export {}", detail.join("; ")))
}

fn c8_emergency() -> Outcome {
    let mut rig = Rig::new(RigConfig::default()).map_err(|e| e.to_string())?;
    let extent = rig.device.emergency_extent().len() * BLOCK_SIZE;
    ensure(extent > 0, || "no emergency extent".into())?;
    let data = payload(0xe11e, extent);
    rig.device.sever();
    let before = rig.device.counters();
    let n = rig.device.emergency_write(0, &data).map_err(|e| e.to_string())?;
    let back = rig.device.emergency_read(0, extent).map_err(|e| e.to_string())?;
    let after = rig.device.counters();
    ensure(n == extent && back == data, || "emergency data differs".into())?;
    let rpcs = (after.fileop_rpcs - before.fileop_rpcs) + (after.net_messages - before.net_messages);
    ensure(rpcs == 0, || format!("{rpcs} messages while severed"))?;
    ensure(rig.device.emergency_write(1, &data) == Err(DeviceError::OutOfRange), || "write past extent accepted".into())?;
    let mut rig = rig.restart().map_err(|e| format!("restart: {e}"))?;
    let before = rig.device.counters();
    let again = rig.device.emergency_read(0, extent).map_err(|e| e.to_string())?;
    ensure(again == data, || "emergency data lost across restart".into())?;
    ensure(rig.device.counters().net_messages == before.net_messages, || "read after restart used the network".into())?;
    Ok(format!("{extent} bytes written and read with 0 RPCs; intact after restart"))
}

fn random_op(r: &mut ChaCha8Rng) -> FileOp {
    let kinds = [OpKind::Open, OpKind::Read, OpKind::Write, OpKind::Fsync, OpKind::Close, OpKind::Lseek, OpKind::Fstat];
    let mut name = [0u8; 16];
    r.fill_bytes(&mut name);
    FileOp { kind: kinds[r.gen_range(0..7)], fd: r.gen(), flags: OpenFlags(r.gen()), count: r.gen(), name: NameToken(name) }
}

fn random_trace(r: &mut ChaCha8Rng, max: usize) -> Vec<BlockRequest> {
    let n = if r.gen_bool(0.05) { r.gen_range(1000..2500) } else { r.gen_range(0..max) };
    (0..n)
        .map(|_| {
            let b = r.gen_range(0..1u32 << 31);
            if r.gen() {
                BlockRequest::write(b)
            } else {
                BlockRequest::read(b)
            }
        })
        .collect()
}

fn random_result(r: &mut ChaCha8Rng) -> Result<u32, OpError> {
    if r.gen_bool(0.8) {
        Ok(r.gen_range(0..=MAX_RESULT_VALUE))
    } else {
        Err(OpError::from_code(r.gen_range(1..=8)).unwrap())
    }
}

fn random_delta(r: &mut ChaCha8Rng) -> Option<StencilDelta> {
    if r.gen() {
        return None;
    }
    let entries = (0..r.gen_range(0..6))
        .map(|_| {
            let class = match r.gen_range(0..4) {
                0 => BlockClass::Unused,
                1 => BlockClass::FullMetadata,
                2 => BlockClass::FullData,
                _ => {
                    let mut at = 0u16;
                    let mut ranges = Vec::new();
                    for _ in 0..r.gen_range(0..5) {
                        let s = at + r.gen_range(1..200);
                        let e = s + r.gen_range(1..200);
                        if e as usize > BLOCK_SIZE {
                            break;
                        }
                        ranges.push(s..e);
                        at = e;
                    }
                    BlockClass::Mixed(ranges)
                }
            };
            (BlockId(r.gen()), class)
        })
        .collect();
    Some(StencilDelta { entries })
}

fn random_net(r: &mut ChaCha8Rng) -> NetMessage {
    let body = match r.gen_range(0..7) {
        0 => {
            let mut image = vec![0u8; r.gen_range(0..300)];
            r.fill_bytes(&mut image);
            NetBody::Hello { version: r.gen(), device_id: r.gen(), flags: r.gen(), image }
        }
        1 => NetBody::FileOp(random_op(r)),
        2 => NetBody::TraceResp { ok: r.gen(), trace: random_trace(r, 20), result: random_result(r), stencil: random_delta(r) },
        3 => NetBody::Commit,
        4 => NetBody::Abort { through: r.gen() },
        5 => NetBody::Ack { committed: r.gen(), applied: r.gen(), stencil: random_delta(r) },
        _ => {
            let n = r.gen_range(0..40);
            NetBody::Error { code: r.gen(), message: (0..n).map(|_| r.gen_range(' '..='~')).collect() }
        }
    };
    NetMessage::new(r.gen(), body)
}

fn random_block(r: &mut ChaCha8Rng) -> Block {
    let mut b = Block::zeroed();
    r.fill_bytes(b.as_mut_bytes());
    b
}

fn random_channel(r: &mut ChaCha8Rng) -> (Direction, ChannelMsg) {
    match r.gen_range(0..7) {
        0 => (Direction::ToTwin, ChannelMsg::Op(random_op(r))),
        1 => (Direction::ToTwin, ChannelMsg::MetaReadResp(random_block(r))),
        2 => (Direction::ToTwin, ChannelMsg::MetaWriteResp),
        3 => (Direction::ToTwin, ChannelMsg::Reject(BlockId(r.gen()))),
        4 => (Direction::ToDevice, ChannelMsg::Done { result: r.gen(), trace: random_trace(r, 30) }),
        5 => (Direction::ToDevice, ChannelMsg::MetaReadReq(BlockId(r.gen()))),
        _ => (Direction::ToDevice, ChannelMsg::MetaWriteReq(BlockId(r.gen()), random_block(r))),
    }
}

/// `(name, bytes)` for every `hex` block in PROTOCOL.md.
fn golden_vectors() -> Result<Vec<(String, Vec<u8>)>, String> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../PROTOCOL.md");
    let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
    let mut out = Vec::new();
    let mut lines = text.lines();
    while let Some(l) = lines.next() {
        let Some(name) = l.strip_prefix("```hex ") else { continue };
        let mut hex = String::new();
        for body in lines.by_ref() {
            if body.starts_with("```") {
                break;
            }
            hex.extend(body.chars().filter(|c| !c.is_whitespace()));
        }
        if !hex.len().is_multiple_of(2) {
            return Err(format!("{name}: odd hex length"));
        }
        let bytes = (0..hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).map_err(|_| format!("{name}: bad hex")))
            .collect::<Result<Vec<u8>, _>>()?;
        out.push((name.trim().to_string(), bytes));
    }
    Ok(out)
}

fn expected_net(name: &str) -> Option<NetMessage> {
    let m = |seq, body| Some(NetMessage::new(seq, body));
    match name {
        "net/hello" => m(0, NetBody::Hello { version: 1, device_id: 7, flags: 1, image: vec![0xde, 0xad] }),
        "net/fileop-write" => m(5, NetBody::FileOp(FileOp::write(3, 4096))),
        "net/trace-resp" => m(5, NetBody::TraceResp { ok: true, trace: vec![BlockRequest::write(4)], result: Ok(4096), stencil: None }),
        "net/trace-resp-stencil" => m(
            9,
            NetBody::TraceResp {
                ok: false,
                trace: vec![],
                result: Err(OpError::NoSpace),
                stencil: Some(StencilDelta {
                    entries: vec![(BlockId(3), BlockClass::Mixed(vec![0..64, 100..128])), (BlockId(10), BlockClass::FullData)],
                }),
            },
        ),
        "net/commit" => m(12, NetBody::Commit),
        "net/abort" => m(6, NetBody::Abort { through: 8 }),
        "net/ack" => m(12, NetBody::Ack { committed: 12, applied: 14, stencil: None }),
        "net/error" => m(3, NetBody::Error { code: 1, message: "seq gap".into() }),
        _ => None,
    }
}

fn expected_frame(name: &str) -> Option<ChannelFrame> {
    let f = |kind, seq, payload: Vec<u8>| Some(ChannelFrame { kind, seq, payload });
    let open = FileOp::open(4, u64::MAX, NameToken([0x11; 16]), OpenFlags::CREATE);
    match name {
        "frame/op-open" => f(FrameKind::FileOp, 1, twinfs::wire::encode_fileop(&open).to_vec()),
        "frame/done" => f(FrameKind::FileOp, 2, [4096u32.to_le_bytes(), 2u32.to_le_bytes()].concat()),
        "frame/trace" => f(FrameKind::Trace, 2, [(4u32 | 1 << 31).to_le_bytes(), 7u32.to_le_bytes()].concat()),
        "frame/meta-read-req" => f(FrameKind::MetaReadReq, 2, 3u32.to_le_bytes().to_vec()),
        "frame/meta-write-resp" => f(FrameKind::MetaWriteResp, 2, vec![]),
        "frame/reject" => f(FrameKind::Reject, 2, 9u32.to_le_bytes().to_vec()),
        _ => None,
    }
}

fn c9_wire() -> Outcome {
    const MESSAGES: usize = 10_000;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut frames = 0;
    for i in 0..MESSAGES {
        let m = random_net(&mut r);
        let back = NetMessage::decode(&m.encode()).map_err(|e| format!("net #{i}: {e}"))?;
        ensure(back == m, || format!("net #{i} changed in round trip"))?;
        let (dir, msg) = random_channel(&mut r);
        let seq = r.gen();
        let mut re = Reassembler::new(dir);
        let mut result = None;
        for f in to_frames(seq, &msg) {
            let raw = f.encode();
            ensure(raw.len() == FRAME_SIZE, || format!("frame of {} bytes", raw.len()))?;
            frames += 1;
            let dec = ChannelFrame::decode(&raw[..]).map_err(|e| format!("channel #{i}: {e}"))?;
            result = re.push(dec).map_err(|e| format!("channel #{i}: {e}"))?;
        }
        ensure(result == Some((seq, msg)), || format!("channel #{i} changed in round trip"))?;
    }
    let golden = golden_vectors()?;
    ensure(golden.len() >= 14, || format!("only {} golden vectors", golden.len()))?;
    for (name, bytes) in &golden {
        if let Some(want) = expected_net(name) {
            let got = NetMessage::decode(bytes).map_err(|e| format!("{name}: {e}"))?;
            ensure(got == want, || format!("{name}: decoded {got:?}"))?;
            ensure(&got.encode() == bytes, || format!("{name}: re-encoding differs"))?;
        } else if let Some(want) = expected_frame(name) {
            let mut raw = bytes.clone();
            raw.resize(FRAME_SIZE, 0);
            let got = ChannelFrame::decode(&raw).map_err(|e| format!("{name}: {e}"))?;
            ensure(got == want, || format!("{name}: decoded {got:?}"))?;
            ensure(got.encode()[..] == raw[..], || format!("{name}: re-encoding differs"))?;
        } else {
            return Err(format!("no expectation for golden vector {name}"));
        }
    }
    Ok(format!("{MESSAGES} net + {MESSAGES} channel messages round-trip, {frames} frames all 4096 B, {} golden vectors exact", golden.len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        ("oracle equivalence", c1_oracle_equivalence),
        ("attack detection", c2_attack_detection),
        ("confidentiality taint", c3_taint),
        ("2PC convergence", c4_convergence),
        ("memoization RPC elimination", c5_memoization),
        ("async-write delay hiding", c6_async_writes),
        ("replica space efficiency", c7_space),
        ("emergency file availability", c8_emergency),
        ("wire conformance", c9_wire),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {n} PASS  {name}: {d} ({secs:.1} s)"),
            Err(e) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {e} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
