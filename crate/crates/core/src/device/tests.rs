use std::sync::{Arc, Mutex};

use super::*;
use crate::minifs::mkfs;
use crate::op::Trace;
use crate::replica::{InProcessTransport, ReplicaService};
use crate::untrusted::NoTamper;

type Svc = Arc<Mutex<ReplicaService>>;

fn cfg() -> DeviceConfig {
    DeviceConfig { emergency_pages: 2, ..DeviceConfig::default() }
}

fn rig_with(cfg: DeviceConfig, tamper: Box<dyn TwinTamper>, taps: Taps) -> (Device, Svc) {
    let (store, meta) = mkfs(512, 64).unwrap();
    let svc: Svc = Arc::new(Mutex::new(ReplicaService::new()));
    let t = Box::new(InProcessTransport::new(svc.clone()));
    let d = Device::provision(cfg, NameKey::new([7; 32]), store, &meta, t, tamper, taps).unwrap();
    (d, svc)
}

fn rig() -> (Device, Svc) {
    rig_with(cfg(), Box::new(NoTamper), Taps::default())
}

fn replica_digest(svc: &Svc, id: u64) -> [u8; 32] {
    svc.lock().unwrap().session(id).unwrap().durable_digest()
}

fn pattern(n: usize, seed: u8) -> Vec<u8> {
    (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect()
}

#[test]
fn write_read_back_and_converge() {
    let (mut d, svc) = rig();
    let fd = d.open("a.bin", OpenFlags::CREATE).unwrap();
    let data = pattern(10_000, 1);
    assert_eq!(d.write(fd, &data).unwrap(), data.len());
    d.fsync(fd).unwrap();
    d.lseek(fd, 0, Whence::Set).unwrap();
    let rpcs = d.counters().fileop_rpcs;
    let (got, trust) = d.read(fd, 20_000).unwrap();
    assert_eq!(got, data);
    assert_eq!(trust, Trust::Trusted);
    assert_eq!(d.counters().fileop_rpcs, rpcs, "cache hit must not delegate");
    assert_eq!(d.fstat(fd).unwrap(), 10_000);
    d.quiesce().unwrap();
    assert_eq!(d.metadata_digest(), replica_digest(&svc, 1));
}

#[test]
fn memo_serves_after_eviction() {
    for memo in [true, false] {
        let (mut d, _svc) = rig_with(DeviceConfig { memo, ..cfg() }, Box::new(NoTamper), Taps::default());
        let fd = d.open("m", OpenFlags::CREATE).unwrap();
        let data = pattern(3 * 4096 + 17, 9);
        d.write(fd, &data).unwrap();
        d.fsync(fd).unwrap();
        d.evict_cache().unwrap();
        assert_eq!(d.cached_pages(), 0);
        d.lseek(fd, 0, Whence::Set).unwrap();
        let rpcs = d.counters().fileop_rpcs;
        let (got, trust) = d.read(fd, data.len()).unwrap();
        assert_eq!(got, data);
        assert_eq!(trust, Trust::Trusted);
        let used = d.counters().fileop_rpcs - rpcs;
        if memo {
            assert_eq!(used, 0);
        } else {
            assert!(used >= 1);
            // The delegated read filled the cache; the second pass is local.
            d.lseek(fd, 0, Whence::Set).unwrap();
            let before = d.counters().fileop_rpcs;
            assert_eq!(d.read(fd, data.len()).unwrap().0, data);
            assert_eq!(d.counters().fileop_rpcs, before);
        }
    }
}

#[test]
fn inline_then_grow() {
    let (mut d, svc) = rig();
    let fd = d.open("small", OpenFlags::CREATE).unwrap();
    d.write(fd, b"hello inline world").unwrap();
    d.fsync(fd).unwrap();
    d.evict_cache().unwrap();
    d.lseek(fd, 0, Whence::Set).unwrap();
    assert_eq!(d.read(fd, 100).unwrap().0, b"hello inline world");
    // Grow past the inline window: the bytes move to a data block.
    d.lseek(fd, 5000, Whence::Set).unwrap();
    d.write(fd, b"tail").unwrap();
    d.fsync(fd).unwrap();
    d.evict_cache().unwrap();
    d.lseek(fd, 0, Whence::Set).unwrap();
    let (all, _) = d.read(fd, 6000).unwrap();
    assert_eq!(all.len(), 5004);
    assert_eq!(&all[..18], b"hello inline world");
    assert!(all[18..5000].iter().all(|&b| b == 0));
    assert_eq!(&all[5000..], b"tail");
    d.quiesce().unwrap();
    assert_eq!(d.metadata_digest(), replica_digest(&svc, 1));
    // The window no longer holds the old inline bytes.
    let img = d.metadata_image();
    let raw: Vec<u8> = img.blocks().flat_map(|(_, b)| b.as_bytes().to_vec()).collect();
    assert!(!raw.windows(8).any(|w| w == b"hello in"));
}

#[test]
fn fstat_after_write_fsync() {
    let (mut d, _svc) = rig();
    let fd = d.open("s", OpenFlags::CREATE).unwrap();
    d.write(fd, &[1; 100]).unwrap();
    d.fsync(fd).unwrap();
    assert_eq!(d.fstat(fd).unwrap(), 100);
    assert_eq!(d.lseek(fd, 0, Whence::Set).unwrap(), 0);
    assert_eq!(d.lseek(fd, 0, Whence::End).unwrap(), 100);
}

#[test]
fn fsync_on_clean_fd_is_immediate() {
    let (mut d, _svc) = rig();
    let fd = d.open("c", OpenFlags::CREATE).unwrap();
    let before = d.counters().net_messages;
    d.fsync(fd).unwrap();
    assert_eq!(d.counters().net_messages, before);
    assert_eq!(d.select_validate(fd).unwrap(), Barrier::AllMatch);
}

#[test]
fn directories_and_paths() {
    let (mut d, svc) = rig();
    d.mkdir("logs").unwrap();
    d.mkdir("logs/day1").unwrap();
    let fd = d.open("logs/day1/run.txt", OpenFlags::CREATE).unwrap();
    d.write(fd, b"entry").unwrap();
    d.fsync(fd).unwrap();
    d.close(fd).unwrap();
    let fd = d.open("logs/day1/run.txt", OpenFlags::empty()).unwrap();
    assert_eq!(d.read(fd, 10).unwrap().0, b"entry");
    assert_eq!(d.open("logs/nope", OpenFlags::empty()), Err(DeviceError::Op(OpError::NoSuchFile)));
    assert_eq!(d.open("logs", OpenFlags::empty()), Err(DeviceError::Op(OpError::IsDir)));
    d.quiesce().unwrap();
    assert_eq!(d.metadata_digest(), replica_digest(&svc, 1));
}

#[test]
fn truncate_drops_contents() {
    let (mut d, svc) = rig();
    let fd = d.open("t", OpenFlags::CREATE).unwrap();
    d.write(fd, &pattern(9000, 3)).unwrap();
    d.fsync(fd).unwrap();
    let fd2 = d.open("t", OpenFlags::TRUNC).unwrap();
    assert_eq!(d.fstat(fd2).unwrap(), 0);
    assert_eq!(d.read(fd2, 100).unwrap().0, Vec::<u8>::new());
    d.write(fd2, b"fresh").unwrap();
    d.fsync(fd2).unwrap();
    d.lseek(fd2, 0, Whence::Set).unwrap();
    assert_eq!(d.read(fd2, 100).unwrap().0, b"fresh");
    d.quiesce().unwrap();
    assert_eq!(d.metadata_digest(), replica_digest(&svc, 1));
}

#[test]
fn emergency_file_offline() {
    let (mut d, _svc) = rig();
    d.sever();
    let rpcs = d.counters().net_messages;
    let data = pattern(2 * 4096, 5);
    assert_eq!(d.emergency_write(0, &data).unwrap(), data.len());
    assert_eq!(d.emergency_read(0, data.len()).unwrap(), data);
    assert_eq!(d.emergency_write(1, &data), Err(DeviceError::OutOfRange));
    let fd = d.open(EMERGENCY_NAME, OpenFlags::empty()).unwrap();
    assert_eq!(d.read(fd, 10).unwrap().0, &data[..10]);
    assert_eq!(d.counters().net_messages, rpcs);
    assert_eq!(d.open("other", OpenFlags::CREATE), Err(DeviceError::Offline));
}

#[test]
fn offline_writes_buffer_until_reconnect() {
    let (mut d, svc) = rig();
    let fd = d.open("o", OpenFlags::CREATE).unwrap();
    d.write(fd, &pattern(5000, 1)).unwrap();
    d.fsync(fd).unwrap();
    d.sever();
    d.write(fd, &pattern(3000, 2)).unwrap();
    assert_eq!(d.fsync(fd), Err(DeviceError::Offline));
    d.lseek(fd, 5000, Whence::Set).unwrap();
    let (got, trust) = d.read(fd, 3000).unwrap();
    assert_eq!(got, pattern(3000, 2));
    assert_eq!(trust, Trust::Untrusted);
    d.reconnect().unwrap();
    d.fsync(fd).unwrap();
    d.evict_cache().unwrap();
    d.lseek(fd, 0, Whence::Set).unwrap();
    let (all, trust) = d.read(fd, 9000).unwrap();
    assert_eq!(trust, Trust::Trusted);
    assert_eq!(&all[..5000], &pattern(5000, 1)[..]);
    assert_eq!(&all[5000..], &pattern(3000, 2)[..]);
    d.quiesce().unwrap();
    assert_eq!(d.metadata_digest(), replica_digest(&svc, 1));
}

#[test]
fn crash_after_exec_recovers() {
    for at in CrashPoint::ALL {
        let (mut d, svc) = rig();
        let fd = d.open("f", OpenFlags::CREATE).unwrap();
        d.write(fd, b"first").unwrap();
        d.fsync(fd).unwrap();
        d.arm_crash(at);
        let r = d.write(fd, &pattern(6000, 4)).and_then(|_| d.fsync(fd));
        assert_eq!(r, Err(DeviceError::Crashed), "{at}");
        let durable = d.into_durable();
        svc.lock().unwrap().restart();
        let t = Box::new(InProcessTransport::new(svc.clone()));
        let mut d = Device::restore(durable, t, Box::new(NoTamper), Taps::default()).unwrap();
        assert_eq!(d.metadata_digest(), replica_digest(&svc, 1), "{at}");
        let fd = d.open("f", OpenFlags::empty()).unwrap();
        let (got, _) = d.read(fd, 10_000).unwrap();
        let lost = matches!(at, CrashPoint::BeforeDelegate | CrashPoint::AfterReplayStaged);
        let want = if lost { b"first".to_vec() } else { [&b"first"[..], &pattern(6000, 4)].concat() };
        assert!(got == want, "{at}: got {} bytes, want {}", got.len(), want.len());
        // The device keeps working afterwards.
        d.write(fd, b"more").unwrap();
        d.fsync(fd).unwrap();
        d.quiesce().unwrap();
        assert_eq!(d.metadata_digest(), replica_digest(&svc, 1), "{at}");
    }
}

#[test]
fn emergency_survives_restart() {
    let (mut d, svc) = rig();
    d.sever();
    d.emergency_write(100, b"mayday").unwrap();
    let durable = d.into_durable();
    let t = Box::new(InProcessTransport::new(svc.clone()));
    let mut d = Device::restore(durable, t, Box::new(NoTamper), Taps::default()).unwrap();
    assert_eq!(d.emergency_read(100, 6).unwrap(), b"mayday");
}

struct DropWrites(Arc<std::sync::atomic::AtomicBool>);

impl TwinTamper for DropWrites {
    fn on_done(&mut self, _seq: &mut u64, op: &FileOp, _result: &mut u32, trace: &mut Trace) {
        if self.0.load(std::sync::atomic::Ordering::SeqCst) && op.kind == crate::op::OpKind::Write {
            trace.clear();
        }
    }
}

#[test]
fn dropped_write_is_caught_and_rolled_back() {
    let armed = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let (mut d, svc) = rig_with(cfg(), Box::new(DropWrites(armed.clone())), Taps::default());
    let fd = d.open("d", OpenFlags::CREATE).unwrap();
    d.write(fd, b"ok").unwrap();
    d.fsync(fd).unwrap();
    armed.store(true, std::sync::atomic::Ordering::SeqCst);
    let before = d.store_digest();
    d.write(fd, &pattern(5000, 8)).unwrap();
    assert!(matches!(d.fsync(fd), Err(DeviceError::VerificationFailed(_))));
    assert_eq!(d.store_digest(), before);
    // Data is kept, but only as untrusted.
    d.lseek(fd, 2, Whence::Set).unwrap();
    let (got, trust) = d.read(fd, 5000).unwrap();
    assert_eq!(got, pattern(5000, 8));
    assert_eq!(trust, Trust::Untrusted);
    assert_eq!(d.select_validate(fd).unwrap(), Barrier::AnyMismatch);
    d.quiesce().unwrap();
    assert_eq!(d.metadata_digest(), replica_digest(&svc, 1));
}

#[test]
fn cloud_stencil_mode() {
    let c = DeviceConfig { stencil_source: StencilSource::Cloud, ..cfg() };
    let (mut d, svc) = rig_with(c, Box::new(NoTamper), Taps::default());
    d.mkdir("dir").unwrap();
    let fd = d.open("dir/x", OpenFlags::CREATE).unwrap();
    d.write(fd, b"tiny").unwrap();
    d.write(fd, &pattern(9000, 6)).unwrap();
    d.fsync(fd).unwrap();
    d.evict_cache().unwrap();
    d.lseek(fd, 0, Whence::Set).unwrap();
    let (got, _) = d.read(fd, 20_000).unwrap();
    assert_eq!(&got[..4], b"tiny");
    assert_eq!(&got[4..], &pattern(9000, 6)[..]);
    d.quiesce().unwrap();
    assert_eq!(d.metadata_digest(), replica_digest(&svc, 1));
    // Device and replica agree on every class.
    let local = StencilMap::build(d.store()).unwrap();
    assert_eq!(local.audit_text(), d.stencil().audit_text());
}

#[test]
fn channel_never_carries_payload() {
    let seen: Arc<Mutex<Vec<u8>>> = Arc::default();
    let s = seen.clone();
    let tap: FrameTap = Arc::new(move |f: &[u8]| s.lock().unwrap().extend_from_slice(f));
    let s2 = seen.clone();
    let net: NetTap = Arc::new(move |m: &[u8]| s2.lock().unwrap().extend_from_slice(m));
    let (mut d, _svc) = rig_with(cfg(), Box::new(NoTamper), Taps { channel: Some(tap), net: Some(net) });
    let marker = b"SECRETMARK0123";
    let fd = d.open("p", OpenFlags::CREATE).unwrap();
    d.write(fd, marker).unwrap();
    let mut big = pattern(5000, 0);
    big[4090..4090 + marker.len()].copy_from_slice(marker);
    d.write(fd, &big).unwrap();
    d.fsync(fd).unwrap();
    d.evict_cache().unwrap();
    d.lseek(fd, 0, Whence::Set).unwrap();
    d.read(fd, 10_000).unwrap();
    d.quiesce().unwrap();
    let all = seen.lock().unwrap();
    assert!(!all.is_empty());
    assert!(!all.windows(8).any(|w| w == &marker[..8]));
}

#[test]
fn untrusted_reads_return_early() {
    let (mut d, _svc) = rig();
    let fd = d.open("u", OpenFlags::CREATE).unwrap();
    d.write(fd, &pattern(8192, 2)).unwrap();
    d.fsync(fd).unwrap();
    d.close(fd).unwrap();
    d.evict_cache().unwrap();
    let fd = d.open("u", OpenFlags::UNTRUSTED).unwrap();
    // Memo covers it, so it is served trusted without delegation.
    assert_eq!(d.read(fd, 8192).unwrap(), (pattern(8192, 2), Trust::Trusted));
    assert_eq!(d.select_validate(fd).unwrap(), Barrier::AllMatch);
}

#[test]
fn untrusted_flag_without_memo() {
    let (mut d, _svc) = rig_with(DeviceConfig { memo: false, ..cfg() }, Box::new(NoTamper), Taps::default());
    let fd = d.open("u", OpenFlags::CREATE).unwrap();
    d.write(fd, &pattern(8192, 2)).unwrap();
    d.fsync(fd).unwrap();
    d.close(fd).unwrap();
    d.evict_cache().unwrap();
    let fd = d.open("u", OpenFlags::UNTRUSTED).unwrap();
    let (got, trust) = d.read(fd, 8192).unwrap();
    assert_eq!(got, pattern(8192, 2));
    assert_eq!(trust, Trust::Untrusted);
    assert_eq!(d.select_validate(fd).unwrap(), Barrier::AllMatch);
}
