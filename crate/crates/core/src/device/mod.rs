//! The trusted device core. Clients call a small POSIX-like API; every op
//! that needs filesystem logic is delegated to both twins, and its data-block
//! requests are carried out only once the two traces agree.
//!
//! Writes return as soon as the local twin has produced its trace: the
//! blocks are written speculatively under a checkpoint and validated when
//! the replica answers. Verdicts are applied strictly in seq order. A failed
//! verdict rolls back that op and every later one still pending.

pub mod cache;
mod durable;
mod exec;
mod link;
pub mod memo;
pub mod names;
mod recover;
pub mod verifier;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

pub use cache::{PageCache, Trust};
pub use durable::{CrashPoint, DeviceDurable, Journal};
pub use link::{LinkStats, NetTap};
pub use memo::{Memo, MemoTarget};
pub use names::NameKey;
pub use verifier::{verify_traces, Verdict};

use crate::blockstore::{Block, BlockId, BlockStore, CheckpointId, BLOCK_SIZE};
use crate::minifs::layout::{INLINE_CAP, MAX_FILE_SIZE};
use crate::minifs::{BlockSource, Inode, MetadataImage, Superblock};
use crate::op::{FileOp, NameToken, OpError, OpResult, OpenFlags, Trace, Whence, ROOT_PARENT};
use crate::stencil::StencilMap;
use crate::untrusted::TwinTamper;
use crate::wire::channel::{channel_pair, Endpoint, FrameTap};
use crate::wire::net::Transport;
use link::Link;

pub type Fd = u32;

/// Name of the pre-allocated file that stays writable offline.
pub const EMERGENCY_NAME: &str = ".emergency";

const PAGE: u64 = BLOCK_SIZE as u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StencilSource {
    /// The device derives the stencil from its own disk.
    Device,
    /// The replica ships stencil updates with each trace.
    Cloud,
}

#[derive(Clone, Debug)]
pub struct DeviceConfig {
    pub device_id: u64,
    pub cache_pages: usize,
    pub memo: bool,
    pub stencil_source: StencilSource,
    pub emergency_pages: u32,
    /// Simulated network round trip.
    pub delay: Duration,
    pub twin_timeout: Duration,
    /// Filters twin block access through the stencil. Turning it off hands
    /// the twin raw blocks and exists only for benchmarking its cost.
    pub stencil_gate: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            device_id: 1,
            cache_pages: 1024,
            memo: true,
            stencil_source: StencilSource::Device,
            emergency_pages: 4,
            delay: Duration::ZERO,
            twin_timeout: Duration::from_secs(5),
            stencil_gate: true,
        }
    }
}

/// Observers for the two trust-boundary crossings.
#[derive(Clone, Default)]
pub struct Taps {
    pub channel: Option<FrameTap>,
    pub net: Option<NetTap>,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum DeviceError {
    #[error(transparent)]
    Op(#[from] OpError),
    #[error("verification failed: {0:?}")]
    VerificationFailed(Verdict),
    #[error("disconnected")]
    Offline,
    #[error("beyond the emergency extent")]
    OutOfRange,
    #[error("bad file descriptor")]
    BadFd,
    #[error("device crashed")]
    Crashed,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("setup failed: {0}")]
    Setup(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Barrier {
    AllMatch,
    AnyMismatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// FILEOP messages sent to the replica.
    pub fileop_rpcs: u64,
    pub net_messages: u64,
    /// Ops handed to the local twin.
    pub twin_ops: u64,
    pub matches: u64,
    pub mismatches: u64,
    pub local_rejects: u64,
    pub cloud_rejects: u64,
    /// Twin block requests refused by the stencil.
    pub stencil_rejects: u64,
    pub cache_hits: u64,
    pub memo_hits: u64,
    pub rollbacks: u64,
}

#[derive(Clone, Debug)]
struct DevFd {
    inode: u32,
    dir: bool,
    emergency: bool,
    pos: u64,
    flags: OpenFlags,
    parent: u64,
    token: NameToken,
    /// Where both twins believe this fd is; `None` after a rollback.
    twin_pos: Option<u64>,
    dirty: bool,
    failed: Option<DeviceError>,
    barrier_failed: bool,
}

/// A write whose validation failed; its bytes stay in the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Retry {
    fd: Fd,
    inode: u32,
    pos: u64,
    len: u64,
}

#[derive(Debug)]
enum Intent {
    Write {
        inode: u32,
        first: u32,
        /// Full contents of pages `first..`.
        pages: Vec<Block>,
        inline: bool,
        expect_len: usize,
        count: u32,
        retry: Retry,
    },
    Read {
        inode: u32,
        first: u32,
        expect_len: usize,
        expect_n: u32,
        untrusted: bool,
    },
    Lseek { expect: u32 },
    Fstat { expect: u32 },
    Open,
    Simple,
}

#[derive(Debug, Default)]
struct TwinRun {
    result: Option<OpResult>,
    trace: Trace,
    violated: bool,
}

#[derive(Debug)]
struct Pending {
    seq: u64,
    op: FileOp,
    cp: CheckpointId,
    intent: Intent,
    twin: TwinRun,
    local_fail: bool,
    staged: bool,
    want_outcome: bool,
}

#[derive(Clone, Debug)]
struct Outcome {
    verdict: Verdict,
    result: OpResult,
    trace: Trace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Expect {
    Trace(u64),
    Commit(u64),
    Abort,
    Hello,
}

pub struct Device {
    cfg: DeviceConfig,
    key: NameKey,
    store: BlockStore,
    sb: Superblock,
    stencil: StencilMap,
    stencil_stale: bool,
    twin: Endpoint,
    twin_thread: Option<JoinHandle<()>>,
    link: Link,
    fds: BTreeMap<Fd, DevFd>,
    next_fd: Fd,
    /// Client-visible file sizes.
    files: HashMap<u32, u64>,
    dirs: HashMap<String, Fd>,
    cache: PageCache,
    memo: Memo,
    pending: VecDeque<Pending>,
    expect: VecDeque<Expect>,
    resolved: BTreeMap<u64, Outcome>,
    retries: Vec<Retry>,
    next_seq: u64,
    max_sent: u64,
    journal: Journal,
    emergency: Vec<BlockId>,
    crash_arm: Option<CrashPoint>,
    crash_target: Option<u64>,
    crashed: bool,
    hello_ack: Option<crate::wire::net::NetBody>,
    counters: Counters,
    link_stats: Arc<LinkStats>,
}

impl Device {
    fn assemble(
        cfg: DeviceConfig,
        key: NameKey,
        store: BlockStore,
        transport: Box<dyn Transport>,
        tamper: Box<dyn TwinTamper>,
        taps: Taps,
    ) -> Result<Self, DeviceError> {
        let sb = store.superblock().map_err(|e| DeviceError::Setup(e.to_string()))?;
        let stencil = match cfg.stencil_source {
            StencilSource::Device => StencilMap::build(&store).map_err(|e| DeviceError::Setup(e.to_string()))?,
            StencilSource::Cloud => StencilMap::skeleton(sb),
        };
        let (mut dev_end, mut twin_end) = channel_pair(64);
        if let Some(t) = &taps.channel {
            dev_end.set_tap(t.clone());
            twin_end.set_tap(t.clone());
        }
        let twin_thread = crate::untrusted::spawn(twin_end, tamper);
        let link_stats = Arc::new(LinkStats::default());
        let link = Link::new(transport, cfg.delay, taps.net.clone(), link_stats.clone());
        let memo = Memo::new();
        Ok(Device {
            cache: PageCache::new(cfg.cache_pages),
            cfg,
            key,
            store,
            sb,
            stencil,
            stencil_stale: false,
            twin: dev_end,
            twin_thread: Some(twin_thread),
            link,
            fds: BTreeMap::new(),
            next_fd: 0,
            files: HashMap::new(),
            dirs: HashMap::new(),
            memo,
            pending: VecDeque::new(),
            expect: VecDeque::new(),
            resolved: BTreeMap::new(),
            retries: Vec::new(),
            next_seq: 1,
            max_sent: 0,
            journal: Journal::default(),
            emergency: Vec::new(),
            crash_arm: None,
            crash_target: None,
            crashed: false,
            hello_ack: None,
            counters: Counters::default(),
            link_stats,
        })
    }

    /// First boot: registers `meta` with the replica and pre-allocates the
    /// emergency file.
    pub fn provision(
        cfg: DeviceConfig,
        key: NameKey,
        store: BlockStore,
        meta: &MetadataImage,
        transport: Box<dyn Transport>,
        tamper: Box<dyn TwinTamper>,
        taps: Taps,
    ) -> Result<Self, DeviceError> {
        let mut d = Device::assemble(cfg, key, store, transport, tamper, taps)?;
        d.hello(meta.encode(), false)?;
        d.build_owners();
        if d.cfg.emergency_pages > 0 {
            let fd = d.open_at(None, EMERGENCY_NAME, OpenFlags::CREATE)?;
            let len = d.cfg.emergency_pages as usize * BLOCK_SIZE;
            d.write(fd, &vec![0u8; len])?;
            d.fsync(fd)?;
            let ino = d.fds[&fd].inode;
            let inode = d.inode(ino)?;
            d.emergency = inode.direct[..d.cfg.emergency_pages as usize].iter().map(|&b| BlockId(b)).collect();
            d.close(fd)?;
        }
        Ok(d)
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    pub fn counters(&self) -> Counters {
        let mut c = self.counters;
        c.fileop_rpcs = self.link_stats.fileops.load(Ordering::Relaxed);
        c.net_messages = self.link_stats.messages.load(Ordering::Relaxed);
        c
    }

    pub fn journal(&self) -> Journal {
        self.journal
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn stencil(&self) -> &StencilMap {
        &self.stencil
    }

    pub fn emergency_extent(&self) -> &[BlockId] {
        &self.emergency
    }

    pub fn is_online(&self) -> bool {
        self.link.is_online()
    }

    pub fn name_token(&self, component: &str) -> NameToken {
        self.key.token(component)
    }

    /// SHA-256 of the whole disk, data included.
    pub fn store_digest(&self) -> [u8; 32] {
        self.store.digest()
    }

    /// The disk as the replica should see it: every block redacted through a
    /// stencil freshly derived from the disk.
    pub fn metadata_image(&self) -> MetadataImage {
        let mut img = MetadataImage::new(self.sb.total_blocks);
        let Ok(map) = StencilMap::build(&self.store) else { return img };
        for id in self.store.nonzero_blocks().collect::<Vec<_>>() {
            if let Ok(b) = map.serve_block_read(id, &self.store.source_block(id)) {
                img.set(id, b);
            }
        }
        img
    }

    pub fn metadata_digest(&self) -> [u8; 32] {
        self.metadata_image().digest()
    }

    /// Arms a crash on the next Open or Write delegated from now on.
    pub fn arm_crash(&mut self, at: CrashPoint) {
        self.crash_arm = Some(at);
        self.crash_target = None;
    }

    fn crash(&mut self) -> DeviceError {
        self.crashed = true;
        DeviceError::Crashed
    }

    fn live(&self) -> Result<(), DeviceError> {
        if self.crashed {
            Err(DeviceError::Crashed)
        } else {
            Ok(())
        }
    }

    fn fd(&self, fd: Fd) -> Result<&DevFd, DeviceError> {
        self.fds.get(&fd).ok_or(DeviceError::BadFd)
    }

    fn fd_mut(&mut self, fd: Fd) -> Result<&mut DevFd, DeviceError> {
        self.fds.get_mut(&fd).ok_or(DeviceError::BadFd)
    }

    fn inode(&self, ino: u32) -> Result<Inode, DeviceError> {
        self.store.inode(&self.sb, ino).map_err(|e| DeviceError::Protocol(format!("local inode {ino}: {e}")))
    }

    // ---- client API ----

    /// Opens `path` (components separated by `/`), walking and caching the
    /// directories on the way.
    pub fn open(&mut self, path: &str, flags: OpenFlags) -> Result<Fd, DeviceError> {
        let comps: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
        let (last, dirs) = comps.split_last().ok_or(DeviceError::Op(OpError::Invalid))?;
        let parent = self.walk(dirs)?;
        self.open_at(parent, last, flags)
    }

    /// Creates directory `path`; missing parents are an error.
    pub fn mkdir(&mut self, path: &str) -> Result<Fd, DeviceError> {
        let comps: Vec<&str> = path.split('/').filter(|c| !c.is_empty()).collect();
        let fd = self.open(path, OpenFlags::CREATE | OpenFlags::DIRECTORY)?;
        self.dirs.insert(comps.join("/"), fd);
        Ok(fd)
    }

    fn walk(&mut self, dirs: &[&str]) -> Result<Option<Fd>, DeviceError> {
        let mut parent = None;
        for i in 0..dirs.len() {
            let prefix = dirs[..=i].join("/");
            let fd = match self.dirs.get(&prefix) {
                Some(&fd) => fd,
                None => {
                    let fd = self.open_at(parent, dirs[i], OpenFlags::DIRECTORY)?;
                    self.dirs.insert(prefix, fd);
                    fd
                }
            };
            parent = Some(fd);
        }
        Ok(parent)
    }

    /// Opens `name` inside directory `parent` (the root when `None`).
    pub fn open_at(&mut self, parent: Option<Fd>, name: &str, flags: OpenFlags) -> Result<Fd, DeviceError> {
        self.live()?;
        self.pump()?;
        if parent.is_none() && name == EMERGENCY_NAME && !self.emergency.is_empty() {
            let fd = self.next_fd;
            self.next_fd += 1;
            self.fds.insert(fd, DevFd::emergency());
            return Ok(fd);
        }
        let parent_arg = match parent {
            Some(p) => {
                if !self.fd(p)?.dir {
                    return Err(OpError::NotDir.into());
                }
                p as u64
            }
            None => ROOT_PARENT,
        };
        let token = self.key.token(name);
        let fd = self.next_fd;
        self.next_fd += 1;
        let o = self.sync_op(FileOp::open(fd, parent_arg, token, flags), Intent::Open)?;
        let ino = o.result?;
        let dir = flags.contains(OpenFlags::DIRECTORY);
        if !dir {
            if flags.contains(OpenFlags::TRUNC) {
                self.memo.invalidate_inode(ino);
                self.cache.remove_inode(ino);
                self.retries.retain(|r| r.inode != ino);
                self.files.insert(ino, 0);
            } else if !self.files.contains_key(&ino) {
                let size = self.inode(ino)?.size as u64;
                self.files.insert(ino, size);
            }
        }
        self.fds.insert(
            fd,
            DevFd {
                inode: ino,
                dir,
                emergency: false,
                pos: 0,
                flags,
                parent: parent_arg,
                token,
                twin_pos: Some(0),
                dirty: false,
                failed: None,
                barrier_failed: false,
            },
        );
        Ok(fd)
    }

    pub fn write(&mut self, fd: Fd, data: &[u8]) -> Result<usize, DeviceError> {
        self.live()?;
        self.pump()?;
        let f = self.fd(fd)?.clone();
        if f.emergency {
            let n = self.emergency_write(f.pos, data)?;
            self.fd_mut(fd)?.pos += n as u64;
            return Ok(n);
        }
        if f.dir {
            return Err(OpError::IsDir.into());
        }
        if data.is_empty() {
            return Ok(0);
        }
        let end = f.pos + data.len() as u64;
        if end > MAX_FILE_SIZE {
            return Err(OpError::TooLarge.into());
        }
        if self.link.is_online() {
            match self.write_delegated(fd, f.pos, data) {
                Ok(()) => {}
                Err(DeviceError::Offline) => self.buffer_write(fd, f.inode, f.pos, data),
                Err(e) => return Err(e),
            }
        } else {
            self.buffer_write(fd, f.inode, f.pos, data);
        }
        let size = self.files.entry(f.inode).or_insert(0);
        *size = (*size).max(end);
        let f = self.fd_mut(fd)?;
        f.pos = end;
        f.dirty = true;
        Ok(data.len())
    }

    /// Keeps an offline write in the cache, unvalidated, for the next fsync.
    fn buffer_write(&mut self, fd: Fd, inode: u32, pos: u64, data: &[u8]) {
        let first = (pos / PAGE) as u32;
        let last = ((pos + data.len() as u64 - 1) / PAGE) as u32;
        for p in first..=last {
            let mut page = self.page_content(inode, p);
            overlay(&mut page, p, pos, data);
            let block = self.cache.peek((inode, p)).and_then(|e| e.block);
            self.cache.insert((inode, p), page, block, Trust::Untrusted, None);
        }
        self.retries.push(Retry { fd, inode, pos, len: data.len() as u64 });
    }

    /// Current contents of page `p` as the device knows them.
    fn page_content(&self, inode: u32, p: u32) -> Block {
        if let Some(e) = self.cache.peek((inode, p)) {
            return e.page.clone();
        }
        match self.memo.get((inode, p)) {
            Some(MemoTarget::Block(b)) => self.store.source_block(b),
            Some(MemoTarget::Inline) => self.inline_page(inode),
            None => Block::zeroed(),
        }
    }

    fn inline_page(&self, inode: u32) -> Block {
        let mut page = Block::zeroed();
        if let Ok(i) = self.inode(inode) {
            let n = (i.inline_len as usize).min(INLINE_CAP);
            page.as_mut_bytes()[..n].copy_from_slice(&i.inline[..n]);
        }
        page
    }

    pub fn read(&mut self, fd: Fd, len: usize) -> Result<(Vec<u8>, Trust), DeviceError> {
        self.live()?;
        self.pump()?;
        let f = self.fd(fd)?.clone();
        if f.emergency {
            let cap = self.emergency.len() as u64 * PAGE;
            let n = (len as u64).min(cap.saturating_sub(f.pos)) as usize;
            let data = self.emergency_read(f.pos, n)?;
            self.fd_mut(fd)?.pos += n as u64;
            return Ok((data, Trust::Trusted));
        }
        if f.dir {
            return Err(OpError::IsDir.into());
        }
        let size = self.files.get(&f.inode).copied().unwrap_or(0);
        let n = (len as u64).min(size.saturating_sub(f.pos));
        if n == 0 {
            return Ok((Vec::new(), Trust::Trusted));
        }
        let first = (f.pos / PAGE) as u32;
        let last = ((f.pos + n - 1) / PAGE) as u32;
        if let Some((data, trust)) = self.read_local(f.inode, f.pos, n, first, last) {
            self.fd_mut(fd)?.pos += n;
            return Ok((data, trust));
        }
        if !self.link.is_online() {
            return Err(DeviceError::Offline);
        }
        let out = self.read_delegated(fd, &f, n, first, last)?;
        self.fd_mut(fd)?.pos += n;
        Ok(out)
    }

    /// Serves a read from cache and memo alone, if they cover it.
    fn read_local(&mut self, inode: u32, pos: u64, n: u64, first: u32, last: u32) -> Option<(Vec<u8>, Trust)> {
        let mut pages = Vec::new();
        let mut trust = Trust::Trusted;
        let (mut hits, mut memo_hits) = (0, 0);
        for p in first..=last {
            if let Some(e) = self.cache.get((inode, p)) {
                trust = trust.and(e.trust);
                pages.push(e.page.clone());
                hits += 1;
                continue;
            }
            if !self.cfg.memo {
                return None;
            }
            match self.memo.get((inode, p))? {
                MemoTarget::Block(b) => pages.push(self.store.source_block(b)),
                MemoTarget::Inline => pages.push(self.inline_page(inode)),
            }
            memo_hits += 1;
        }
        self.counters.cache_hits += hits;
        self.counters.memo_hits += memo_hits;
        Some((gather(&pages, first, pos, n), trust))
    }

    pub fn lseek(&mut self, fd: Fd, offset: i64, whence: Whence) -> Result<u64, DeviceError> {
        self.live()?;
        let f = self.fd(fd)?;
        let base = match whence {
            Whence::Set => 0,
            Whence::Cur => f.pos as i64,
            Whence::End => self.size_of(f) as i64,
        };
        let new = base.checked_add(offset).filter(|&p| p >= 0).ok_or(DeviceError::Op(OpError::Invalid))?;
        self.fd_mut(fd)?.pos = new as u64;
        Ok(new as u64)
    }

    fn size_of(&self, f: &DevFd) -> u64 {
        if f.emergency {
            self.emergency.len() as u64 * PAGE
        } else {
            self.files.get(&f.inode).copied().unwrap_or(0)
        }
    }

    /// Size as validated with both twins; always a round trip.
    pub fn fstat(&mut self, fd: Fd) -> Result<u64, DeviceError> {
        self.live()?;
        let f = self.fd(fd)?.clone();
        if f.emergency {
            return Ok(self.size_of(&f));
        }
        self.drain()?;
        let expect = self.inode(f.inode)?.size;
        let o = self.sync_op(FileOp::fstat(fd), Intent::Fstat { expect })?;
        Ok(o.result? as u64)
    }

    /// Returns once every write on `fd` is validated, on disk, and committed
    /// at the replica.
    pub fn fsync(&mut self, fd: Fd) -> Result<(), DeviceError> {
        self.live()?;
        self.pump()?;
        let f = self.fd(fd)?.clone();
        if f.emergency {
            return Ok(());
        }
        let has_retries = self.retries.iter().any(|r| r.fd == fd);
        if !f.dirty && f.failed.is_none() && !has_retries {
            return Ok(());
        }
        self.drain()?;
        if let Some(e) = self.fd_mut(fd)?.failed.take() {
            return Err(e);
        }
        if !self.link.is_online() {
            return Err(DeviceError::Offline);
        }
        self.flush_retries(fd)?;
        let o = self.sync_op(FileOp::fsync(fd), Intent::Simple)?;
        o.result?;
        self.await_ack(self.journal.last_executed)?;
        self.fd_mut(fd)?.dirty = false;
        Ok(())
    }

    fn flush_retries(&mut self, fd: Fd) -> Result<(), DeviceError> {
        let (mine, rest): (Vec<Retry>, Vec<Retry>) = self.retries.drain(..).partition(|r| r.fd == fd);
        self.retries = rest;
        for r in mine {
            let bytes = self.bytes_at(r.inode, r.pos, r.len);
            self.write_delegated(fd, r.pos, &bytes)?;
        }
        self.drain()?;
        match self.fd_mut(fd)?.failed.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn bytes_at(&self, inode: u32, pos: u64, len: u64) -> Vec<u8> {
        let first = (pos / PAGE) as u32;
        let last = ((pos + len - 1) / PAGE) as u32;
        let pages: Vec<Block> = (first..=last).map(|p| self.page_content(inode, p)).collect();
        gather(&pages, first, pos, len)
    }

    pub fn close(&mut self, fd: Fd) -> Result<(), DeviceError> {
        self.live()?;
        self.pump()?;
        let f = self.fd(fd)?.clone();
        if !f.emergency && self.link.is_online() {
            if self.retries.iter().any(|r| r.fd == fd) {
                self.flush_retries(fd)?;
            }
            self.sync_op(FileOp::close(fd), Intent::Simple)?.result?;
        }
        self.retries.retain(|r| r.fd != fd);
        self.fds.remove(&fd);
        self.dirs.retain(|_, v| *v != fd);
        Ok(())
    }

    /// Validation barrier: waits for every pending verdict and reports
    /// whether any op on `fd` failed since the last barrier.
    pub fn select_validate(&mut self, fd: Fd) -> Result<Barrier, DeviceError> {
        self.live()?;
        self.fd(fd)?;
        self.drain()?;
        let f = self.fd_mut(fd)?;
        Ok(if std::mem::take(&mut f.barrier_failed) { Barrier::AnyMismatch } else { Barrier::AllMatch })
    }

    /// Drops every clean page from the cache. Pending ops are settled first.
    pub fn evict_cache(&mut self) -> Result<(), DeviceError> {
        self.drain()?;
        self.cache.evict_clean();
        Ok(())
    }

    pub fn cached_pages(&self) -> usize {
        self.cache.len()
    }

    pub fn emergency_write(&mut self, offset: u64, data: &[u8]) -> Result<usize, DeviceError> {
        self.live()?;
        let end = offset.checked_add(data.len() as u64).ok_or(DeviceError::OutOfRange)?;
        if end > self.emergency.len() as u64 * PAGE {
            return Err(DeviceError::OutOfRange);
        }
        if data.is_empty() {
            return Ok(0);
        }
        for p in (offset / PAGE) as u32..=((end - 1) / PAGE) as u32 {
            let b = self.emergency[p as usize];
            let mut blk = self.store.source_block(b);
            overlay(&mut blk, p, offset, data);
            self.store.write_block(b, blk).map_err(|e| DeviceError::Protocol(e.to_string()))?;
        }
        Ok(data.len())
    }

    pub fn emergency_read(&mut self, offset: u64, len: usize) -> Result<Vec<u8>, DeviceError> {
        self.live()?;
        let end = offset.checked_add(len as u64).ok_or(DeviceError::OutOfRange)?;
        if end > self.emergency.len() as u64 * PAGE {
            return Err(DeviceError::OutOfRange);
        }
        if len == 0 {
            return Ok(Vec::new());
        }
        let first = (offset / PAGE) as u32;
        let last = ((end - 1) / PAGE) as u32;
        let pages: Vec<Block> = (first..=last).map(|p| self.store.source_block(self.emergency[p as usize])).collect();
        Ok(gather(&pages, first, offset, len as u64))
    }

    /// Cuts the network. Requests already sent still complete.
    pub fn sever(&mut self) {
        self.link.sever();
    }

    /// Restores the network and resynchronizes with the replica.
    pub fn reconnect(&mut self) -> Result<(), DeviceError> {
        self.live()?;
        self.link.restore();
        self.reconnect_recover()
    }

    /// Settles every pending verdict and waits for outstanding acks.
    pub fn quiesce(&mut self) -> Result<(), DeviceError> {
        self.live()?;
        self.drain()?;
        while self.link.in_flight() > 0 {
            self.process_one()?;
        }
        Ok(())
    }

    /// Stops the device, keeping only what survives power loss.
    pub fn into_durable(mut self) -> DeviceDurable {
        self.link.shutdown();
        let (a, _) = channel_pair(1);
        drop(std::mem::replace(&mut self.twin, a));
        if let Some(t) = self.twin_thread.take() {
            let _ = t.join();
        }
        DeviceDurable {
            store: std::mem::replace(&mut self.store, BlockStore::new(0)),
            journal: self.journal,
            emergency: std::mem::take(&mut self.emergency),
            key: self.key.clone(),
            config: self.cfg.clone(),
        }
    }
}

impl DevFd {
    fn emergency() -> Self {
        DevFd {
            inode: u32::MAX,
            dir: false,
            emergency: true,
            pos: 0,
            flags: OpenFlags::empty(),
            parent: ROOT_PARENT,
            token: NameToken::default(),
            twin_pos: None,
            dirty: false,
            failed: None,
            barrier_failed: false,
        }
    }
}

/// Writes the part of `data` (which starts at file offset `pos`) that falls
/// in page `p`.
fn overlay(page: &mut Block, p: u32, pos: u64, data: &[u8]) {
    let start = p as u64 * PAGE;
    let lo = pos.max(start);
    let hi = (pos + data.len() as u64).min(start + PAGE);
    if lo >= hi {
        return;
    }
    page.as_mut_bytes()[(lo - start) as usize..(hi - start) as usize].copy_from_slice(&data[(lo - pos) as usize..(hi - pos) as usize]);
}

/// Bytes `pos..pos+n` from consecutive pages starting at page `first`.
fn gather(pages: &[Block], first: u32, pos: u64, n: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(n as usize);
    let mut at = pos;
    let end = pos + n;
    while at < end {
        let p = (at / PAGE) as u32;
        let off = (at % PAGE) as usize;
        let take = ((PAGE - off as u64).min(end - at)) as usize;
        out.extend_from_slice(&pages[(p - first) as usize].as_bytes()[off..off + take]);
        at += take as u64;
    }
    out
}

#[cfg(test)]
mod tests;
