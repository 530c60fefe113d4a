use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::ReplicaError;
use crate::blockstore::{Block, BlockId, BLOCK_SIZE};
use crate::minifs::{AccessReject, BlockSource, Engine, FdTable, ImageError, MetadataAccessor, MetadataImage};
use crate::op::{FileOp, OpError, OpResult, Trace};
use crate::stencil::{BlockClass, StencilDelta, StencilMap};
use crate::wire::net::NetBody;
use crate::wire::{decode_fileop, encode_fileop, FILEOP_LEN};

/// Journal records kept before the base image is rewritten.
const COMPACT_AFTER: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Staged,
    Committed,
    Aborted,
}

#[derive(Clone, Debug)]
pub struct CommitRecord {
    pub txn: u64,
    pub op: FileOp,
    pub delta: BTreeMap<BlockId, Block>,
    pub fds_after: FdTable,
    pub epoch: u64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayResponse {
    pub ok: bool,
    pub trace: Trace,
    pub result: OpResult,
    pub stencil: Option<StencilDelta>,
}

/// One device's replica state.
#[derive(Debug)]
pub struct Session {
    device_id: u64,
    cloud_stencil: bool,
    durable: MetadataImage,
    /// Durable plus every staged delta; what the next replay sees.
    working: MetadataImage,
    committed_seq: u64,
    last_applied: u64,
    staged: BTreeMap<u64, CommitRecord>,
    base: MetadataImage,
    oplog: Vec<(u64, u64, FileOp)>,
    engine: Engine,
    epoch: u64,
    base_fds: FdTable,
    stencil: Option<StencilMap>,
    dir: Option<PathBuf>,
    journal_records: usize,
}

struct Overlay<'a> {
    img: &'a MetadataImage,
    delta: BTreeMap<BlockId, Block>,
}

impl MetadataAccessor for Overlay<'_> {
    fn read_meta(&mut self, id: BlockId) -> Result<Block, AccessReject> {
        if id.0 >= self.img.total_blocks() {
            return Err(AccessReject(id));
        }
        Ok(self.delta.get(&id).cloned().unwrap_or_else(|| self.img.source_block(id)))
    }

    fn write_meta(&mut self, id: BlockId, block: &Block) -> Result<(), AccessReject> {
        if id.0 >= self.img.total_blocks() {
            return Err(AccessReject(id));
        }
        self.delta.insert(id, block.clone());
        Ok(())
    }
}

/// Rejects images holding file bytes: no stored block may be a file data
/// block and every inline window must be zero.
fn check_metadata_only(img: &MetadataImage) -> Result<(), ReplicaError> {
    let map = StencilMap::build(img).map_err(ImageError::from)?;
    for (id, b) in img.blocks() {
        for r in map.classify(id).data_ranges() {
            if b.as_bytes()[r.start as usize..r.end as usize].iter().any(|&x| x != 0) {
                return Err(ReplicaError::Replay(format!("image holds file data in block {id}")));
            }
        }
    }
    Ok(())
}

impl Session {
    pub(super) fn bootstrap(
        device_id: u64,
        image: MetadataImage,
        cloud_stencil: bool,
        dir: Option<PathBuf>,
    ) -> Result<Self, ReplicaError> {
        image.superblock().map_err(ImageError::from)?;
        check_metadata_only(&image)?;
        let mut s = Session::empty(device_id, image, cloud_stencil, dir);
        s.rebuild_stencil();
        if let Some(d) = s.dir.clone() {
            if d.exists() {
                fs::remove_dir_all(&d)?;
            }
            fs::create_dir_all(&d)?;
            s.write_base(&d)?;
            File::create(d.join("journal.log"))?;
            s.write_staged()?;
        }
        Ok(s)
    }

    fn empty(device_id: u64, image: MetadataImage, cloud_stencil: bool, dir: Option<PathBuf>) -> Self {
        Session {
            device_id,
            cloud_stencil,
            working: image.clone(),
            base: image.clone(),
            durable: image,
            committed_seq: 0,
            last_applied: 0,
            staged: BTreeMap::new(),
            oplog: Vec::new(),
            engine: Engine::new(),
            epoch: 1,
            base_fds: FdTable::new(),
            stencil: None,
            dir,
            journal_records: 0,
        }
    }

    pub fn device_id(&self) -> u64 {
        self.device_id
    }

    pub fn cloud_stencil(&self) -> bool {
        self.cloud_stencil
    }

    pub fn durable(&self) -> &MetadataImage {
        &self.durable
    }

    pub fn working(&self) -> &MetadataImage {
        &self.working
    }

    pub fn durable_digest(&self) -> [u8; 32] {
        self.durable.digest()
    }

    pub fn committed_seq(&self) -> u64 {
        self.committed_seq
    }

    pub fn last_applied(&self) -> u64 {
        self.last_applied
    }

    pub fn staged(&self) -> impl Iterator<Item = &CommitRecord> {
        self.staged.values()
    }

    /// Every byte the replica holds, durable and staged, for scanning.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = self.durable.encode();
        out.extend_from_slice(&self.working.encode());
        for r in self.staged.values() {
            for b in r.delta.values() {
                out.extend_from_slice(b.as_bytes());
            }
        }
        out
    }

    pub(super) fn ack(&self, with_stencil: bool) -> NetBody {
        let stencil = match (&self.stencil, with_stencil) {
            (Some(m), true) => Some(m.full_delta()),
            _ => None,
        };
        NetBody::Ack { committed: self.committed_seq, applied: self.last_applied, stencil }
    }

    /// Replays `op` as transaction `seq` against the staged state.
    pub fn replay_fileop(&mut self, seq: u64, op: &FileOp) -> Result<ReplayResponse, ReplicaError> {
        if seq != self.last_applied + 1 {
            return Err(ReplicaError::SeqGap { expected: self.last_applied + 1, got: seq });
        }
        let mut acc = Overlay { img: &self.working, delta: BTreeMap::new() };
        let out = self.engine.exec_fileop(op, &mut acc);
        let delta = acc.delta;
        let (ok, trace, result, delta) = match out {
            Ok(o) => (true, o.trace, o.result, delta),
            Err(_) => (false, Vec::new(), Err(OpError::Rejected), BTreeMap::new()),
        };
        for (id, b) in &delta {
            self.working.set(*id, b.clone());
        }
        let mut stencil = None;
        if let Some(map) = self.stencil.as_mut() {
            let dirtied: BTreeSet<BlockId> = delta.keys().copied().collect();
            match map.refresh(&dirtied, &self.working) {
                Ok(rep) => stencil = Some(map.delta_for(&rep.changed)),
                Err(e) => return Err(ReplicaError::Replay(e.to_string())),
            }
        }
        self.staged.insert(
            seq,
            CommitRecord {
                txn: seq,
                op: *op,
                delta,
                fds_after: self.engine.fds().clone(),
                epoch: self.epoch,
                phase: Phase::Staged,
            },
        );
        self.last_applied = seq;
        self.write_staged()?;
        Ok(ReplayResponse { ok, trace, result, stencil })
    }

    /// Makes every staged transaction up to `seq` durable. Repeats are
    /// acknowledged without effect.
    pub fn commit(&mut self, seq: u64) -> Result<(), ReplicaError> {
        if seq <= self.committed_seq {
            return Ok(());
        }
        if seq > self.last_applied {
            return Err(ReplicaError::UnknownTxn(seq));
        }
        let rest = self.staged.split_off(&(seq + 1));
        let done = std::mem::replace(&mut self.staged, rest);
        for (_, mut r) in done {
            for (id, b) in &r.delta {
                self.durable.set(*id, b.clone());
            }
            self.append_journal(&r)?;
            self.oplog.push((r.txn, r.epoch, r.op));
            if r.epoch == self.epoch {
                self.base_fds = r.fds_after.clone();
            }
            r.phase = Phase::Committed;
        }
        self.committed_seq = seq;
        self.write_staged()?;
        self.maybe_compact()?;
        Ok(())
    }

    /// Drops staged transactions `seq..` and burns the seq space through
    /// `through`.
    pub fn abort(&mut self, seq: u64, through: u64) -> Result<(), ReplicaError> {
        if seq <= self.committed_seq {
            return Err(ReplicaError::UnknownTxn(seq));
        }
        for (_, r) in self.staged.split_off(&seq) {
            debug_assert_eq!(r.phase, Phase::Staged);
        }
        self.last_applied = self.last_applied.max(through);
        self.rebuild_working();
        let fds = self
            .staged
            .values()
            .next_back()
            .filter(|r| r.epoch == self.epoch)
            .map(|r| r.fds_after.clone())
            .unwrap_or_else(|| self.base_fds.clone());
        self.engine.set_fds(fds);
        self.rebuild_stencil();
        self.write_staged()?;
        Ok(())
    }

    pub(super) fn reset_fds(&mut self) {
        self.epoch += 1;
        self.base_fds = FdTable::new();
        self.engine.set_fds(FdTable::new());
    }

    pub(super) fn restart(&mut self) {
        self.engine = Engine::new();
        self.reset_fds();
        self.rebuild_working();
        self.rebuild_stencil();
    }

    fn rebuild_working(&mut self) {
        let mut w = self.durable.clone();
        for r in self.staged.values() {
            for (id, b) in &r.delta {
                w.set(*id, b.clone());
            }
        }
        self.working = w;
    }

    fn rebuild_stencil(&mut self) {
        self.stencil = if self.cloud_stencil { StencilMap::build(&self.working).ok() } else { None };
    }

    /// Replays the committed op log from the last base image with a fresh
    /// engine. Equal to the durable image when replay is deterministic.
    pub fn replay_committed_log(&self) -> MetadataImage {
        let mut img = self.base.clone();
        let mut engine = Engine::new();
        let mut epoch = self.oplog.first().map_or(0, |o| o.1);
        for (_, e, op) in &self.oplog {
            if *e != epoch {
                engine.set_fds(FdTable::new());
                epoch = *e;
            }
            let mut acc = Overlay { img: &img, delta: BTreeMap::new() };
            let _ = engine.exec_fileop(op, &mut acc);
            for (id, b) in acc.delta {
                img.set(id, b);
            }
        }
        img
    }

    /// Class of `id` in the replica's own stencil, when it keeps one.
    pub fn stencil_class(&self, id: BlockId) -> Option<BlockClass> {
        self.stencil.as_ref().map(|m| m.classify(id))
    }

    // Persistence. Layout of a session directory:
    //   base.img     metadata image at bootstrap or last compaction
    //   base.meta    committed seq at base (8) | cloud-stencil flag (1)
    //   journal.log  committed records since base
    //   staged.log   last_applied (8) | records still staged
    // A record is `seq(8) epoch(8) op(33) n(4) n x (block(4) bytes(4096))`.

    fn write_base(&self, d: &Path) -> Result<(), ReplicaError> {
        atomic_write(&d.join("base.img"), &self.base.encode())?;
        let mut meta = self.committed_seq.to_le_bytes().to_vec();
        meta.push(self.cloud_stencil as u8);
        atomic_write(&d.join("base.meta"), &meta)?;
        Ok(())
    }

    fn append_journal(&mut self, r: &CommitRecord) -> Result<(), ReplicaError> {
        if let Some(d) = &self.dir {
            let mut f = OpenOptions::new().append(true).create(true).open(d.join("journal.log"))?;
            f.write_all(&encode_record(r))?;
            f.sync_data()?;
        }
        self.journal_records += 1;
        Ok(())
    }

    fn write_staged(&self) -> Result<(), ReplicaError> {
        let Some(d) = &self.dir else { return Ok(()) };
        let mut buf = self.last_applied.to_le_bytes().to_vec();
        for r in self.staged.values() {
            buf.extend_from_slice(&encode_record(r));
        }
        atomic_write(&d.join("staged.log"), &buf)?;
        Ok(())
    }

    fn maybe_compact(&mut self) -> Result<(), ReplicaError> {
        if self.journal_records < COMPACT_AFTER {
            return Ok(());
        }
        self.base = self.durable.clone();
        self.oplog.clear();
        self.journal_records = 0;
        if let Some(d) = self.dir.clone() {
            self.write_base(&d)?;
            File::create(d.join("journal.log"))?;
        }
        Ok(())
    }

    pub(super) fn load(device_id: u64, d: PathBuf) -> Result<Self, ReplicaError> {
        let base = MetadataImage::decode(&fs::read(d.join("base.img"))?)?;
        let meta = fs::read(d.join("base.meta"))?;
        if meta.len() != 9 {
            return Err(ReplicaError::Replay("bad base.meta".into()));
        }
        let mut s = Session::empty(device_id, base, meta[8] != 0, Some(d.clone()));
        s.committed_seq = u64::from_le_bytes(meta[..8].try_into().unwrap());
        let journal = read_all(&d.join("journal.log"))?;
        let mut at = 0;
        while at < journal.len() {
            let (r, used) = decode_record(&journal[at..]).ok_or_else(|| ReplicaError::Replay("corrupt journal".into()))?;
            at += used;
            for (id, b) in &r.delta {
                s.durable.set(*id, b.clone());
            }
            s.oplog.push((r.txn, r.epoch, r.op));
            s.committed_seq = r.txn;
            s.journal_records += 1;
        }
        let staged = read_all(&d.join("staged.log"))?;
        if staged.len() >= 8 {
            s.last_applied = u64::from_le_bytes(staged[..8].try_into().unwrap());
            let mut at = 8;
            while at < staged.len() {
                let (r, used) = decode_record(&staged[at..]).ok_or_else(|| ReplicaError::Replay("corrupt staged log".into()))?;
                at += used;
                if r.txn > s.committed_seq {
                    s.staged.insert(r.txn, r);
                }
            }
        }
        s.last_applied = s.last_applied.max(s.committed_seq);
        s.epoch = s.oplog.iter().chain(s.staged.values().map(|r| (r.txn, r.epoch, r.op)).collect::<Vec<_>>().iter()).map(|o| o.1).max().unwrap_or(0) + 1;
        s.rebuild_working();
        s.rebuild_stencil();
        Ok(s)
    }
}

fn read_all(p: &Path) -> Result<Vec<u8>, ReplicaError> {
    match File::open(p) {
        Ok(mut f) => {
            let mut v = Vec::new();
            f.read_to_end(&mut v)?;
            Ok(v)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

fn atomic_write(p: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = p.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner()?.sync_data()?;
    }
    fs::rename(tmp, p)
}

fn encode_record(r: &CommitRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(53 + r.delta.len() * (4 + BLOCK_SIZE));
    out.extend_from_slice(&r.txn.to_le_bytes());
    out.extend_from_slice(&r.epoch.to_le_bytes());
    out.extend_from_slice(&encode_fileop(&r.op));
    out.extend_from_slice(&(r.delta.len() as u32).to_le_bytes());
    for (id, b) in &r.delta {
        out.extend_from_slice(&id.0.to_le_bytes());
        out.extend_from_slice(b.as_bytes());
    }
    out
}

fn decode_record(b: &[u8]) -> Option<(CommitRecord, usize)> {
    let head = 16 + FILEOP_LEN + 4;
    if b.len() < head {
        return None;
    }
    let txn = u64::from_le_bytes(b[0..8].try_into().ok()?);
    let epoch = u64::from_le_bytes(b[8..16].try_into().ok()?);
    let op = decode_fileop(&b[16..16 + FILEOP_LEN]).ok()?;
    let n = u32::from_le_bytes(b[16 + FILEOP_LEN..head].try_into().ok()?) as usize;
    let end = head + n * (4 + BLOCK_SIZE);
    if b.len() < end {
        return None;
    }
    let mut delta = BTreeMap::new();
    for c in b[head..end].chunks_exact(4 + BLOCK_SIZE) {
        delta.insert(BlockId(u32::from_le_bytes(c[..4].try_into().ok()?)), Block::from_slice(&c[4..])?);
    }
    Some((
        CommitRecord { txn, op, delta, fds_after: FdTable::new(), epoch, phase: Phase::Staged },
        end,
    ))
}
