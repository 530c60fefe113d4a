use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::layout::*;
use crate::blockstore::{Block, BlockId, BLOCK_SIZE};
use crate::op::{
    BlockRequest, FileOp, NameToken, OpError, OpKind, OpOutcome, OpenFlags, Whence, MAX_RESULT_VALUE,
    ROOT_PARENT,
};

/// The only way the engine reaches the disk.
pub trait MetadataAccessor {
    fn read_meta(&mut self, id: BlockId) -> Result<Block, AccessReject>;
    fn write_meta(&mut self, id: BlockId, block: &Block) -> Result<(), AccessReject>;
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
#[error("metadata access to block {0} rejected")]
pub struct AccessReject(pub BlockId);

/// Failures that are not filesystem results: the accessor refused a block
/// or the metadata it served does not parse.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error(transparent)]
    Reject(#[from] AccessReject),
    #[error("corrupt metadata: {0}")]
    Corrupt(String),
}

impl From<LayoutError> for EngineError {
    fn from(e: LayoutError) -> Self {
        EngineError::Corrupt(e.to_string())
    }
}

enum Fail {
    Op(OpError),
    Engine(EngineError),
}

impl From<OpError> for Fail {
    fn from(e: OpError) -> Self {
        Fail::Op(e)
    }
}

impl From<EngineError> for Fail {
    fn from(e: EngineError) -> Self {
        Fail::Engine(e)
    }
}

impl From<AccessReject> for Fail {
    fn from(e: AccessReject) -> Self {
        Fail::Engine(e.into())
    }
}

impl From<LayoutError> for Fail {
    fn from(e: LayoutError) -> Self {
        Fail::Engine(e.into())
    }
}

type R<T> = Result<T, Fail>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EngineFd {
    pub inode: u32,
    pub pos: u64,
    pub dir: bool,
}

pub type FdTable = BTreeMap<u32, EngineFd>;

/// Per-op block cache. Reads go through once; writes are buffered and
/// flushed in ascending block order when the op finishes, so inode-table
/// blocks (which link new blocks) always reach the disk before the
/// directory blocks they point to.
struct Ctx<'a> {
    acc: &'a mut dyn MetadataAccessor,
    cache: BTreeMap<BlockId, Block>,
    dirty: BTreeSet<BlockId>,
}

impl<'a> Ctx<'a> {
    fn new(acc: &'a mut dyn MetadataAccessor) -> Self {
        Ctx { acc, cache: BTreeMap::new(), dirty: BTreeSet::new() }
    }

    fn block(&mut self, id: BlockId) -> Result<&mut Block, AccessReject> {
        if !self.cache.contains_key(&id) {
            let b = self.acc.read_meta(id)?;
            self.cache.insert(id, b);
        }
        Ok(self.cache.get_mut(&id).unwrap())
    }

    fn put(&mut self, id: BlockId, b: Block) {
        self.cache.insert(id, b);
        self.dirty.insert(id);
    }

    fn mark(&mut self, id: BlockId) {
        self.dirty.insert(id);
    }

    fn flush(&mut self) -> Result<(), AccessReject> {
        for id in std::mem::take(&mut self.dirty) {
            let b = &self.cache[&id];
            self.acc.write_meta(id, b)?;
        }
        Ok(())
    }
}

/// Filesystem engine with a per-session descriptor table.
#[derive(Debug, Default, Clone)]
pub struct Engine {
    sb: Option<Superblock>,
    fds: FdTable,
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fds(&self) -> &FdTable {
        &self.fds
    }

    pub fn set_fds(&mut self, fds: FdTable) {
        self.fds = fds;
    }

    /// Executes one op. Metadata reads and writes go through `acc`; the
    /// returned trace lists the data blocks the op moves.
    pub fn exec_fileop(&mut self, op: &FileOp, acc: &mut dyn MetadataAccessor) -> Result<OpOutcome, EngineError> {
        let mut ctx = Ctx::new(acc);
        let res = self.dispatch(op, &mut ctx);
        let out = match res {
            Ok(out) => out,
            Err(Fail::Op(e)) => OpOutcome::err(e),
            Err(Fail::Engine(e)) => return Err(e),
        };
        ctx.flush()?;
        Ok(out)
    }

    /// Walks `tokens` from the root directory.
    pub fn resolve_path(
        &mut self,
        acc: &mut dyn MetadataAccessor,
        tokens: &[NameToken],
    ) -> Result<Result<u32, OpError>, EngineError> {
        let mut ctx = Ctx::new(acc);
        let r = (|| -> R<u32> {
            if tokens.is_empty() {
                return Err(OpError::NoSuchFile.into());
            }
            let sb = self.superblock(&mut ctx)?;
            let mut cur = ROOT_INODE;
            for t in tokens {
                let dir = read_inode(&mut ctx, &sb, cur)?;
                if dir.mode != InodeMode::Dir {
                    return Err(OpError::NotDir.into());
                }
                cur = lookup(&mut ctx, &dir, t)?.ok_or(OpError::NoSuchFile)?;
            }
            Ok(cur)
        })();
        lift(r)
    }

    /// First-fit data block allocation.
    pub fn allocate_block(&mut self, acc: &mut dyn MetadataAccessor) -> Result<Result<BlockId, OpError>, EngineError> {
        let mut ctx = Ctx::new(acc);
        let r = (|| -> R<BlockId> {
            let sb = self.superblock(&mut ctx)?;
            let got = find_free_blocks(&mut ctx, &sb, 1, false)?;
            let id = *got.first().ok_or(OpError::NoSpace)?;
            set_block_bit(&mut ctx, &sb, id, true)?;
            Ok(id)
        })();
        let r = lift(r)?;
        ctx.flush()?;
        Ok(r)
    }

    pub fn free_block(&mut self, acc: &mut dyn MetadataAccessor, id: BlockId) -> Result<(), EngineError> {
        let mut ctx = Ctx::new(acc);
        let sb = self.superblock(&mut ctx).map_err(unfail)?;
        set_block_bit(&mut ctx, &sb, id, false).map_err(unfail)?;
        ctx.flush()?;
        Ok(())
    }

    /// First-fit inode allocation.
    pub fn allocate_inode(&mut self, acc: &mut dyn MetadataAccessor) -> Result<Result<u32, OpError>, EngineError> {
        let mut ctx = Ctx::new(acc);
        let r = (|| -> R<u32> {
            let sb = self.superblock(&mut ctx)?;
            let ino = find_free_inode(&mut ctx, &sb)?.ok_or(OpError::NoSpace)?;
            set_inode_bit(&mut ctx, &sb, ino, true)?;
            Ok(ino)
        })();
        let r = lift(r)?;
        ctx.flush()?;
        Ok(r)
    }

    fn superblock(&mut self, ctx: &mut Ctx) -> R<Superblock> {
        if let Some(sb) = self.sb {
            return Ok(sb);
        }
        let sb = Superblock::decode(ctx.block(BlockId(0))?.as_bytes())?;
        self.sb = Some(sb);
        Ok(sb)
    }

    fn fd(&self, fd: u32) -> R<EngineFd> {
        self.fds.get(&fd).copied().ok_or(Fail::Op(OpError::BadFd))
    }

    fn dispatch(&mut self, op: &FileOp, ctx: &mut Ctx) -> R<OpOutcome> {
        let sb = self.superblock(ctx)?;
        match op.kind {
            OpKind::Open => self.open(ctx, &sb, op),
            OpKind::Read => self.read(ctx, &sb, op),
            OpKind::Write => self.write(ctx, &sb, op),
            OpKind::Fsync => self.fd(op.fd).map(|_| OpOutcome::ok(0)),
            OpKind::Close => {
                self.fds.remove(&op.fd).ok_or(OpError::BadFd)?;
                Ok(OpOutcome::ok(0))
            }
            OpKind::Lseek => self.lseek(ctx, &sb, op),
            OpKind::Fstat => {
                let f = self.fd(op.fd)?;
                Ok(OpOutcome::ok(read_inode(ctx, &sb, f.inode)?.size))
            }
        }
    }

    fn open(&mut self, ctx: &mut Ctx, sb: &Superblock, op: &FileOp) -> R<OpOutcome> {
        let parent = if op.count == ROOT_PARENT {
            ROOT_INODE
        } else {
            let p = self.fd(u32::try_from(op.count).map_err(|_| OpError::BadFd)?)?;
            if !p.dir {
                return Err(OpError::NotDir.into());
            }
            p.inode
        };
        let mut dir = read_inode(ctx, sb, parent)?;
        if dir.mode != InodeMode::Dir {
            return Err(OpError::NotDir.into());
        }
        let want_dir = op.flags.contains(OpenFlags::DIRECTORY);
        let ino = match lookup(ctx, &dir, &op.name)? {
            Some(ino) => {
                let mut inode = read_inode(ctx, sb, ino)?;
                match (inode.mode, want_dir) {
                    (InodeMode::Dir, false) => return Err(OpError::IsDir.into()),
                    (InodeMode::File, true) => return Err(OpError::NotDir.into()),
                    (InodeMode::Free, _) => return Err(EngineError::Corrupt(format!("dirent -> free inode {ino}")).into()),
                    _ => {}
                }
                if inode.mode == InodeMode::File && op.flags.contains(OpenFlags::TRUNC) {
                    for d in inode.direct.iter_mut().filter(|d| **d != 0) {
                        set_block_bit(ctx, sb, BlockId(*d), false)?;
                        *d = 0;
                    }
                    inode.size = 0;
                    inode.inline_len = 0;
                    inode.inline = [0; INLINE_CAP];
                    write_inode(ctx, sb, ino, &inode)?;
                }
                ino
            }
            None if op.flags.contains(OpenFlags::CREATE) => {
                let n = dir.size as usize / DIRENT_SIZE;
                if n >= MAX_DIRENTS {
                    return Err(OpError::NoSpace.into());
                }
                let needs_block = n.is_multiple_of(DIRENTS_PER_BLOCK);
                let new_block = if needs_block {
                    let got = find_free_blocks(ctx, sb, 1, true)?;
                    Some(*got.first().ok_or(OpError::NoSpace)?)
                } else {
                    None
                };
                let ino = find_free_inode(ctx, sb)?.ok_or(OpError::NoSpace)?;
                set_inode_bit(ctx, sb, ino, true)?;
                let mode = if want_dir { InodeMode::Dir } else { InodeMode::File };
                write_inode(ctx, sb, ino, &Inode::new(mode))?;

                let page = n / DIRENTS_PER_BLOCK;
                if let Some(b) = new_block {
                    set_block_bit(ctx, sb, b, true)?;
                    dir.direct[page] = b.0;
                    ctx.put(b, Block::zeroed());
                }
                let blk = BlockId(dir.direct[page]);
                let slot = (n % DIRENTS_PER_BLOCK) * DIRENT_SIZE;
                let entry = DirEntry { inode: ino, name: op.name, valid: true };
                entry.encode_into(&mut ctx.block(blk)?.as_mut_bytes()[slot..slot + DIRENT_SIZE]);
                ctx.mark(blk);
                dir.size += DIRENT_SIZE as u32;
                write_inode(ctx, sb, parent, &dir)?;
                ino
            }
            None => return Err(OpError::NoSuchFile.into()),
        };
        self.fds.insert(op.fd, EngineFd { inode: ino, pos: 0, dir: want_dir });
        Ok(OpOutcome::ok(ino))
    }

    fn read(&mut self, ctx: &mut Ctx, sb: &Superblock, op: &FileOp) -> R<OpOutcome> {
        let f = self.fd(op.fd)?;
        if f.dir {
            return Err(OpError::IsDir.into());
        }
        let inode = read_inode(ctx, sb, f.inode)?;
        let avail = (inode.size as u64).saturating_sub(f.pos);
        let n = op.count.min(avail);
        let mut trace = Vec::new();
        if n > 0 && !inode.is_inline() {
            let first = (f.pos / BLOCK_SIZE as u64) as usize;
            let last = ((f.pos + n - 1) / BLOCK_SIZE as u64) as usize;
            for p in first..=last {
                let b = inode.direct[p];
                if b == 0 {
                    return Err(EngineError::Corrupt(format!("inode {} has a hole at page {p}", f.inode)).into());
                }
                trace.push(BlockRequest::read(b));
            }
        }
        self.fds.get_mut(&op.fd).unwrap().pos = f.pos + n;
        Ok(OpOutcome { trace, result: Ok(n as u32) })
    }

    fn write(&mut self, ctx: &mut Ctx, sb: &Superblock, op: &FileOp) -> R<OpOutcome> {
        let f = self.fd(op.fd)?;
        if f.dir {
            return Err(OpError::IsDir.into());
        }
        if op.count == 0 {
            return Ok(OpOutcome::ok(0));
        }
        let end = f.pos.checked_add(op.count).ok_or(OpError::TooLarge)?;
        if end > MAX_FILE_SIZE {
            return Err(OpError::TooLarge.into());
        }
        let mut inode = read_inode(ctx, sb, f.inode)?;
        let has_blocks = inode.direct[0] != 0;
        let mut trace = Vec::new();
        if !has_blocks && end <= INLINE_CAP as u64 {
            let len = (inode.size as u64).max(end) as u32;
            inode.size = len;
            inode.inline_len = len;
        } else {
            let old_pages = if inode.is_inline() { 0 } else { inode.allocated_pages() };
            let first = ((f.pos / BLOCK_SIZE as u64) as usize).min(old_pages);
            let last = ((end - 1) / BLOCK_SIZE as u64) as usize;
            let missing = (first..=last).filter(|&p| inode.direct[p] == 0).count();
            let fresh = find_free_blocks(ctx, sb, missing, false)?;
            if fresh.len() < missing {
                return Err(OpError::NoSpace.into());
            }
            let mut fresh = fresh.into_iter();
            for p in first..=last {
                if inode.direct[p] == 0 {
                    let b = fresh.next().unwrap();
                    set_block_bit(ctx, sb, b, true)?;
                    inode.direct[p] = b.0;
                }
                trace.push(BlockRequest::write(inode.direct[p]));
            }
            inode.size = (inode.size as u64).max(end) as u32;
            inode.inline_len = 0;
            inode.inline = [0; INLINE_CAP];
        }
        write_inode(ctx, sb, f.inode, &inode)?;
        self.fds.get_mut(&op.fd).unwrap().pos = end;
        Ok(OpOutcome { trace, result: Ok(op.count as u32) })
    }

    fn lseek(&mut self, ctx: &mut Ctx, sb: &Superblock, op: &FileOp) -> R<OpOutcome> {
        let f = self.fd(op.fd)?;
        let whence = Whence::from_u32(op.flags.0).ok_or(OpError::Invalid)?;
        let off = op.count as i64;
        let base: i64 = match whence {
            Whence::Set => 0,
            Whence::Cur => f.pos as i64,
            Whence::End => read_inode(ctx, sb, f.inode)?.size as i64,
        };
        let new = base.checked_add(off).ok_or(OpError::Invalid)?;
        if new < 0 || new > MAX_RESULT_VALUE as i64 {
            return Err(OpError::Invalid.into());
        }
        self.fds.get_mut(&op.fd).unwrap().pos = new as u64;
        Ok(OpOutcome::ok(new as u32))
    }
}

fn lift<T>(r: R<T>) -> Result<Result<T, OpError>, EngineError> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(Fail::Op(e)) => Ok(Err(e)),
        Err(Fail::Engine(e)) => Err(e),
    }
}

fn unfail(f: Fail) -> EngineError {
    match f {
        Fail::Op(e) => EngineError::Corrupt(e.to_string()),
        Fail::Engine(e) => e,
    }
}

fn read_inode(ctx: &mut Ctx, sb: &Superblock, ino: u32) -> R<Inode> {
    if ino >= sb.inode_count {
        return Err(EngineError::Corrupt(format!("inode {ino} out of range")).into());
    }
    let (blk, off) = sb.inode_location(ino);
    let b = ctx.block(blk)?;
    Ok(Inode::decode(&b.as_bytes()[off..off + INODE_SIZE], ino)?)
}

fn write_inode(ctx: &mut Ctx, sb: &Superblock, ino: u32, inode: &Inode) -> R<()> {
    let (blk, off) = sb.inode_location(ino);
    inode.encode_into(&mut ctx.block(blk)?.as_mut_bytes()[off..off + INODE_SIZE]);
    ctx.mark(blk);
    Ok(())
}

fn lookup(ctx: &mut Ctx, dir: &Inode, name: &NameToken) -> R<Option<u32>> {
    let n = dir.size as usize / DIRENT_SIZE;
    for i in 0..n {
        let page = i / DIRENTS_PER_BLOCK;
        let blk = dir.direct.get(page).copied().unwrap_or(0);
        if blk == 0 {
            return Err(EngineError::Corrupt("directory entry past allocated blocks".into()).into());
        }
        let slot = (i % DIRENTS_PER_BLOCK) * DIRENT_SIZE;
        let e = DirEntry::decode(&ctx.block(BlockId(blk))?.as_bytes()[slot..slot + DIRENT_SIZE]);
        if e.valid && e.name == *name {
            return Ok(Some(e.inode));
        }
    }
    Ok(None)
}

fn bit_location(base: BlockId, idx: u32) -> (BlockId, usize, u8) {
    let blk = BlockId(base.0 + idx / BITS_PER_BLOCK);
    let rel = (idx % BITS_PER_BLOCK) as usize;
    (blk, rel / 8, 1 << (rel % 8))
}

fn set_block_bit(ctx: &mut Ctx, sb: &Superblock, id: BlockId, used: bool) -> R<()> {
    if !sb.is_data_region(id) {
        return Err(EngineError::Corrupt(format!("block {id} outside data region")).into());
    }
    let (blk, byte, mask) = bit_location(sb.bitmap_block, id.0);
    let b = ctx.block(blk)?;
    let cell = &mut b.as_mut_bytes()[byte];
    if used {
        *cell |= mask;
    } else {
        *cell &= !mask;
    }
    ctx.mark(blk);
    Ok(())
}

fn set_inode_bit(ctx: &mut Ctx, sb: &Superblock, ino: u32, used: bool) -> R<()> {
    let (blk, byte, mask) = bit_location(sb.inode_bitmap_block, ino);
    let b = ctx.block(blk)?;
    let cell = &mut b.as_mut_bytes()[byte];
    if used {
        *cell |= mask;
    } else {
        *cell &= !mask;
    }
    ctx.mark(blk);
    Ok(())
}

/// Up to `n` free data blocks, lowest first, or highest first when
/// `from_top` is set (directory blocks are packed at the end of the disk so
/// file data starts at `data_start`).
fn find_free_blocks(ctx: &mut Ctx, sb: &Superblock, n: usize, from_top: bool) -> R<Vec<BlockId>> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    let lo = sb.data_start.0;
    let hi = sb.total_blocks;
    let check = |ctx: &mut Ctx, id: u32| -> R<bool> {
        let (blk, byte, mask) = bit_location(sb.bitmap_block, id);
        Ok(ctx.block(blk)?.as_bytes()[byte] & mask == 0)
    };
    if from_top {
        for id in (lo..hi).rev() {
            if check(ctx, id)? {
                out.push(BlockId(id));
                if out.len() == n {
                    break;
                }
            }
        }
    } else {
        for id in lo..hi {
            if check(ctx, id)? {
                out.push(BlockId(id));
                if out.len() == n {
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn find_free_inode(ctx: &mut Ctx, sb: &Superblock) -> R<Option<u32>> {
    for ino in 0..sb.inode_count {
        let (blk, byte, mask) = bit_location(sb.inode_bitmap_block, ino);
        if ctx.block(blk)?.as_bytes()[byte] & mask == 0 {
            return Ok(Some(ino));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockstore::BlockStore;
    use crate::minifs::{mkfs, BlockSource, MetadataImage};
    use crate::op::{BlockRequest as Rq, FileOp};
    use proptest::prelude::*;

    /// Direct accessor over a full image.
    struct Direct<'a>(&'a mut BlockStore);

    impl MetadataAccessor for Direct<'_> {
        fn read_meta(&mut self, id: BlockId) -> Result<Block, AccessReject> {
            self.0.read_block(id).map_err(|_| AccessReject(id))
        }
        fn write_meta(&mut self, id: BlockId, block: &Block) -> Result<(), AccessReject> {
            self.0.write_block(id, block.clone()).map_err(|_| AccessReject(id))
        }
    }

    struct Meta<'a>(&'a mut MetadataImage);

    impl MetadataAccessor for Meta<'_> {
        fn read_meta(&mut self, id: BlockId) -> Result<Block, AccessReject> {
            Ok(self.0.source_block(id))
        }
        fn write_meta(&mut self, id: BlockId, block: &Block) -> Result<(), AccessReject> {
            self.0.set(id, block.clone());
            Ok(())
        }
    }

    fn tok(i: u8) -> NameToken {
        NameToken([i; 16])
    }

    fn create(e: &mut Engine, acc: &mut dyn MetadataAccessor, fd: u32, name: u8) -> u32 {
        let out = e.exec_fileop(&FileOp::open(fd, ROOT_PARENT, tok(name), OpenFlags::CREATE), acc).unwrap();
        out.result.unwrap()
    }

    #[test]
    fn first_write_lands_on_data_start() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        create(&mut e, &mut acc, 0, 1);
        let out = e.exec_fileop(&FileOp::write(0, 4096), &mut acc).unwrap();
        assert_eq!(out.trace, vec![Rq::write(4)]);
        assert_eq!(out.result, Ok(4096));
        // The root directory block came from the top.
        let sb = store.superblock().unwrap();
        assert_eq!(store.inode(&sb, 0).unwrap().direct[0], 63);
    }

    #[test]
    fn inline_read_has_empty_trace() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        create(&mut e, &mut acc, 0, 1);
        assert!(e.exec_fileop(&FileOp::write(0, 40), &mut acc).unwrap().trace.is_empty());
        e.exec_fileop(&FileOp::lseek(0, 0, Whence::Set), &mut acc).unwrap();
        let out = e.exec_fileop(&FileOp::read(0, 100), &mut acc).unwrap();
        assert!(out.trace.is_empty());
        assert_eq!(out.result, Ok(40));
    }

    #[test]
    fn read_second_page() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        let ino = create(&mut e, &mut acc, 0, 1);
        e.exec_fileop(&FileOp::write(0, 8192), &mut acc).unwrap();
        e.exec_fileop(&FileOp::lseek(0, 4096, Whence::Set), &mut acc).unwrap();
        let out = e.exec_fileop(&FileOp::read(0, 4096), &mut acc).unwrap();
        let sb = store.superblock().unwrap();
        let d2 = store.inode(&sb, ino).unwrap().direct[1];
        assert_eq!(out.trace, vec![Rq::read(d2)]);
        assert_eq!(d2, 5);
    }

    #[test]
    fn inline_migration_and_gap_pages() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        create(&mut e, &mut acc, 0, 1);
        e.exec_fileop(&FileOp::write(0, 10), &mut acc).unwrap();
        // Jump past a full page: page 0 (migrated) and page 1 (gap) and page 2.
        e.exec_fileop(&FileOp::lseek(0, 9000, Whence::Set), &mut acc).unwrap();
        let out = e.exec_fileop(&FileOp::write(0, 10), &mut acc).unwrap();
        assert_eq!(out.trace, vec![Rq::write(4), Rq::write(5), Rq::write(6)]);
        let fs = e.exec_fileop(&FileOp::fstat(0), &mut acc).unwrap();
        assert_eq!(fs.result, Ok(9010));
    }

    #[test]
    fn alloc_free_alloc_reuses() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        assert_eq!(e.allocate_block(&mut acc).unwrap(), Ok(BlockId(4)));
        e.free_block(&mut acc, BlockId(4)).unwrap();
        assert_eq!(e.allocate_block(&mut acc).unwrap(), Ok(BlockId(4)));
        assert_eq!(e.allocate_inode(&mut acc).unwrap(), Ok(1));
    }

    #[test]
    fn full_bitmap_no_space() {
        let (mut store, _) = mkfs(8, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        for _ in 0..4 {
            e.allocate_block(&mut acc).unwrap().unwrap();
        }
        assert_eq!(e.allocate_block(&mut acc).unwrap(), Err(OpError::NoSpace));
    }

    #[test]
    fn write_no_space_changes_nothing() {
        let (mut store, _) = mkfs(8, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        create(&mut e, &mut acc, 0, 1); // takes the top block for the root dir
        let before = acc.0.digest();
        let out = e.exec_fileop(&FileOp::write(0, 4 * 4096), &mut acc).unwrap();
        assert_eq!(out.result, Err(OpError::NoSpace));
        assert_eq!(acc.0.digest(), before);
    }

    #[test]
    fn resolve_paths() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        assert_eq!(e.resolve_path(&mut acc, &[]).unwrap(), Err(OpError::NoSuchFile));
        let d = e
            .exec_fileop(&FileOp::open(0, ROOT_PARENT, tok(1), OpenFlags::CREATE | OpenFlags::DIRECTORY), &mut acc)
            .unwrap()
            .result
            .unwrap();
        let f = e
            .exec_fileop(&FileOp::open(1, 0, tok(2), OpenFlags::CREATE), &mut acc)
            .unwrap()
            .result
            .unwrap();
        assert_eq!(e.resolve_path(&mut acc, &[tok(1)]).unwrap(), Ok(d));
        assert_eq!(e.resolve_path(&mut acc, &[tok(1), tok(2)]).unwrap(), Ok(f));
        assert_eq!(e.resolve_path(&mut acc, &[tok(2)]).unwrap(), Err(OpError::NoSuchFile));
    }

    #[test]
    fn truncate_frees_blocks() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        create(&mut e, &mut acc, 0, 1);
        e.exec_fileop(&FileOp::write(0, 5000), &mut acc).unwrap();
        let before = crate::minifs::free_data_blocks(&store).unwrap();
        let mut acc = Direct(&mut store);
        e.exec_fileop(&FileOp::open(1, ROOT_PARENT, tok(1), OpenFlags::TRUNC), &mut acc).unwrap();
        assert_eq!(e.exec_fileop(&FileOp::fstat(1), &mut acc).unwrap().result, Ok(0));
        assert_eq!(crate::minifs::free_data_blocks(&store).unwrap(), before + 2);
    }

    #[test]
    fn op_errors() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut e = Engine::new();
        let mut acc = Direct(&mut store);
        let r = e.exec_fileop(&FileOp::open(0, ROOT_PARENT, tok(1), OpenFlags::empty()), &mut acc).unwrap();
        assert_eq!(r.result, Err(OpError::NoSuchFile));
        assert_eq!(e.exec_fileop(&FileOp::read(9, 1), &mut acc).unwrap().result, Err(OpError::BadFd));
        create(&mut e, &mut acc, 0, 1);
        e.exec_fileop(&FileOp::lseek(0, 49150, Whence::Set), &mut acc).unwrap();
        assert_eq!(e.exec_fileop(&FileOp::write(0, 10), &mut acc).unwrap().result, Err(OpError::TooLarge));
        assert_eq!(
            e.exec_fileop(&FileOp::lseek(0, -1, Whence::Set), &mut acc).unwrap().result,
            Err(OpError::Invalid)
        );
    }

    #[derive(Clone, Debug)]
    enum Step {
        Create(u8),
        Mkdir(u8),
        Write(u8, u16),
        Seek(u8, u16),
        Read(u8, u16),
        Trunc(u8),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            (0u8..6).prop_map(Step::Create),
            (0u8..3).prop_map(Step::Mkdir),
            (0u8..6, 0u16..9000).prop_map(|(f, n)| Step::Write(f, n)),
            (0u8..6, 0u16..20000).prop_map(|(f, n)| Step::Seek(f, n)),
            (0u8..6, 0u16..9000).prop_map(|(f, n)| Step::Read(f, n)),
            (0u8..6).prop_map(Step::Trunc),
        ]
    }

    fn to_op(s: &Step) -> FileOp {
        match *s {
            Step::Create(f) => FileOp::open(f as u32, ROOT_PARENT, tok(f), OpenFlags::CREATE),
            Step::Mkdir(d) => {
                FileOp::open(100 + d as u32, ROOT_PARENT, tok(100 + d), OpenFlags::CREATE | OpenFlags::DIRECTORY)
            }
            Step::Write(f, n) => FileOp::write(f as u32, n as u64),
            Step::Seek(f, n) => FileOp::lseek(f as u32, n as i64, Whence::Set),
            Step::Read(f, n) => FileOp::read(f as u32, n as u64),
            Step::Trunc(f) => FileOp::open(f as u32, ROOT_PARENT, tok(f), OpenFlags::TRUNC),
        }
    }

    proptest! {
        // Full-data and metadata-only execution agree on every trace and
        // result, and the metadata-only image stays equal to the metadata
        // blocks of the full image.
        #[test]
        fn twin_determinism(steps in proptest::collection::vec(step(), 1..40)) {
            let (mut full, mut meta) = mkfs(128, 32).unwrap();
            let mut a = Engine::new();
            let mut b = Engine::new();
            for s in &steps {
                let op = to_op(s);
                let x = a.exec_fileop(&op, &mut Direct(&mut full)).unwrap();
                let y = b.exec_fileop(&op, &mut Meta(&mut meta)).unwrap();
                prop_assert_eq!(x, y);
            }
            for (id, blk) in meta.blocks() {
                prop_assert_eq!(&full.read_block(id).unwrap(), blk);
            }
        }

        #[test]
        fn distinct_names_resolve_distinctly(names in proptest::collection::btree_set(any::<[u8; 16]>(), 1..20)) {
            let (mut store, _) = mkfs(256, 64).unwrap();
            let mut e = Engine::new();
            let mut acc = Direct(&mut store);
            let mut inodes = Vec::new();
            for (i, n) in names.iter().enumerate() {
                let op = FileOp::open(i as u32, ROOT_PARENT, NameToken(*n), OpenFlags::CREATE);
                inodes.push(e.exec_fileop(&op, &mut acc).unwrap().result.unwrap());
            }
            for (n, ino) in names.iter().zip(&inodes) {
                prop_assert_eq!(e.resolve_path(&mut acc, &[NameToken(*n)]).unwrap(), Ok(*ino));
            }
            let uniq: BTreeSet<_> = inodes.iter().collect();
            prop_assert_eq!(uniq.len(), inodes.len());
        }
    }
}
