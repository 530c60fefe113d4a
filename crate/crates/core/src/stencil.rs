//! Metadata stencils: which bytes of each block are filesystem metadata.
//!
//! Every block that crosses from the trusted store to the local twin goes
//! through [`StencilMap::serve_block_read`], and every block the twin hands
//! back goes through [`StencilMap::apply_block_write`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::blockstore::{Block, BlockId, BLOCK_SIZE};
use crate::minifs::layout::{INLINE_OFFSET, INODE_SIZE, INODES_PER_BLOCK};
use crate::minifs::{BlockSource, Inode, InodeMode, LayoutError, Superblock};

pub type ByteRange = Range<u16>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockClass {
    FullMetadata,
    FullData,
    /// Sorted, disjoint metadata ranges; everything else in the block is data.
    Mixed(Vec<ByteRange>),
    Unused,
}

impl BlockClass {
    fn code(&self) -> u8 {
        match self {
            BlockClass::Unused => 0,
            BlockClass::FullMetadata => 1,
            BlockClass::FullData => 2,
            BlockClass::Mixed(_) => 3,
        }
    }

    /// Metadata byte ranges of the block.
    pub fn metadata_ranges(&self) -> Vec<ByteRange> {
        match self {
            #[allow(clippy::single_range_in_vec_init)]
            BlockClass::FullMetadata => vec![0..BLOCK_SIZE as u16],
            BlockClass::Mixed(r) => r.clone(),
            BlockClass::FullData | BlockClass::Unused => Vec::new(),
        }
    }

    /// Byte ranges the local twin must never see.
    pub fn data_ranges(&self) -> Vec<ByteRange> {
        match self {
            #[allow(clippy::single_range_in_vec_init)]
            BlockClass::FullData => vec![0..BLOCK_SIZE as u16],
            BlockClass::Mixed(r) => complement(r),
            BlockClass::FullMetadata | BlockClass::Unused => Vec::new(),
        }
    }
}

impl fmt::Display for BlockClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockClass::FullMetadata => write!(f, "FullMetadata"),
            BlockClass::FullData => write!(f, "FullData"),
            BlockClass::Unused => write!(f, "Unused"),
            BlockClass::Mixed(r) => {
                write!(f, "Mixed [")?;
                for (i, x) in r.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{}-{}", x.start, x.end - 1)?;
                }
                write!(f, "]")
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
#[error("stencil rejected access to block {0}")]
pub struct StencilReject(pub BlockId);

fn complement(meta: &[ByteRange]) -> Vec<ByteRange> {
    let mut out = Vec::new();
    let mut at = 0u16;
    for r in meta {
        if r.start > at {
            out.push(at..r.start);
        }
        at = r.end;
    }
    if (at as usize) < BLOCK_SIZE {
        out.push(at..BLOCK_SIZE as u16);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct InodeRefs {
    mode: u8,
    blocks: Vec<u32>,
    window: bool,
}

impl InodeRefs {
    fn of(inode: &Inode, sb: &Superblock) -> Self {
        let blocks = inode
            .direct
            .iter()
            .copied()
            .filter(|&b| b != 0 && sb.is_data_region(BlockId(b)))
            .collect();
        InodeRefs {
            mode: inode.mode as u8,
            blocks,
            window: has_window(inode),
        }
    }
}

/// A file inode with no data blocks keeps its bytes in the inline window.
fn has_window(inode: &Inode) -> bool {
    inode.mode == InodeMode::File && inode.direct[0] == 0
}

/// What a refresh changed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RefreshReport {
    pub changed: Vec<BlockId>,
    /// Ranges that held file bytes before and are now visible to the twin.
    /// The caller must clear them in the trusted store.
    pub declassified: Vec<(BlockId, ByteRange)>,
}

/// Class changes, as carried on the wire in cloud-stencil mode.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StencilDelta {
    pub entries: Vec<(BlockId, BlockClass)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed stencil delta")]
pub struct DeltaError;

impl StencilDelta {
    /// `n(4) | n x (block(4) class(1) [k(2) k x (start(2) end(2))])`, with
    /// the range list present only for Mixed.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, c) in &self.entries {
            out.extend_from_slice(&id.0.to_le_bytes());
            out.push(c.code());
            if let BlockClass::Mixed(r) = c {
                out.extend_from_slice(&(r.len() as u16).to_le_bytes());
                for x in r {
                    out.extend_from_slice(&x.start.to_le_bytes());
                    out.extend_from_slice(&x.end.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes one delta from the front of `b`, returning the bytes used.
    pub fn decode(b: &[u8]) -> Result<(Self, usize), DeltaError> {
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], DeltaError> {
            let s = b.get(at..at + n).ok_or(DeltaError)?;
            at += n;
            Ok(s)
        };
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let id = BlockId(u32::from_le_bytes(take(4)?.try_into().unwrap()));
            let class = match take(1)?[0] {
                0 => BlockClass::Unused,
                1 => BlockClass::FullMetadata,
                2 => BlockClass::FullData,
                3 => {
                    let k = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
                    let mut r = Vec::with_capacity(k);
                    let mut prev = 0u16;
                    for i in 0..k {
                        let s = u16::from_le_bytes(take(2)?.try_into().unwrap());
                        let e = u16::from_le_bytes(take(2)?.try_into().unwrap());
                        if s >= e || e as usize > BLOCK_SIZE || (i > 0 && s <= prev) {
                            return Err(DeltaError);
                        }
                        prev = e;
                        r.push(s..e);
                    }
                    BlockClass::Mixed(r)
                }
                _ => return Err(DeltaError),
            };
            entries.push((id, class));
        }
        Ok((StencilDelta { entries }, at))
    }
}

/// Per-block classification with a 2-bit class per block and Mixed ranges
/// stored on the side.
#[derive(Clone, Debug)]
pub struct StencilMap {
    sb: Superblock,
    packed: Vec<u8>,
    mixed: BTreeMap<BlockId, Vec<ByteRange>>,
    generation: u64,
    /// Non-empty inodes and the blocks they reference.
    inodes: BTreeMap<u32, InodeRefs>,
    file_refs: HashMap<u32, u32>,
    dir_refs: HashMap<u32, u32>,
}

impl StencilMap {
    /// Parses the superblock and every inode of `src`.
    pub fn build(src: &dyn BlockSource) -> Result<Self, LayoutError> {
        let sb = src.superblock()?;
        let mut s = StencilMap::skeleton(sb);
        for k in 0..sb.inode_table_blocks {
            let id = BlockId(sb.inode_table_start.0 + k);
            let blk = src.source_block(id);
            if blk.is_zero() {
                continue;
            }
            for (ino, refs) in s.parse_table_block(id, &blk)? {
                if refs != InodeRefs::default() {
                    s.add_refs(&refs);
                    s.inodes.insert(ino, refs);
                }
            }
            s.store(id, s.table_class(id));
        }
        let referenced: BTreeSet<u32> = s.file_refs.keys().chain(s.dir_refs.keys()).copied().collect();
        for b in referenced {
            s.store(BlockId(b), s.data_class(b));
        }
        Ok(s)
    }

    /// Map with the fixed layout classified and nothing else known. Used by
    /// devices that receive their stencil from the replica.
    pub fn skeleton(sb: Superblock) -> Self {
        let mut s = StencilMap {
            sb,
            packed: vec![0; (sb.total_blocks as usize).div_ceil(4)],
            mixed: BTreeMap::new(),
            generation: 0,
            inodes: BTreeMap::new(),
            file_refs: HashMap::new(),
            dir_refs: HashMap::new(),
        };
        for id in 0..sb.data_start.0 {
            s.store(BlockId(id), BlockClass::FullMetadata);
        }
        s
    }

    pub fn superblock(&self) -> &Superblock {
        &self.sb
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn classify(&self, id: BlockId) -> BlockClass {
        if id.0 >= self.sb.total_blocks {
            return BlockClass::Unused;
        }
        let i = id.0 as usize;
        match (self.packed[i / 4] >> ((i % 4) * 2)) & 3 {
            0 => BlockClass::Unused,
            1 => BlockClass::FullMetadata,
            2 => BlockClass::FullData,
            _ => BlockClass::Mixed(self.mixed[&id].clone()),
        }
    }

    pub fn is_full_data(&self, id: BlockId) -> bool {
        id.0 < self.sb.total_blocks && {
            let i = id.0 as usize;
            (self.packed[i / 4] >> ((i % 4) * 2)) & 3 == 2
        }
    }

    fn store(&mut self, id: BlockId, class: BlockClass) {
        if id.0 >= self.sb.total_blocks {
            return;
        }
        let i = id.0 as usize;
        let shift = (i % 4) * 2;
        self.packed[i / 4] = (self.packed[i / 4] & !(3 << shift)) | (class.code() << shift);
        match class {
            BlockClass::Mixed(r) => {
                self.mixed.insert(id, r);
            }
            _ => {
                self.mixed.remove(&id);
            }
        }
    }

    /// What the twin may see of `id`.
    pub fn serve_block_read(&self, id: BlockId, trusted: &Block) -> Result<Block, StencilReject> {
        match self.classify(id) {
            BlockClass::FullMetadata => Ok(trusted.clone()),
            BlockClass::FullData => Err(StencilReject(id)),
            BlockClass::Unused => Ok(Block::zeroed()),
            BlockClass::Mixed(ranges) => {
                let mut out = Block::zeroed();
                for r in ranges {
                    let r = r.start as usize..r.end as usize;
                    out.as_mut_bytes()[r.clone()].copy_from_slice(&trusted.as_bytes()[r]);
                }
                Ok(out)
            }
        }
    }

    /// Block to store when the twin proposes `proposed` for `id`.
    pub fn apply_block_write(&self, id: BlockId, proposed: &Block, trusted: &Block) -> Result<Block, StencilReject> {
        if id.0 == 0 && proposed != trusted {
            return Err(StencilReject(id));
        }
        match self.classify(id) {
            BlockClass::FullMetadata | BlockClass::Unused => Ok(proposed.clone()),
            BlockClass::FullData => Err(StencilReject(id)),
            BlockClass::Mixed(ranges) => {
                let mut out = trusted.clone();
                for r in ranges {
                    let r = r.start as usize..r.end as usize;
                    out.as_mut_bytes()[r.clone()].copy_from_slice(&proposed.as_bytes()[r]);
                }
                Ok(out)
            }
        }
    }

    /// Re-parses the dirtied inode-table blocks and reclassifies every block
    /// whose references moved. Other dirtied blocks cannot change classes.
    pub fn refresh(&mut self, dirtied: &BTreeSet<BlockId>, src: &dyn BlockSource) -> Result<RefreshReport, LayoutError> {
        self.generation += 1;
        let mut touched = BTreeSet::new();
        let mut tables = Vec::new();
        for &id in dirtied {
            if !self.sb.is_inode_table(id) {
                continue;
            }
            let blk = src.source_block(id);
            let parsed = self.parse_table_block(id, &blk)?;
            tables.push((id, parsed));
        }
        let mut before: BTreeMap<BlockId, BlockClass> = BTreeMap::new();
        for (id, parsed) in tables {
            for (ino, refs) in parsed {
                let old = self.inodes.get(&ino).cloned().unwrap_or_default();
                if old == refs {
                    continue;
                }
                for b in old.blocks.iter().chain(refs.blocks.iter()) {
                    touched.insert(*b);
                }
                self.remove_refs(&old);
                self.add_refs(&refs);
                if refs == InodeRefs::default() {
                    self.inodes.remove(&ino);
                } else {
                    self.inodes.insert(ino, refs);
                }
            }
            before.entry(id).or_insert_with(|| self.classify(id));
            let c = self.table_class(id);
            self.store(id, c);
        }
        for &b in &touched {
            before.entry(BlockId(b)).or_insert_with(|| self.classify(BlockId(b)));
            let c = self.data_class(b);
            self.store(BlockId(b), c);
        }
        let mut report = RefreshReport::default();
        for (id, old) in before {
            let new = self.classify(id);
            if new == old {
                continue;
            }
            report.changed.push(id);
            let now_data = new.data_ranges();
            for r in old.data_ranges() {
                for gone in subtract(&r, &now_data) {
                    report.declassified.push((id, gone));
                }
            }
        }
        Ok(report)
    }

    /// Full map as a delta against the skeleton.
    pub fn full_delta(&self) -> StencilDelta {
        let mut entries = Vec::new();
        for id in 0..self.sb.total_blocks {
            let c = self.classify(BlockId(id));
            let skeleton = if id < self.sb.data_start.0 { BlockClass::FullMetadata } else { BlockClass::Unused };
            if c != skeleton {
                entries.push((BlockId(id), c));
            }
        }
        StencilDelta { entries }
    }

    pub fn delta_for(&self, ids: &[BlockId]) -> StencilDelta {
        StencilDelta { entries: ids.iter().map(|&id| (id, self.classify(id))).collect() }
    }

    /// Applies a replica-supplied delta. The fixed layout region cannot be
    /// turned into data and block 0 cannot change.
    pub fn apply_delta(&mut self, delta: &StencilDelta) -> Result<(), StencilReject> {
        for (id, c) in &delta.entries {
            let fixed = id.0 < self.sb.data_start.0;
            let bad = id.0 >= self.sb.total_blocks
                || (fixed && matches!(c, BlockClass::FullData | BlockClass::Unused))
                || (id.0 == 0 && *c != BlockClass::FullMetadata)
                || (!self.sb.is_inode_table(*id) && matches!(c, BlockClass::Mixed(_)));
            if bad {
                return Err(StencilReject(*id));
            }
        }
        self.generation += 1;
        for (id, c) in &delta.entries {
            self.store(*id, c.clone());
        }
        Ok(())
    }

    /// `block N: CLASS` lines, with runs of Unused blocks collapsed.
    pub fn audit_text(&self) -> String {
        let mut out = String::new();
        let mut run: Option<(u32, u32)> = None;
        let flush = |out: &mut String, run: &mut Option<(u32, u32)>| {
            if let Some((a, b)) = run.take() {
                if a == b {
                    out.push_str(&format!("block {a}: Unused\n"));
                } else {
                    out.push_str(&format!("block {a}-{b}: Unused\n"));
                }
            }
        };
        for id in 0..self.sb.total_blocks {
            let c = self.classify(BlockId(id));
            if c == BlockClass::Unused {
                run = Some(match run {
                    Some((a, _)) => (a, id),
                    None => (id, id),
                });
                continue;
            }
            flush(&mut out, &mut run);
            out.push_str(&format!("block {id}: {c}\n"));
        }
        flush(&mut out, &mut run);
        out
    }

    fn parse_table_block(&self, id: BlockId, blk: &Block) -> Result<Vec<(u32, InodeRefs)>, LayoutError> {
        let mut out = Vec::with_capacity(INODES_PER_BLOCK);
        for ino in self.sb.inodes_in_block(id) {
            let (_, off) = self.sb.inode_location(ino);
            let inode = Inode::decode(&blk.as_bytes()[off..off + INODE_SIZE], ino)?;
            out.push((ino, InodeRefs::of(&inode, &self.sb)));
        }
        Ok(out)
    }

    fn add_refs(&mut self, r: &InodeRefs) {
        let map = if r.mode == InodeMode::Dir as u8 { &mut self.dir_refs } else { &mut self.file_refs };
        for b in &r.blocks {
            *map.entry(*b).or_default() += 1;
        }
    }

    fn remove_refs(&mut self, r: &InodeRefs) {
        let map = if r.mode == InodeMode::Dir as u8 { &mut self.dir_refs } else { &mut self.file_refs };
        for b in &r.blocks {
            if let Some(n) = map.get_mut(b) {
                *n -= 1;
                if *n == 0 {
                    map.remove(b);
                }
            }
        }
    }

    fn data_class(&self, b: u32) -> BlockClass {
        if self.file_refs.contains_key(&b) {
            BlockClass::FullData
        } else if self.dir_refs.contains_key(&b) {
            BlockClass::FullMetadata
        } else {
            BlockClass::Unused
        }
    }

    fn table_class(&self, id: BlockId) -> BlockClass {
        let mut windows = Vec::new();
        for ino in self.sb.inodes_in_block(id) {
            if self.inodes.get(&ino).is_some_and(|r| r.window) {
                let (_, off) = self.sb.inode_location(ino);
                windows.push((off + INLINE_OFFSET) as u16..(off + INODE_SIZE) as u16);
            }
        }
        if windows.is_empty() {
            BlockClass::FullMetadata
        } else {
            BlockClass::Mixed(complement(&windows))
        }
    }

    /// Checks every structural invariant against `src`.
    pub fn check_invariants(&self, src: &dyn BlockSource) -> Result<(), String> {
        let sb = &self.sb;
        for id in 0..sb.data_start.0 {
            if self.classify(BlockId(id)) == BlockClass::FullData {
                return Err(format!("layout block {id} classified FullData"));
            }
        }
        for ino in 0..sb.inode_count {
            let inode = src.inode(sb, ino).map_err(|e| e.to_string())?;
            if inode.mode == InodeMode::File {
                for &b in inode.direct.iter().filter(|&&b| b != 0) {
                    if sb.is_data_region(BlockId(b)) && !self.is_full_data(BlockId(b)) {
                        return Err(format!("block {b} of inode {ino} not FullData"));
                    }
                }
            }
            if has_window(&inode) {
                let (blk, off) = sb.inode_location(ino);
                let meta = self.classify(blk).metadata_ranges();
                let w = (off + INLINE_OFFSET) as u16..(off + INODE_SIZE) as u16;
                if meta.iter().any(|r| r.start < w.end && w.start < r.end) {
                    return Err(format!("inline window of inode {ino} exposed"));
                }
            }
        }
        for r in self.mixed.values() {
            if r.windows(2).any(|w| w[0].end > w[1].start) || r.iter().any(|x| x.start >= x.end) {
                return Err("mixed ranges not sorted and disjoint".into());
            }
        }
        Ok(())
    }
}

fn subtract(r: &ByteRange, minus: &[ByteRange]) -> Vec<ByteRange> {
    let mut out = vec![r.clone()];
    for m in minus {
        let mut next = Vec::new();
        for x in out {
            if m.end <= x.start || m.start >= x.end {
                next.push(x);
                continue;
            }
            if x.start < m.start {
                next.push(x.start..m.start);
            }
            if m.end < x.end {
                next.push(m.end..x.end);
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockstore::BlockStore;
    use crate::minifs::{mkfs, AccessReject, Engine, MetadataAccessor};
    use crate::op::{FileOp, NameToken, OpenFlags, ROOT_PARENT};

    struct Gate<'a> {
        store: &'a mut BlockStore,
        dirty: BTreeSet<BlockId>,
    }

    impl MetadataAccessor for Gate<'_> {
        fn read_meta(&mut self, id: BlockId) -> Result<Block, AccessReject> {
            Ok(self.store.read_block(id).unwrap())
        }
        fn write_meta(&mut self, id: BlockId, block: &Block) -> Result<(), AccessReject> {
            self.dirty.insert(id);
            self.store.write_block(id, block.clone()).map_err(|_| AccessReject(id))
        }
    }

    fn run(store: &mut BlockStore, map: &mut StencilMap, e: &mut Engine, op: FileOp) -> RefreshReport {
        let mut g = Gate { store, dirty: BTreeSet::new() };
        e.exec_fileop(&op, &mut g).unwrap();
        let dirty = g.dirty;
        map.refresh(&dirty, store).unwrap()
    }

    #[test]
    fn fresh_mkfs() {
        let (store, _) = mkfs(64, 32).unwrap();
        let map = StencilMap::build(&store).unwrap();
        for id in 0..4 {
            assert_eq!(map.classify(BlockId(id)), BlockClass::FullMetadata);
        }
        for id in 4..64 {
            assert_eq!(map.classify(BlockId(id)), BlockClass::Unused);
        }
        assert_eq!(map.classify(BlockId(1000)), BlockClass::Unused);
    }

    #[test]
    fn bad_magic() {
        let store = BlockStore::new(16);
        assert!(matches!(StencilMap::build(&store), Err(LayoutError::BadMagic(0))));
    }

    #[test]
    fn inline_file_makes_table_block_mixed() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut map = StencilMap::build(&store).unwrap();
        let mut e = Engine::new();
        run(&mut store, &mut map, &mut e, FileOp::open(0, ROOT_PARENT, NameToken([1; 16]), OpenFlags::CREATE));
        run(&mut store, &mut map, &mut e, FileOp::write(0, 32));
        // Inode 1 occupies bytes 128..256; its window is 192..256.
        assert_eq!(map.classify(BlockId(3)), BlockClass::Mixed(vec![0..192, 256..4096]));
        assert_eq!(map.classify(BlockId(63)), BlockClass::FullMetadata);
        map.check_invariants(&store).unwrap();
    }

    #[test]
    fn redaction_and_merge() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut map = StencilMap::build(&store).unwrap();
        let mut e = Engine::new();
        run(&mut store, &mut map, &mut e, FileOp::open(0, ROOT_PARENT, NameToken([1; 16]), OpenFlags::CREATE));
        run(&mut store, &mut map, &mut e, FileOp::write(0, 32));
        let mut trusted = store.read_block(BlockId(3)).unwrap();
        trusted.as_mut_bytes()[192..224].copy_from_slice(b"SECRET-SECRET-SECRET-SECRET-0123");
        let served = map.serve_block_read(BlockId(3), &trusted).unwrap();
        assert!(served.as_bytes()[192..256].iter().all(|&b| b == 0));
        assert_eq!(served.as_bytes()[..192], trusted.as_bytes()[..192]);

        let mut evil = served.clone();
        evil.as_mut_bytes()[192..256].fill(0xEE);
        evil.as_mut_bytes()[4] = 99;
        let merged = map.apply_block_write(BlockId(3), &evil, &trusted).unwrap();
        assert_eq!(merged.as_bytes()[192..256], trusted.as_bytes()[192..256]);
        assert_eq!(merged.as_bytes()[4], 99);

        let bm = store.read_block(BlockId(1)).unwrap();
        assert_eq!(map.serve_block_read(BlockId(1), &bm).unwrap(), bm);
    }

    #[test]
    fn data_blocks_rejected_and_tracked() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut map = StencilMap::build(&store).unwrap();
        let mut e = Engine::new();
        let name = NameToken([1; 16]);
        run(&mut store, &mut map, &mut e, FileOp::open(0, ROOT_PARENT, name, OpenFlags::CREATE));
        run(&mut store, &mut map, &mut e, FileOp::write(0, 10));
        let rep = run(&mut store, &mut map, &mut e, FileOp::write(0, 4096));
        assert_eq!(map.classify(BlockId(4)), BlockClass::FullData);
        // The inline window of inode 1 became metadata.
        assert!(rep.declassified.contains(&(BlockId(3), 192..256)));
        let b = Block::filled(7);
        assert_eq!(map.serve_block_read(BlockId(4), &b), Err(StencilReject(BlockId(4))));
        assert_eq!(map.apply_block_write(BlockId(4), &b, &b), Err(StencilReject(BlockId(4))));

        let rep = run(&mut store, &mut map, &mut e, FileOp::open(1, ROOT_PARENT, name, OpenFlags::TRUNC));
        assert_eq!(map.classify(BlockId(4)), BlockClass::Unused);
        assert!(rep.declassified.contains(&(BlockId(4), 0..4096)));
        assert!(rep.declassified.contains(&(BlockId(5), 0..4096)));
        map.check_invariants(&store).unwrap();
    }

    #[test]
    fn noop_refresh_bumps_generation() {
        let (store, _) = mkfs(64, 32).unwrap();
        let mut map = StencilMap::build(&store).unwrap();
        let before = map.audit_text();
        let g = map.generation();
        let rep = map.refresh(&[BlockId(3)].into_iter().collect(), &store).unwrap();
        assert_eq!(map.generation(), g + 1);
        assert!(rep.changed.is_empty());
        assert_eq!(map.audit_text(), before);
    }

    #[test]
    fn superblock_pinned() {
        let (store, _) = mkfs(64, 32).unwrap();
        let map = StencilMap::build(&store).unwrap();
        let sb = store.read_block(BlockId(0)).unwrap();
        let mut evil = sb.clone();
        evil.as_mut_bytes()[8] ^= 1;
        assert!(map.apply_block_write(BlockId(0), &evil, &sb).is_err());
        assert_eq!(map.apply_block_write(BlockId(0), &sb, &sb).unwrap(), sb);
    }

    #[test]
    fn audit_golden() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut map = StencilMap::build(&store).unwrap();
        let mut e = Engine::new();
        run(&mut store, &mut map, &mut e, FileOp::open(0, ROOT_PARENT, NameToken([1; 16]), OpenFlags::CREATE));
        run(&mut store, &mut map, &mut e, FileOp::write(0, 5000));
        run(&mut store, &mut map, &mut e, FileOp::open(1, ROOT_PARENT, NameToken([2; 16]), OpenFlags::CREATE));
        let expect = "block 0: FullMetadata\nblock 1: FullMetadata\nblock 2: FullMetadata\n\
                      block 3: Mixed [0-319,384-4095]\nblock 4: FullData\nblock 5: FullData\n\
                      block 6-62: Unused\nblock 63: FullMetadata\n";
        assert_eq!(map.audit_text(), expect);
    }

    #[test]
    fn delta_round_trip_and_cloud_map() {
        let (mut store, _) = mkfs(64, 32).unwrap();
        let mut map = StencilMap::build(&store).unwrap();
        let mut e = Engine::new();
        run(&mut store, &mut map, &mut e, FileOp::open(0, ROOT_PARENT, NameToken([1; 16]), OpenFlags::CREATE));
        run(&mut store, &mut map, &mut e, FileOp::write(0, 5000));
        run(&mut store, &mut map, &mut e, FileOp::open(1, ROOT_PARENT, NameToken([2; 16]), OpenFlags::CREATE));
        let d = map.full_delta();
        let bytes = d.encode();
        let (back, used) = StencilDelta::decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, d);
        let mut cloud = StencilMap::skeleton(*map.superblock());
        cloud.apply_delta(&back).unwrap();
        assert_eq!(cloud.audit_text(), map.audit_text());

        let evil = StencilDelta { entries: vec![(BlockId(1), BlockClass::FullData)] };
        assert!(cloud.apply_delta(&evil).is_err());
    }

    #[test]
    fn subtract_ranges() {
        assert_eq!(subtract(&(0..100), &[10..20, 50..60]), vec![0..10, 20..50, 60..100]);
        assert_eq!(subtract(&(0..100), std::slice::from_ref(&(0..100))), Vec::<ByteRange>::new());
    }
}
