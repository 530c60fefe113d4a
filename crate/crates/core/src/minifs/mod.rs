//! A small deterministic filesystem run identically by both twins.
//!
//! The engine only touches on-disk state through a [`MetadataAccessor`]
//! and never sees file bytes. What it returns for each op is the ordered
//! list of data-block requests the trusted side has to carry out.

mod engine;
pub mod layout;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blockstore::{Block, BlockId, BlockStore, BLOCK_SIZE};
pub use engine::{AccessReject, Engine, EngineError, EngineFd, FdTable, MetadataAccessor};
pub use layout::{DirEntry, Inode, InodeMode, LayoutError, Superblock};

/// Read-only view of a disk image.
pub trait BlockSource {
    fn total_blocks(&self) -> u32;
    /// Contents of `id`; zeros if out of range or never written.
    fn source_block(&self, id: BlockId) -> Block;

    /// Parses and validates the superblock at block 0.
    fn superblock(&self) -> Result<Superblock, LayoutError> {
        Superblock::decode(self.source_block(BlockId(0)).as_bytes())
    }

    fn inode(&self, sb: &Superblock, ino: u32) -> Result<Inode, LayoutError> {
        let (blk, off) = sb.inode_location(ino);
        let b = self.source_block(blk);
        Inode::decode(&b.as_bytes()[off..off + layout::INODE_SIZE], ino)
    }
}

impl BlockSource for BlockStore {
    fn total_blocks(&self) -> u32 {
        BlockStore::total_blocks(self)
    }

    fn source_block(&self, id: BlockId) -> Block {
        self.peek(id).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("not a metadata image")]
    BadHeader,
    #[error("metadata image truncated")]
    Truncated,
    #[error("block {0} outside image geometry")]
    OutOfRange(u32),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

const IMAGE_MAGIC: &[u8; 4] = b"TWNM";

/// Metadata-only image held by the replica. Sparse: absent blocks are
/// zero. Encoded as `"TWNM" | total(4) | n(4) | n x (block(4) | 4096 bytes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetadataImage {
    total_blocks: u32,
    blocks: BTreeMap<BlockId, Block>,
}

impl MetadataImage {
    pub fn new(total_blocks: u32) -> Self {
        MetadataImage { total_blocks, blocks: BTreeMap::new() }
    }

    pub fn get(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(&id)
    }

    pub fn set(&mut self, id: BlockId, block: Block) {
        if block.is_zero() {
            self.blocks.remove(&id);
        } else {
            self.blocks.insert(id, block);
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = (BlockId, &Block)> {
        self.blocks.iter().map(|(k, v)| (*k, v))
    }

    pub fn stored_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn encoded_len(&self) -> usize {
        12 + self.blocks.len() * (4 + BLOCK_SIZE)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&self.total_blocks.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (id, b) in &self.blocks {
            out.extend_from_slice(&id.0.to_le_bytes());
            out.extend_from_slice(b.as_bytes());
        }
        out
    }

    /// Decodes an image and validates its superblock.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() < 12 || &bytes[0..4] != IMAGE_MAGIC {
            return Err(ImageError::BadHeader);
        }
        let total = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != n * (4 + BLOCK_SIZE) {
            return Err(ImageError::Truncated);
        }
        let mut img = MetadataImage::new(total);
        for chunk in body.chunks_exact(4 + BLOCK_SIZE) {
            let id = u32::from_le_bytes(chunk[0..4].try_into().unwrap());
            if id >= total {
                return Err(ImageError::OutOfRange(id));
            }
            img.set(BlockId(id), Block::from_slice(&chunk[4..]).unwrap());
        }
        let sb = img.superblock()?;
        if sb.total_blocks != total {
            return Err(LayoutError::CorruptSuperblock("image geometry disagrees").into());
        }
        Ok(img)
    }

    /// SHA-256 over the nonzero blocks. Comparable with a device-side
    /// digest computed over redacted metadata blocks.
    pub fn digest(&self) -> [u8; 32] {
        metadata_digest(self.total_blocks, self.blocks.iter().map(|(k, v)| (*k, v)))
    }
}

impl BlockSource for MetadataImage {
    fn total_blocks(&self) -> u32 {
        self.total_blocks
    }

    fn source_block(&self, id: BlockId) -> Block {
        self.blocks.get(&id).cloned().unwrap_or_default()
    }
}

pub(crate) fn metadata_digest<'a, I>(total: u32, blocks: I) -> [u8; 32]
where
    I: IntoIterator<Item = (BlockId, &'a Block)>,
{
    let mut h = Sha256::new();
    h.update(b"twinfs-meta");
    h.update(total.to_le_bytes());
    for (id, b) in blocks {
        if b.is_zero() {
            continue;
        }
        h.update(id.0.to_le_bytes());
        h.update(b.as_bytes());
    }
    h.finalize().into()
}

/// Formats a filesystem. Returns the full image for the secure disk and
/// the metadata-only export for the replica. The root directory is inode 0
/// and owns no blocks until its first entry is added.
pub fn mkfs(total_blocks: u32, inode_count: u32) -> Result<(BlockStore, MetadataImage), LayoutError> {
    let sb = Superblock::layout(total_blocks, inode_count)?;
    let mut store = BlockStore::new(total_blocks);

    let mut b = Block::zeroed();
    sb.encode_into(b.as_mut_bytes());
    store.write_block(BlockId(0), b).expect("superblock in range");

    // Every metadata block is marked used in the block bitmap.
    let used = sb.data_start.0;
    for k in 0..sb.bitmap_blocks {
        let lo = k * layout::BITS_PER_BLOCK;
        if lo >= used {
            break;
        }
        let mut bm = Block::zeroed();
        for bit in lo..used.min(lo + layout::BITS_PER_BLOCK) {
            let rel = (bit - lo) as usize;
            bm.as_mut_bytes()[rel / 8] |= 1 << (rel % 8);
        }
        store.write_block(BlockId(sb.bitmap_block.0 + k), bm).unwrap();
    }

    let mut ibm = Block::zeroed();
    ibm.as_mut_bytes()[0] = 1;
    store.write_block(sb.inode_bitmap_block, ibm).unwrap();

    let (blk, off) = sb.inode_location(layout::ROOT_INODE);
    let mut table = Block::zeroed();
    Inode::new(InodeMode::Dir).encode_into(&mut table.as_mut_bytes()[off..off + layout::INODE_SIZE]);
    store.write_block(blk, table).unwrap();

    let mut meta = MetadataImage::new(total_blocks);
    for id in store.nonzero_blocks() {
        if id.0 < sb.data_start.0 {
            meta.set(id, store.source_block(id));
        }
    }
    Ok((store, meta))
}

/// Free data blocks according to the block bitmap.
pub fn free_data_blocks(src: &dyn BlockSource) -> Result<u32, LayoutError> {
    let sb = src.superblock()?;
    let mut free = 0;
    let mut cached: Option<(u32, Block)> = None;
    for id in sb.data_start.0..sb.total_blocks {
        let k = id / layout::BITS_PER_BLOCK;
        if cached.as_ref().map(|c| c.0) != Some(k) {
            cached = Some((k, src.source_block(BlockId(sb.bitmap_block.0 + k))));
        }
        let rel = (id % layout::BITS_PER_BLOCK) as usize;
        let bm = &cached.as_ref().unwrap().1;
        if bm.as_bytes()[rel / 8] & (1 << (rel % 8)) == 0 {
            free += 1;
        }
    }
    Ok(free)
}
