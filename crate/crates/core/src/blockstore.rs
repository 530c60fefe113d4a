//! The secure disk owned by the device core.
//!
//! A fixed-geometry array of 4 KiB blocks. Storage is sparse: blocks that
//! were never written (or were written with zeros) occupy no memory, which
//! lets a 4 GiB geometry live comfortably in a test process.
//!
//! Speculative execution is supported through checkpoints. A checkpoint
//! records pre-images of the blocks it covers; rolling it back restores
//! exactly those blocks. Checkpoints can be extended after creation so a
//! caller can capture a block's pre-image on first touch.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const BLOCK_SIZE: usize = 4096;

/// Index of a block on a disk.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BlockId(pub u32);

impl BlockId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The contents of one block.
#[derive(Clone, PartialEq, Eq)]
pub struct Block(Box<[u8; BLOCK_SIZE]>);

impl Block {
    pub fn zeroed() -> Self {
        Block(Box::new([0u8; BLOCK_SIZE]))
    }

    pub fn filled(byte: u8) -> Self {
        Block(Box::new([byte; BLOCK_SIZE]))
    }

    /// Builds a block from exactly `BLOCK_SIZE` bytes.
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != BLOCK_SIZE {
            return None;
        }
        let mut b = Self::zeroed();
        b.0.copy_from_slice(bytes);
        Some(b)
    }

    pub fn as_bytes(&self) -> &[u8; BLOCK_SIZE] {
        &self.0
    }

    pub fn as_mut_bytes(&mut self) -> &mut [u8; BLOCK_SIZE] {
        &mut self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }
}

impl Default for Block {
    fn default() -> Self {
        Self::zeroed()
    }
}

impl fmt::Debug for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nonzero = self.0.iter().filter(|&&b| b != 0).count();
        write!(f, "Block({nonzero} nonzero bytes)")
    }
}

/// Opaque handle for a live checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CheckpointId(u64);

#[derive(Debug, Error)]
pub enum BlockStoreError {
    #[error("block {id} out of range (disk has {total} blocks)")]
    OutOfRange { id: BlockId, total: u32 },
    #[error("checkpoint {0:?} already consumed or never issued")]
    StaleCheckpoint(CheckpointId),
    #[error("image size {0} is not a whole number of blocks")]
    BadImageSize(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default)]
struct Saved {
    blocks: BTreeMap<BlockId, Block>,
}

/// In-memory secure disk with checkpoint/rollback.
#[derive(Clone, Debug)]
pub struct BlockStore {
    total: u32,
    blocks: BTreeMap<BlockId, Block>,
    checkpoints: BTreeMap<CheckpointId, Saved>,
    next_checkpoint: u64,
}

impl BlockStore {
    pub fn new(total_blocks: u32) -> Self {
        BlockStore {
            total: total_blocks,
            blocks: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            next_checkpoint: 1,
        }
    }

    pub fn total_blocks(&self) -> u32 {
        self.total
    }

    /// Size of the raw image in bytes.
    pub fn image_len(&self) -> u64 {
        self.total as u64 * BLOCK_SIZE as u64
    }

    fn check(&self, id: BlockId) -> Result<(), BlockStoreError> {
        if id.0 >= self.total {
            return Err(BlockStoreError::OutOfRange { id, total: self.total });
        }
        Ok(())
    }

    pub fn read_block(&self, id: BlockId) -> Result<Block, BlockStoreError> {
        self.check(id)?;
        Ok(self.blocks.get(&id).cloned().unwrap_or_default())
    }

    /// Borrowing read; `None` means the block is all zeros.
    pub fn peek(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(&id)
    }

    pub fn write_block(&mut self, id: BlockId, block: Block) -> Result<(), BlockStoreError> {
        self.check(id)?;
        if block.is_zero() {
            self.blocks.remove(&id);
        } else {
            self.blocks.insert(id, block);
        }
        Ok(())
    }

    /// Ids of all blocks holding at least one nonzero byte, ascending.
    pub fn nonzero_blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.blocks.keys().copied()
    }

    /// Captures pre-images of `ids`.
    pub fn checkpoint<I>(&mut self, ids: I) -> Result<CheckpointId, BlockStoreError>
    where
        I: IntoIterator<Item = BlockId>,
    {
        let ids: BTreeSet<BlockId> = ids.into_iter().collect();
        for &id in &ids {
            self.check(id)?;
        }
        let token = CheckpointId(self.next_checkpoint);
        self.next_checkpoint += 1;
        let mut saved = Saved::default();
        for id in ids {
            saved.blocks.insert(id, self.read_block(id)?);
        }
        self.checkpoints.insert(token, saved);
        Ok(token)
    }

    /// Adds `id` to a live checkpoint, capturing its current contents unless
    /// the checkpoint already holds a pre-image for it.
    pub fn checkpoint_extend(&mut self, cp: CheckpointId, id: BlockId) -> Result<(), BlockStoreError> {
        self.check(id)?;
        let pre = self.read_block(id)?;
        let saved = self
            .checkpoints
            .get_mut(&cp)
            .ok_or(BlockStoreError::StaleCheckpoint(cp))?;
        saved.blocks.entry(id).or_insert(pre);
        Ok(())
    }

    /// Blocks covered by a live checkpoint.
    pub fn checkpoint_blocks(&self, cp: CheckpointId) -> Result<Vec<BlockId>, BlockStoreError> {
        self.checkpoints
            .get(&cp)
            .map(|s| s.blocks.keys().copied().collect())
            .ok_or(BlockStoreError::StaleCheckpoint(cp))
    }

    /// Pre-image a live checkpoint holds for `id`, if any.
    pub fn checkpoint_pre_image(&self, cp: CheckpointId, id: BlockId) -> Option<&Block> {
        self.checkpoints.get(&cp).and_then(|s| s.blocks.get(&id))
    }

    pub fn live_checkpoints(&self) -> Vec<CheckpointId> {
        self.checkpoints.keys().copied().collect()
    }

    /// Restores every block saved in `cp` and consumes it.
    pub fn rollback(&mut self, cp: CheckpointId) -> Result<Vec<BlockId>, BlockStoreError> {
        let saved = self
            .checkpoints
            .remove(&cp)
            .ok_or(BlockStoreError::StaleCheckpoint(cp))?;
        let ids: Vec<BlockId> = saved.blocks.keys().copied().collect();
        for (id, block) in saved.blocks {
            self.write_block(id, block)?;
        }
        Ok(ids)
    }

    /// Drops a checkpoint without restoring anything.
    pub fn discard(&mut self, cp: CheckpointId) -> Result<(), BlockStoreError> {
        self.checkpoints
            .remove(&cp)
            .map(|_| ())
            .ok_or(BlockStoreError::StaleCheckpoint(cp))
    }

    /// SHA-256 over the whole disk. Zero blocks are skipped so the digest
    /// does not depend on how sparse the backing map happens to be.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.total.to_le_bytes());
        for (id, block) in &self.blocks {
            h.update(id.0.to_le_bytes());
            h.update(block.as_bytes());
        }
        h.finalize().into()
    }

    /// Writes the raw image (block concatenation, no header). Zero blocks
    /// are left as holes.
    pub fn save_image(&self, path: &Path) -> Result<(), BlockStoreError> {
        let mut f = File::create(path)?;
        f.set_len(self.image_len())?;
        for (id, block) in &self.blocks {
            f.seek(SeekFrom::Start(id.0 as u64 * BLOCK_SIZE as u64))?;
            f.write_all(block.as_bytes())?;
        }
        f.sync_all()?;
        Ok(())
    }

    pub fn load_image(path: &Path) -> Result<Self, BlockStoreError> {
        let mut f = File::open(path)?;
        let len = f.metadata()?.len();
        if len % BLOCK_SIZE as u64 != 0 || len / BLOCK_SIZE as u64 > u32::MAX as u64 {
            return Err(BlockStoreError::BadImageSize(len));
        }
        let mut store = BlockStore::new((len / BLOCK_SIZE as u64) as u32);
        let mut buf = vec![0u8; BLOCK_SIZE];
        for i in 0..store.total {
            f.read_exact(&mut buf)?;
            if buf.iter().any(|&b| b != 0) {
                store.blocks.insert(BlockId(i), Block::from_slice(&buf).unwrap());
            }
        }
        Ok(store)
    }
}
