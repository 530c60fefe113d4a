//! On-disk structures. All integers are little-endian.
//!
//! ```text
//! block 0                      superblock
//! bitmap_block ..              block bitmap, one bit per disk block
//! inode_bitmap_block ..        inode bitmap, one bit per inode
//! inode_table_start ..         inode table, 128-byte slots
//! data_start ..                file data and directory blocks
//! ```

use thiserror::Error;

use crate::blockstore::{BlockId, BLOCK_SIZE};
use crate::op::{NameToken, TOKEN_LEN};

/// "TWNF" read as a little-endian u32.
pub const MAGIC: u32 = 0x5457_4E46;
pub const INODE_SIZE: usize = 128;
pub const INODES_PER_BLOCK: usize = BLOCK_SIZE / INODE_SIZE;
pub const DIRECT_BLOCKS: usize = 12;
/// Bytes of file data an inode can carry in its tail.
pub const INLINE_CAP: usize = 64;
/// Offset of the inline window inside an inode slot.
pub const INLINE_OFFSET: usize = INODE_SIZE - INLINE_CAP;
pub const MAX_FILE_SIZE: u64 = (DIRECT_BLOCKS * BLOCK_SIZE) as u64;
pub const DIRENT_SIZE: usize = 24;
pub const DIRENTS_PER_BLOCK: usize = BLOCK_SIZE / DIRENT_SIZE;
pub const MAX_DIRENTS: usize = DIRECT_BLOCKS * DIRENTS_PER_BLOCK;
pub const BITS_PER_BLOCK: u32 = (BLOCK_SIZE * 8) as u32;
pub const ROOT_INODE: u32 = 0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("bad superblock magic {0:#010x}")]
    BadMagic(u32),
    #[error("corrupt superblock: {0}")]
    CorruptSuperblock(&'static str),
    #[error("corrupt inode {0}")]
    CorruptInode(u32),
    #[error("geometry too small: {total} blocks cannot hold {needed} metadata blocks plus data")]
    TooSmall { total: u32, needed: u32 },
}

fn get_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn put_u32(b: &mut [u8], off: usize, v: u32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Superblock {
    pub magic: u32,
    pub total_blocks: u32,
    pub inode_count: u32,
    pub bitmap_block: BlockId,
    pub bitmap_blocks: u32,
    pub inode_bitmap_block: BlockId,
    pub inode_bitmap_blocks: u32,
    pub inode_table_start: BlockId,
    pub inode_table_blocks: u32,
    pub data_start: BlockId,
}

impl Superblock {
    /// Lays out a filesystem of `total_blocks` with `inode_count` inodes.
    pub fn layout(total_blocks: u32, inode_count: u32) -> Result<Self, LayoutError> {
        if inode_count == 0 {
            return Err(LayoutError::CorruptSuperblock("inode count is zero"));
        }
        let bitmap_blocks = div_ceil(total_blocks as u64, BITS_PER_BLOCK as u64);
        let inode_bitmap_blocks = div_ceil(inode_count as u64, BITS_PER_BLOCK as u64);
        let inode_table_blocks = div_ceil(inode_count as u64 * INODE_SIZE as u64, BLOCK_SIZE as u64);
        let data_start = 1 + bitmap_blocks + inode_bitmap_blocks + inode_table_blocks;
        if data_start >= total_blocks as u64 {
            return Err(LayoutError::TooSmall {
                total: total_blocks,
                needed: data_start.min(u32::MAX as u64) as u32,
            });
        }
        let bitmap_block = 1u32;
        let inode_bitmap_block = bitmap_block + bitmap_blocks as u32;
        let inode_table_start = inode_bitmap_block + inode_bitmap_blocks as u32;
        Ok(Superblock {
            magic: MAGIC,
            total_blocks,
            inode_count,
            bitmap_block: BlockId(bitmap_block),
            bitmap_blocks: bitmap_blocks as u32,
            inode_bitmap_block: BlockId(inode_bitmap_block),
            inode_bitmap_blocks: inode_bitmap_blocks as u32,
            inode_table_start: BlockId(inode_table_start),
            inode_table_blocks: inode_table_blocks as u32,
            data_start: BlockId(data_start as u32),
        })
    }

    pub fn encode_into(&self, block: &mut [u8; BLOCK_SIZE]) {
        put_u32(block, 0, self.magic);
        put_u32(block, 4, self.total_blocks);
        put_u32(block, 8, self.inode_count);
        put_u32(block, 12, self.bitmap_block.0);
        put_u32(block, 16, self.bitmap_blocks);
        put_u32(block, 20, self.inode_bitmap_block.0);
        put_u32(block, 24, self.inode_bitmap_blocks);
        put_u32(block, 28, self.inode_table_start.0);
        put_u32(block, 32, self.inode_table_blocks);
        put_u32(block, 36, self.data_start.0);
    }

    /// Parses and validates a superblock: the regions must be exactly the
    /// ones [`Superblock::layout`] produces for the recorded geometry.
    pub fn decode(block: &[u8; BLOCK_SIZE]) -> Result<Self, LayoutError> {
        let magic = get_u32(block, 0);
        if magic != MAGIC {
            return Err(LayoutError::BadMagic(magic));
        }
        let sb = Superblock {
            magic,
            total_blocks: get_u32(block, 4),
            inode_count: get_u32(block, 8),
            bitmap_block: BlockId(get_u32(block, 12)),
            bitmap_blocks: get_u32(block, 16),
            inode_bitmap_block: BlockId(get_u32(block, 20)),
            inode_bitmap_blocks: get_u32(block, 24),
            inode_table_start: BlockId(get_u32(block, 28)),
            inode_table_blocks: get_u32(block, 32),
            data_start: BlockId(get_u32(block, 36)),
        };
        let expect = Superblock::layout(sb.total_blocks, sb.inode_count)
            .map_err(|_| LayoutError::CorruptSuperblock("geometry does not fit"))?;
        if expect != sb {
            return Err(LayoutError::CorruptSuperblock("region layout mismatch"));
        }
        Ok(sb)
    }

    /// Table block and byte offset of inode `ino`'s slot.
    pub fn inode_location(&self, ino: u32) -> (BlockId, usize) {
        let byte = ino as usize * INODE_SIZE;
        (BlockId(self.inode_table_start.0 + (byte / BLOCK_SIZE) as u32), byte % BLOCK_SIZE)
    }

    pub fn is_inode_table(&self, id: BlockId) -> bool {
        id.0 >= self.inode_table_start.0 && id.0 < self.data_start.0
    }

    pub fn is_data_region(&self, id: BlockId) -> bool {
        id.0 >= self.data_start.0 && id.0 < self.total_blocks
    }

    /// Range of inode numbers whose slots live in table block `id`.
    pub fn inodes_in_block(&self, id: BlockId) -> std::ops::Range<u32> {
        let first = (id.0 - self.inode_table_start.0) * INODES_PER_BLOCK as u32;
        first..(first + INODES_PER_BLOCK as u32).min(self.inode_count)
    }

    /// Bytes from block 0 up to the data region: everything a fresh
    /// filesystem's metadata export can contain.
    pub fn metadata_region_bytes(&self) -> u64 {
        self.data_start.0 as u64 * BLOCK_SIZE as u64
    }

    pub fn data_blocks(&self) -> u32 {
        self.total_blocks - self.data_start.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum InodeMode {
    Free = 0,
    File = 1,
    Dir = 2,
}

#[derive(Clone, PartialEq, Eq)]
pub struct Inode {
    pub mode: InodeMode,
    pub size: u32,
    pub inline_len: u32,
    pub direct: [u32; DIRECT_BLOCKS],
    /// Tail bytes as read from disk. The engine never interprets them.
    pub inline: [u8; INLINE_CAP],
}

impl std::fmt::Debug for Inode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Inode")
            .field("mode", &self.mode)
            .field("size", &self.size)
            .field("inline_len", &self.inline_len)
            .field("direct", &self.direct)
            .finish()
    }
}

impl Inode {
    pub fn free() -> Self {
        Inode {
            mode: InodeMode::Free,
            size: 0,
            inline_len: 0,
            direct: [0; DIRECT_BLOCKS],
            inline: [0; INLINE_CAP],
        }
    }

    pub fn new(mode: InodeMode) -> Self {
        Inode { mode, ..Self::free() }
    }

    pub fn is_inline(&self) -> bool {
        self.inline_len > 0
    }

    /// Number of direct slots in use, assuming no holes.
    pub fn allocated_pages(&self) -> usize {
        self.direct.iter().take_while(|&&b| b != 0).count()
    }

    pub fn decode(slot: &[u8], ino: u32) -> Result<Self, LayoutError> {
        let mode = match get_u32(slot, 0) {
            0 => InodeMode::Free,
            1 => InodeMode::File,
            2 => InodeMode::Dir,
            _ => return Err(LayoutError::CorruptInode(ino)),
        };
        let mut direct = [0u32; DIRECT_BLOCKS];
        for (i, d) in direct.iter_mut().enumerate() {
            *d = get_u32(slot, 16 + 4 * i);
        }
        let mut inline = [0u8; INLINE_CAP];
        inline.copy_from_slice(&slot[INLINE_OFFSET..INODE_SIZE]);
        let inode = Inode {
            mode,
            size: get_u32(slot, 4),
            inline_len: get_u32(slot, 8),
            direct,
            inline,
        };
        let bad_inline = inode.inline_len > 0
            && (inode.inline_len as usize > INLINE_CAP
                || inode.size != inode.inline_len
                || inode.mode != InodeMode::File
                || inode.direct.iter().any(|&d| d != 0));
        if bad_inline || inode.size as u64 > MAX_FILE_SIZE {
            return Err(LayoutError::CorruptInode(ino));
        }
        Ok(inode)
    }

    pub fn encode_into(&self, slot: &mut [u8]) {
        put_u32(slot, 0, self.mode as u32);
        put_u32(slot, 4, self.size);
        put_u32(slot, 8, self.inline_len);
        put_u32(slot, 12, 0);
        for (i, d) in self.direct.iter().enumerate() {
            put_u32(slot, 16 + 4 * i, *d);
        }
        slot[INLINE_OFFSET..INODE_SIZE].copy_from_slice(&self.inline);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DirEntry {
    pub inode: u32,
    pub name: NameToken,
    pub valid: bool,
}

impl DirEntry {
    pub fn decode(raw: &[u8]) -> Self {
        let mut name = [0u8; TOKEN_LEN];
        name.copy_from_slice(&raw[8..8 + TOKEN_LEN]);
        DirEntry { inode: get_u32(raw, 0), valid: raw[4] == 1, name: NameToken(name) }
    }

    pub fn encode_into(&self, raw: &mut [u8]) {
        put_u32(raw, 0, self.inode);
        raw[4] = self.valid as u8;
        raw[5..8].fill(0);
        raw[8..8 + TOKEN_LEN].copy_from_slice(&self.name.0);
    }
}
