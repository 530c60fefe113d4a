//! Memoized `(inode, page) -> block` mappings from validated ops, plus the
//! reverse ownership map used to vet speculative writes.

use std::collections::HashMap;

use super::cache::PageKey;
use crate::blockstore::BlockId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoTarget {
    Block(BlockId),
    /// Bytes live in the inode's inline window.
    Inline,
}

#[derive(Debug, Default)]
pub struct Memo {
    map: HashMap<PageKey, MemoTarget>,
    owners: HashMap<BlockId, PageKey>,
}

impl Memo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: PageKey) -> Option<MemoTarget> {
        self.map.get(&key).copied()
    }

    pub fn owner(&self, b: BlockId) -> Option<PageKey> {
        self.owners.get(&b).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn set(&mut self, key: PageKey, target: MemoTarget) {
        if let Some(MemoTarget::Block(old)) = self.map.insert(key, target) {
            if self.owners.get(&old) == Some(&key) {
                self.owners.remove(&old);
            }
        }
        if let MemoTarget::Block(b) = target {
            if let Some(prev) = self.owners.insert(b, key) {
                if prev != key {
                    self.map.remove(&prev);
                }
            }
        }
    }

    pub fn invalidate_inode(&mut self, ino: u32) {
        self.map.retain(|k, _| k.0 != ino);
        self.owners.retain(|_, k| k.0 != ino);
    }

    pub fn clear(&mut self) {
        self.map.clear();
        self.owners.clear();
    }
}
