//! Secure page cache: `(inode, page) -> page bytes` inside the device.

use std::collections::HashMap;

use crate::blockstore::{Block, BlockId};

/// Whether a page's placement on disk has been validated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Trust {
    Trusted,
    Untrusted,
}

impl Trust {
    pub fn and(self, other: Trust) -> Trust {
        self.max(other)
    }
}

pub type PageKey = (u32, u32);

#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub page: Block,
    pub block: Option<BlockId>,
    pub trust: Trust,
    /// Latest not-yet-validated write covering this page.
    pub pending: Option<u64>,
    last_use: u64,
}

impl CacheEntry {
    /// Clean trusted pages are the only ones that may be dropped: the rest
    /// hold the sole copy of client data.
    pub fn evictable(&self) -> bool {
        self.trust == Trust::Trusted && self.pending.is_none()
    }
}

#[derive(Debug)]
pub struct PageCache {
    capacity: usize,
    entries: HashMap<PageKey, CacheEntry>,
    tick: u64,
}

impl PageCache {
    pub fn new(capacity: usize) -> Self {
        PageCache { capacity, entries: HashMap::new(), tick: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&mut self, key: PageKey) -> Option<&CacheEntry> {
        self.tick += 1;
        let t = self.tick;
        self.entries.get_mut(&key).map(|e| {
            e.last_use = t;
            &*e
        })
    }

    pub fn peek(&self, key: PageKey) -> Option<&CacheEntry> {
        self.entries.get(&key)
    }

    pub fn get_mut(&mut self, key: PageKey) -> Option<&mut CacheEntry> {
        self.entries.get_mut(&key)
    }

    pub fn insert(&mut self, key: PageKey, page: Block, block: Option<BlockId>, trust: Trust, pending: Option<u64>) {
        self.tick += 1;
        self.entries.insert(key, CacheEntry { page, block, trust, pending, last_use: self.tick });
        self.shrink();
    }

    /// Drops least recently used clean pages until within capacity.
    fn shrink(&mut self) {
        while self.entries.len() > self.capacity {
            let victim = self.entries.iter().filter(|(_, e)| e.evictable()).min_by_key(|(_, e)| e.last_use).map(|(k, _)| *k);
            match victim {
                Some(k) => {
                    self.entries.remove(&k);
                }
                None => break,
            }
        }
    }

    /// Drops every clean page.
    pub fn evict_clean(&mut self) {
        self.entries.retain(|_, e| !e.evictable());
    }

    pub fn remove_inode(&mut self, ino: u32) {
        self.entries.retain(|k, _| k.0 != ino);
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&PageKey, &mut CacheEntry)> {
        self.entries.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PageKey, &CacheEntry)> {
        self.entries.iter()
    }
}
