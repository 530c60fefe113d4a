//! Detects client payload bytes in places they must never appear.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::device::NetTap;
use crate::wire::channel::FrameTap;

/// Every payload written by the harness is registered here as a set of
/// 8-byte windows. Any scanned buffer sharing a window with a payload is a
/// hit.
#[derive(Default)]
pub struct TaintScanner {
    windows: Mutex<HashSet<u64>>,
    hits: AtomicU64,
    scanned: AtomicU64,
}

pub const WINDOW: usize = 8;

fn key(w: &[u8]) -> u64 {
    u64::from_le_bytes(w.try_into().unwrap())
}

impl TaintScanner {
    pub fn new() -> Arc<Self> {
        Arc::new(TaintScanner::default())
    }

    pub fn register(&self, payload: &[u8]) {
        let mut set = self.windows.lock().unwrap();
        for w in payload.windows(WINDOW) {
            set.insert(key(w));
        }
    }

    /// Number of registered windows found in `buf`.
    pub fn count(&self, buf: &[u8]) -> u64 {
        let set = self.windows.lock().unwrap();
        buf.windows(WINDOW).filter(|w| set.contains(&key(w))).count() as u64
    }

    /// Scans `buf` and adds any hits to the running total.
    pub fn scan(&self, buf: &[u8]) -> u64 {
        let n = self.count(buf);
        self.scanned.fetch_add(buf.len() as u64, Ordering::Relaxed);
        self.hits.fetch_add(n, Ordering::Relaxed);
        n
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn bytes_scanned(&self) -> u64 {
        self.scanned.load(Ordering::Relaxed)
    }

    pub fn frame_tap(self: &Arc<Self>) -> FrameTap {
        let s = self.clone();
        Arc::new(move |f: &[u8]| {
            s.scan(f);
        })
    }

    pub fn net_tap(self: &Arc<Self>) -> NetTap {
        let s = self.clone();
        Arc::new(move |m: &[u8]| {
            s.scan(m);
        })
    }
}
