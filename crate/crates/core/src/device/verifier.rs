//! Trace comparison and the local sanity checks run before a trace is
//! allowed to touch the disk.

use crate::op::{BlockRequest, RequestKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Match,
    /// Index of the first entry where the traces (or results) diverge.
    Mismatch(usize),
    /// The local twin broke a rule on its own: a rejected request, a stale
    /// sequence number, or a trace the device knows cannot be right.
    LocalReject,
    /// The replica refused the op.
    CloudReject,
}

impl Verdict {
    pub fn is_match(self) -> bool {
        self == Verdict::Match
    }
}

/// Element-wise comparison of kind and block. A length difference counts
/// as a divergence at the end of the shorter trace.
pub fn verify_traces(local: &[BlockRequest], cloud: &[BlockRequest]) -> Verdict {
    match local.iter().zip(cloud).position(|(a, b)| a != b) {
        Some(i) => Verdict::Mismatch(i),
        None if local.len() != cloud.len() => Verdict::Mismatch(local.len().min(cloud.len())),
        None => Verdict::Match,
    }
}

/// Every entry is of `kind` and there are exactly `len` of them.
pub fn shape_ok(trace: &[BlockRequest], kind: RequestKind, len: usize) -> bool {
    trace.len() == len && trace.iter().all(|r| r.kind == kind)
}
