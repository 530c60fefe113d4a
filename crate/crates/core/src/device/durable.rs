//! State that survives a device crash.

use std::fmt;
use std::str::FromStr;

use crate::blockstore::{BlockId, BlockStore};

use super::names::NameKey;
use super::DeviceConfig;

/// Commit bookkeeping kept next to the disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Journal {
    /// Highest seq whose effects are on the disk with no live checkpoint.
    pub last_executed: u64,
    /// Highest seq a final commit was sent for.
    pub commit_sent: u64,
    /// Highest seq the replica acknowledged as durable.
    pub last_acked: u64,
}

/// Steps of the commit protocol at which a crash can be injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CrashPoint {
    BeforeDelegate,
    AfterReplayStaged,
    AfterDeviceExec,
    AfterFinalCommitSent,
    AfterReplicaCommit,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 5] = [
        CrashPoint::BeforeDelegate,
        CrashPoint::AfterReplayStaged,
        CrashPoint::AfterDeviceExec,
        CrashPoint::AfterFinalCommitSent,
        CrashPoint::AfterReplicaCommit,
    ];
}

impl fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CrashPoint::BeforeDelegate => "before-delegate",
            CrashPoint::AfterReplayStaged => "after-replay-staged",
            CrashPoint::AfterDeviceExec => "after-device-exec",
            CrashPoint::AfterFinalCommitSent => "after-final-commit-sent",
            CrashPoint::AfterReplicaCommit => "after-replica-commit",
        };
        f.write_str(s)
    }
}

impl FromStr for CrashPoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        CrashPoint::ALL.into_iter().find(|c| c.to_string() == s).ok_or_else(|| format!("unknown crash point {s}"))
    }
}

/// Everything a restarted device boots from. Live checkpoints in the store
/// are the undo log of ops that never reached validation.
#[derive(Clone, Debug)]
pub struct DeviceDurable {
    pub store: BlockStore,
    pub journal: Journal,
    pub emergency: Vec<BlockId>,
    pub key: NameKey,
    pub config: DeviceConfig,
}
