//! Exhaustive crash exploration over short metadata-changing op logs.

use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{Rig, RigConfig};
use crate::device::{CrashPoint, DeviceConfig, DeviceError};
use crate::op::{OpenFlags, Whence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LogOp {
    /// Creates the next file.
    Create,
    /// Appends to the newest file, creating it if there is none.
    Append,
    /// Truncates the newest file, creating it if there is none.
    Truncate,
}

impl LogOp {
    pub const ALL: [LogOp; 3] = [LogOp::Create, LogOp::Append, LogOp::Truncate];
}

impl fmt::Display for LogOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogOp::Create => "C",
            LogOp::Append => "A",
            LogOp::Truncate => "T",
        })
    }
}

pub const APPEND_LEN: usize = 5000;

/// Every log of exactly `len` ops, in lexicographic order.
pub fn all_logs(len: usize) -> Vec<Vec<LogOp>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|l| {
                LogOp::ALL.into_iter().map(move |op| {
                    let mut n = l.clone();
                    n.push(op);
                    n
                })
            })
            .collect();
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseFailure {
    pub log: String,
    pub at_op: usize,
    pub point: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ConvergenceReport {
    pub logs: usize,
    pub cases: usize,
    pub converged: usize,
    pub failures: Vec<CaseFailure>,
    pub elapsed_ms: u64,
}

impl ConvergenceReport {
    pub fn all_converged(&self) -> bool {
        self.failures.is_empty() && self.converged == self.cases
    }
}

pub fn explorer_config() -> RigConfig {
    RigConfig {
        device: DeviceConfig { emergency_pages: 0, twin_timeout: Duration::from_secs(2), ..DeviceConfig::default() },
        blocks: 256,
        inodes: 32,
        ..RigConfig::default()
    }
}

struct Runner {
    files: usize,
}

impl Runner {
    fn newest(&self) -> String {
        format!("f{}", self.files.max(1) - 1)
    }

    /// Runs one op. `arm` is applied right before the call that changes
    /// metadata.
    fn apply(&mut self, rig: &mut Rig, op: LogOp, arm: Option<CrashPoint>) -> Result<(), DeviceError> {
        let d = &mut rig.device;
        let arm_now = |d: &mut crate::device::Device| {
            if let Some(at) = arm {
                d.arm_crash(at);
            }
        };
        match op {
            LogOp::Create => {
                let path = format!("f{}", self.files);
                self.files += 1;
                arm_now(d);
                let fd = d.open(&path, OpenFlags::CREATE)?;
                d.close(fd)
            }
            LogOp::Append => {
                self.files = self.files.max(1);
                let fd = d.open(&self.newest(), OpenFlags::CREATE)?;
                d.lseek(fd, 0, Whence::End)?;
                arm_now(d);
                d.write(fd, &vec![0xa5; APPEND_LEN])?;
                d.fsync(fd)?;
                d.close(fd)
            }
            LogOp::Truncate => {
                self.files = self.files.max(1);
                arm_now(d);
                let fd = d.open(&self.newest(), OpenFlags::CREATE | OpenFlags::TRUNC)?;
                d.close(fd)
            }
        }
    }
}

fn digests_agree(rig: &Rig) -> Result<(), String> {
    let dev = rig.device.metadata_digest();
    match rig.replica_digest() {
        Some(r) if r == dev => Ok(()),
        Some(_) => Err("device and replica digests differ".into()),
        None => Err("replica has no session".into()),
    }
}

/// Crashes log `log` at op `at_op` and step `point`, restarts both sides and
/// checks convergence right after recovery and after finishing the log.
pub fn run_case(log: &[LogOp], at_op: usize, point: CrashPoint) -> Result<(), String> {
    let mut rig = Rig::new(explorer_config()).map_err(|e| format!("setup: {e}"))?;
    let mut run = Runner { files: 0 };
    for &op in &log[..at_op] {
        run.apply(&mut rig, op, None).map_err(|e| format!("pre-crash op: {e}"))?;
    }
    match run.apply(&mut rig, log[at_op], Some(point)) {
        Err(DeviceError::Crashed) => {}
        Ok(()) => return Err("crash point not reached".into()),
        Err(e) => return Err(format!("crashing op: {e}")),
    }
    let mut rig = rig.restart().map_err(|e| format!("recover: {e}"))?;
    digests_agree(&rig).map_err(|e| format!("after recovery: {e}"))?;
    for &op in &log[at_op + 1..] {
        run.apply(&mut rig, op, None).map_err(|e| format!("post-crash op: {e}"))?;
    }
    rig.device.quiesce().map_err(|e| format!("quiesce: {e}"))?;
    digests_agree(&rig).map_err(|e| format!("at end: {e}"))
}

/// Explores every log of length `0..=max_len`, every op and every crash
/// point.
pub fn explore_crashes(max_len: usize) -> ConvergenceReport {
    let t = Instant::now();
    let mut rep = ConvergenceReport::default();
    for len in 0..=max_len {
        for log in all_logs(len) {
            rep.logs += 1;
            for at_op in 0..log.len() {
                for point in CrashPoint::ALL {
                    rep.cases += 1;
                    match run_case(&log, at_op, point) {
                        Ok(()) => rep.converged += 1,
                        Err(reason) => rep.failures.push(CaseFailure {
                            log: log.iter().map(|o| o.to_string()).collect(),
                            at_op,
                            point: point.to_string(),
                            reason,
                        }),
                    }
                }
            }
        }
    }
    rep.elapsed_ms = t.elapsed().as_millis() as u64;
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_enumeration() {
        assert_eq!(all_logs(0), vec![Vec::<LogOp>::new()]);
        assert_eq!(all_logs(2).len(), 9);
        assert_eq!(all_logs(3)[5], vec![LogOp::Create, LogOp::Append, LogOp::Truncate]);
    }

    #[test]
    fn empty_log_is_vacuous() {
        let r = explore_crashes(0);
        assert_eq!((r.logs, r.cases), (1, 0));
        assert!(r.all_converged());
    }

    #[test]
    fn short_logs_converge() {
        let r = explore_crashes(2);
        assert_eq!(r.logs, 1 + 3 + 9);
        assert_eq!(r.cases, 5 * (3 + 2 * 9));
        assert!(r.all_converged(), "{:?}", r.failures);
    }
}
