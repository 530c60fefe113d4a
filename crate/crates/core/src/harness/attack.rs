//! Misbehaving local twins. Each attack rewrites what an honest twin would
//! have done; the trusted core is never touched.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use crate::blockstore::BlockId;
use crate::minifs::MetadataAccessor;
use crate::op::{BlockRequest, FileOp, OpKind, RequestKind, Trace};
use crate::untrusted::TwinTamper;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    /// Reports a write as touching no blocks.
    DropWrite,
    /// Points the first read entry at the next block.
    RedirectRead,
    /// Points the first write entry at the next block.
    RedirectWrite,
    /// Asks the device for a block that holds file data.
    IagoDataRequest,
    /// Answers an op with the previous op's seq and completion.
    StaleTraceReplay,
    /// Appends a read of a data block to the trace.
    ExtraRequest,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::DropWrite,
        AttackKind::RedirectRead,
        AttackKind::RedirectWrite,
        AttackKind::IagoDataRequest,
        AttackKind::StaleTraceReplay,
        AttackKind::ExtraRequest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::DropWrite => "drop-write",
            AttackKind::RedirectRead => "redirect-read",
            AttackKind::RedirectWrite => "redirect-write",
            AttackKind::IagoDataRequest => "iago-data-request",
            AttackKind::StaleTraceReplay => "stale-trace-replay",
            AttackKind::ExtraRequest => "extra-request",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        AttackKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown attack {s}"))
    }
}

#[derive(Debug)]
struct State {
    kind: AttackKind,
    /// Matching ops to let through before firing.
    skip: usize,
    /// Injections left once `skip` reaches zero.
    remaining: usize,
    fired: usize,
    last: Option<(u64, u32, Trace)>,
    known_data: Option<BlockId>,
}

/// Shared control over an [`EvilTwin`] running on the twin thread.
#[derive(Clone, Debug)]
pub struct AttackHandle(Arc<Mutex<State>>);

impl AttackHandle {
    /// A disarmed attack of `kind`.
    pub fn new(kind: AttackKind) -> Self {
        AttackHandle(Arc::new(Mutex::new(State { kind, skip: 0, remaining: 0, fired: 0, last: None, known_data: None })))
    }

    pub fn kind(&self) -> AttackKind {
        self.0.lock().unwrap().kind
    }

    /// Fires on `count` matching ops after letting `skip` through.
    pub fn arm(&self, skip: usize, count: usize) {
        let mut s = self.0.lock().unwrap();
        s.skip = skip;
        s.remaining = count;
    }

    pub fn disarm(&self) {
        self.0.lock().unwrap().remaining = 0;
    }

    pub fn fired(&self) -> usize {
        self.0.lock().unwrap().fired
    }

    pub fn twin(&self) -> EvilTwin {
        EvilTwin(self.clone())
    }
}

pub struct EvilTwin(AttackHandle);

impl State {
    fn take_shot(&mut self) -> bool {
        if self.remaining == 0 {
            return false;
        }
        if self.skip > 0 {
            self.skip -= 1;
            return false;
        }
        self.remaining -= 1;
        self.fired += 1;
        true
    }
}

fn retarget(trace: &mut Trace, kind: RequestKind) -> bool {
    match trace.iter_mut().find(|r| r.kind == kind) {
        Some(r) => {
            r.block = BlockId(r.block.0 + 1);
            true
        }
        None => false,
    }
}

impl TwinTamper for EvilTwin {
    fn before_op(&mut self, _seq: u64, op: &FileOp, acc: &mut dyn MetadataAccessor) {
        let mut s = self.0 .0.lock().unwrap();
        if op.kind == OpKind::Open && op.flags.contains(crate::op::OpenFlags::TRUNC) {
            // The block may be freed by this op.
            s.known_data = None;
        }
        if s.kind != AttackKind::IagoDataRequest {
            return;
        }
        let Some(b) = s.known_data else { return };
        if s.take_shot() {
            drop(s);
            let _ = acc.read_meta(b);
        }
    }

    fn on_done(&mut self, seq: &mut u64, op: &FileOp, result: &mut u32, trace: &mut Trace) {
        let mut s = self.0 .0.lock().unwrap();
        let honest = (*seq, *result, trace.clone());
        if let Some(w) = trace.iter().find(|r| r.kind == RequestKind::Write) {
            s.known_data = Some(w.block);
        }
        match s.kind {
            AttackKind::DropWrite if op.kind == OpKind::Write && !trace.is_empty() => {
                if s.take_shot() {
                    trace.clear();
                }
            }
            AttackKind::RedirectRead if op.kind == OpKind::Read && !trace.is_empty() => {
                if s.take_shot() {
                    retarget(trace, RequestKind::Read);
                }
            }
            AttackKind::RedirectWrite if op.kind == OpKind::Write && !trace.is_empty() => {
                if s.take_shot() {
                    retarget(trace, RequestKind::Write);
                }
            }
            AttackKind::StaleTraceReplay => {
                if let Some((ls, lr, lt)) = s.last.clone() {
                    if s.take_shot() {
                        *seq = ls;
                        *result = lr;
                        *trace = lt;
                    }
                }
            }
            AttackKind::ExtraRequest => {
                let extra = s.known_data.map_or(1, |b| b.0);
                if s.take_shot() {
                    trace.push(BlockRequest::read(extra));
                }
            }
            _ => {}
        }
        s.last = Some(honest);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::op::OpenFlags;

    #[test]
    fn names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
    }

    #[test]
    fn redirect_write_shifts_first_entry() {
        let h = AttackHandle::new(AttackKind::RedirectWrite);
        h.arm(1, 1);
        let mut twin = h.twin();
        let op = FileOp::write(3, 4096);
        let mut seq = 5;
        let mut result = 4096;
        let mut t = vec![BlockRequest::write(40)];
        twin.on_done(&mut seq, &op, &mut result, &mut t);
        assert_eq!(t, vec![BlockRequest::write(40)], "first match is skipped");
        twin.on_done(&mut seq, &op, &mut result, &mut t);
        assert_eq!(t, vec![BlockRequest::write(41)]);
        let mut t = vec![BlockRequest::write(40)];
        twin.on_done(&mut seq, &op, &mut result, &mut t);
        assert_eq!(t, vec![BlockRequest::write(40)], "only one shot");
        assert_eq!(h.fired(), 1);
    }

    #[test]
    fn stale_replay_reuses_previous_completion() {
        let h = AttackHandle::new(AttackKind::StaleTraceReplay);
        h.arm(0, 1);
        let mut twin = h.twin();
        let (mut s1, mut r1, mut t1) = (1, 0, vec![]);
        twin.on_done(&mut s1, &FileOp::open(1, 0, Default::default(), OpenFlags::CREATE), &mut r1, &mut t1);
        assert_eq!(h.fired(), 0, "nothing to replay yet");
        let (mut s2, mut r2, mut t2) = (2, 10, vec![BlockRequest::write(9)]);
        twin.on_done(&mut s2, &FileOp::write(1, 10), &mut r2, &mut t2);
        assert_eq!((s2, r2, t2), (1, 0, vec![]));
    }
}
