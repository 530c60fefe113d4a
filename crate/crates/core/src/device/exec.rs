//! Delegation, the local twin conversation, and verdict application.

use std::collections::BTreeSet;

use super::*;
use crate::minifs::layout::INLINE_OFFSET;
use crate::op::{decode_result, OpKind, RequestKind};
use crate::stencil::{BlockClass, StencilDelta};
use crate::wire::channel::ChannelMsg;
use crate::wire::net::{NetBody, NetMessage};
use crate::wire::WireError;

impl Device {
    /// Delegates a write of `data` at `pos` on `fd` and stages it. Returns
    /// once the local twin has answered.
    pub(super) fn write_delegated(&mut self, fd: Fd, pos: u64, data: &[u8]) -> Result<(), DeviceError> {
        self.align(fd, pos)?;
        let ino = self.fd(fd)?.inode;
        let inode = self.inode(ino)?;
        let end = pos + data.len() as u64;
        let has_blocks = inode.direct[0] != 0;
        let inline = !has_blocks && end <= INLINE_CAP as u64;
        let old_pages = if inode.is_inline() { 0 } else { inode.allocated_pages() as u32 };
        let (first, last) = if inline { (0, 0) } else { (((pos / PAGE) as u32).min(old_pages), ((end - 1) / PAGE) as u32) };
        let mut pages = Vec::new();
        for p in first..=last {
            let mut page = if let Some(e) = self.cache.peek((ino, p)) {
                e.page.clone()
            } else if p < old_pages {
                self.store.source_block(BlockId(inode.direct[p as usize]))
            } else if p == 0 && inode.is_inline() {
                let mut b = Block::zeroed();
                let n = inode.inline_len as usize;
                b.as_mut_bytes()[..n].copy_from_slice(&inode.inline[..n]);
                b
            } else {
                Block::zeroed()
            };
            overlay(&mut page, p, pos, data);
            pages.push(page);
        }
        let seq = self.next_seq;
        for (i, page) in pages.iter().enumerate() {
            let key = (ino, first + i as u32);
            let (block, trust) = self.cache.peek(key).map_or((None, Trust::Trusted), |e| (e.block, e.trust));
            self.cache.insert(key, page.clone(), block, trust, Some(seq));
        }
        let intent = Intent::Write {
            inode: ino,
            first,
            pages,
            inline,
            expect_len: if inline { 0 } else { (last - first + 1) as usize },
            count: data.len() as u32,
            retry: Retry { fd, inode: ino, pos, len: data.len() as u64 },
        };
        match self.delegate(FileOp::write(fd, data.len() as u64), intent, false) {
            Ok(_) => {
                self.fd_mut(fd)?.twin_pos = Some(end);
                Ok(())
            }
            Err(DeviceError::Offline) => {
                // Never sent: forget the pending marks; the caller buffers.
                for (_, e) in self.cache.iter_mut() {
                    if e.pending == Some(seq) {
                        e.pending = None;
                    }
                }
                Err(DeviceError::Offline)
            }
            Err(e) => Err(e),
        }
    }

    pub(super) fn read_delegated(&mut self, fd: Fd, f: &DevFd, n: u64, first: u32, last: u32) -> Result<(Vec<u8>, Trust), DeviceError> {
        let untrusted = f.flags.contains(OpenFlags::UNTRUSTED);
        if !untrusted {
            self.drain()?;
        }
        self.align(fd, f.pos)?;
        let inode = self.inode(f.inode)?;
        let en = n.min((inode.size as u64).saturating_sub(f.pos));
        let expect_len = if en > 0 && !inode.is_inline() { (((f.pos + en - 1) / PAGE) - f.pos / PAGE + 1) as usize } else { 0 };
        let intent = Intent::Read { inode: f.inode, first, expect_len, expect_n: en as u32, untrusted };
        let seq = self.delegate(FileOp::read(fd, n), intent, true)?;
        self.fd_mut(fd)?.twin_pos = Some(f.pos + en);
        let (trace, trust) = if untrusted {
            let p = self.pending.iter_mut().find(|p| p.seq == seq);
            match p {
                Some(p) if !p.local_fail => {
                    p.want_outcome = false;
                    (p.twin.trace.clone(), Trust::Untrusted)
                }
                Some(_) => return Err(DeviceError::VerificationFailed(Verdict::LocalReject)),
                // Already resolved: failures have been recorded on the fd.
                None => match self.resolved.remove(&seq) {
                    Some(o) if o.verdict.is_match() => (o.trace, Trust::Trusted),
                    Some(o) => return Err(DeviceError::VerificationFailed(o.verdict)),
                    None => (Vec::new(), Trust::Untrusted),
                },
            }
        } else {
            let o = self.settle(seq)?;
            if !o.verdict.is_match() {
                return Err(DeviceError::VerificationFailed(o.verdict));
            }
            (o.trace, Trust::Trusted)
        };
        let mut pages = Vec::new();
        let mut trust_all = trust;
        for p in first..=last {
            if let Some(e) = self.cache.get((f.inode, p)) {
                trust_all = trust_all.and(e.trust);
                pages.push(e.page.clone());
                continue;
            }
            let i = (p - first) as usize;
            let (page, block) = if inode.is_inline() && p == 0 {
                (self.inline_page(f.inode), None)
            } else if let Some(r) = trace.get(i) {
                (self.store.source_block(r.block), Some(r.block))
            } else {
                (Block::zeroed(), None)
            };
            if trust == Trust::Trusted && (block.is_some() || inode.is_inline()) {
                self.cache.insert((f.inode, p), page.clone(), block, Trust::Trusted, None);
            }
            pages.push(page);
        }
        Ok((gather(&pages, first, f.pos, n), trust_all))
    }

    /// Brings both twins' position for `fd` to `pos` if they may differ.
    pub(super) fn align(&mut self, fd: Fd, pos: u64) -> Result<(), DeviceError> {
        if self.fd(fd)?.twin_pos == Some(pos) {
            return Ok(());
        }
        let expect = u32::try_from(pos).map_err(|_| DeviceError::Op(OpError::Invalid))?;
        self.delegate(FileOp::lseek(fd, pos as i64, Whence::Set), Intent::Lseek { expect }, false)?;
        self.fd_mut(fd)?.twin_pos = Some(pos);
        Ok(())
    }

    /// Settles everything pending, then runs `op` to a verdict.
    pub(super) fn sync_op(&mut self, op: FileOp, intent: Intent) -> Result<Outcome, DeviceError> {
        self.drain()?;
        if !self.link.is_online() {
            return Err(DeviceError::Offline);
        }
        let seq = self.delegate(op, intent, true)?;
        let o = self.settle(seq)?;
        if !o.verdict.is_match() {
            return Err(DeviceError::VerificationFailed(o.verdict));
        }
        Ok(o)
    }

    /// Sends `op` to the replica, runs it on the local twin and, with a
    /// device-side stencil, stages its block requests.
    pub(super) fn delegate(&mut self, op: FileOp, intent: Intent, want_outcome: bool) -> Result<u64, DeviceError> {
        self.live()?;
        while self.stencil_stale {
            self.process_one()?;
        }
        let seq = self.next_seq;
        let meta_op = matches!(op.kind, OpKind::Open | OpKind::Write);
        if meta_op && self.crash_arm.is_some() && self.crash_target.is_none() {
            self.crash_target = Some(seq);
            if self.crash_arm == Some(CrashPoint::BeforeDelegate) {
                return Err(self.crash());
            }
        }
        if self.link.send(NetMessage::new(seq, NetBody::FileOp(op))).is_err() {
            if self.crash_target == Some(seq) {
                self.crash_target = None;
            }
            return Err(DeviceError::Offline);
        }
        self.next_seq += 1;
        self.max_sent = seq;
        self.expect.push_back(Expect::Trace(seq));
        let cp = self.store.checkpoint([]).map_err(|e| DeviceError::Protocol(e.to_string()))?;
        let twin = self.run_twin(seq, &op, cp);
        let mut p = Pending { seq, op, cp, intent, twin, local_fail: false, staged: false, want_outcome };
        if self.cfg.stencil_source == StencilSource::Device {
            self.local_stage(&mut p)?;
        }
        self.pending.push_back(p);
        if self.crash_target == Some(seq) && self.crash_arm == Some(CrashPoint::AfterReplayStaged) {
            // Wait until the replica has staged it, then die before acting on
            // the answer.
            while self.expect.front() != Some(&Expect::Trace(seq)) {
                self.process_one()?;
            }
            let _ = self.link.recv();
            self.expect.pop_front();
            return Err(self.crash());
        }
        if self.cfg.stencil_source == StencilSource::Cloud {
            while self.pending.iter().any(|p| p.seq == seq) {
                self.process_one()?;
            }
        }
        Ok(seq)
    }

    /// Runs one op on the local twin, serving its metadata requests through
    /// the stencil.
    fn run_twin(&mut self, seq: u64, op: &FileOp, cp: CheckpointId) -> TwinRun {
        self.counters.twin_ops += 1;
        let mut run = TwinRun::default();
        if self.twin.send(seq, &ChannelMsg::Op(*op)).is_err() {
            run.violated = true;
            return run;
        }
        loop {
            let (s, msg) = match self.twin.recv_timeout(self.cfg.twin_timeout) {
                Ok(m) => m,
                Err(_) => {
                    self.twin.reset();
                    run.violated = true;
                    return run;
                }
            };
            if s != seq {
                run.violated = true;
            }
            let reply = match msg {
                ChannelMsg::MetaReadReq(id) => match self.serve_meta_read(id) {
                    Some(b) if s == seq => ChannelMsg::MetaReadResp(b),
                    _ => self.reject(&mut run, id),
                },
                ChannelMsg::MetaWriteReq(id, b) => {
                    if s == seq && self.apply_meta_write(id, &b, cp) {
                        ChannelMsg::MetaWriteResp
                    } else {
                        self.reject(&mut run, id)
                    }
                }
                ChannelMsg::Done { result, trace } => {
                    run.result = decode_result(result);
                    if run.result.is_none() {
                        run.violated = true;
                    }
                    run.trace = trace;
                    return run;
                }
                _ => {
                    run.violated = true;
                    continue;
                }
            };
            if self.twin.send(seq, &reply).is_err() {
                run.violated = true;
                return run;
            }
        }
    }

    fn reject(&mut self, run: &mut TwinRun, id: BlockId) -> ChannelMsg {
        self.counters.stencil_rejects += 1;
        run.violated = true;
        ChannelMsg::Reject(id)
    }

    fn serve_meta_read(&self, id: BlockId) -> Option<Block> {
        if id.0 >= self.sb.total_blocks {
            return None;
        }
        if !self.cfg.stencil_gate {
            return Some(self.store.source_block(id));
        }
        self.stencil.serve_block_read(id, &self.store.source_block(id)).ok()
    }

    fn apply_meta_write(&mut self, id: BlockId, proposed: &Block, cp: CheckpointId) -> bool {
        if id.0 >= self.sb.total_blocks {
            return false;
        }
        let merged = if self.cfg.stencil_gate {
            let trusted = self.store.source_block(id);
            let Ok(m) = self.stencil.apply_block_write(id, proposed, &trusted) else {
                return false;
            };
            m
        } else {
            proposed.clone()
        };
        if self.store.checkpoint_extend(cp, id).is_err() || self.store.write_block(id, merged).is_err() {
            return false;
        }
        if self.cfg.stencil_source == StencilSource::Device && self.sb.is_inode_table(id) {
            let dirtied = BTreeSet::from([id]);
            match self.stencil.refresh(&dirtied, &self.store) {
                Ok(rep) => {
                    for (b, r) in rep.declassified {
                        self.scrub(cp, b, r.start as usize..r.end as usize);
                    }
                }
                Err(_) => return false,
            }
        }
        true
    }

    /// Zeroes bytes that just stopped being file data so they can never be
    /// served to the twin as metadata.
    fn scrub(&mut self, cp: CheckpointId, id: BlockId, r: std::ops::Range<usize>) {
        let mut b = self.store.source_block(id);
        if b.as_bytes()[r.clone()].iter().all(|&x| x == 0) {
            return;
        }
        b.as_mut_bytes()[r].fill(0);
        let _ = self.store.checkpoint_extend(cp, id);
        let _ = self.store.write_block(id, b);
    }

    /// Checks the local twin's answer against what the device can derive on
    /// its own, then carries out its data-block requests under the op's
    /// checkpoint.
    fn local_stage(&mut self, p: &mut Pending) -> Result<(), DeviceError> {
        p.staged = true;
        let Some(result) = p.twin.result.filter(|_| !p.twin.violated) else {
            p.local_fail = true;
            return Ok(());
        };
        let trace = &p.twin.trace;
        let ok = match &p.intent {
            Intent::Write { inode, first, expect_len, count, .. } => match result {
                Ok(c) => c == *count && verifier::shape_ok(trace, RequestKind::Write, *expect_len) && self.targets_ok(*inode, *first, trace),
                Err(OpError::NoSpace) => trace.is_empty(),
                Err(_) => false,
            },
            Intent::Read { inode, first, expect_len, expect_n, .. } => {
                result == Ok(*expect_n) && verifier::shape_ok(trace, RequestKind::Read, *expect_len) && self.targets_ok(*inode, *first, trace)
            }
            Intent::Lseek { expect } => result == Ok(*expect) && trace.is_empty(),
            Intent::Fstat { expect } => result == Ok(*expect) && trace.is_empty(),
            Intent::Open => trace.is_empty() && result != Err(OpError::Rejected),
            Intent::Simple => result == Ok(0) && trace.is_empty(),
        };
        if !ok {
            p.local_fail = true;
            return Ok(());
        }
        if let (Intent::Write { inode, pages, inline, .. }, Ok(_)) = (&p.intent, result) {
            if *inline {
                let (blk, off) = self.sb.inode_location(*inode);
                let mut b = self.store.source_block(blk);
                b.as_mut_bytes()[off + INLINE_OFFSET..off + INLINE_OFFSET + INLINE_CAP].copy_from_slice(&pages[0].as_bytes()[..INLINE_CAP]);
                self.write_under(p.cp, blk, b)?;
            } else {
                for (r, page) in trace.iter().zip(pages) {
                    self.write_under(p.cp, r.block, page.clone())?;
                }
            }
        }
        Ok(())
    }

    /// Each request targets a file-data block that is not validated as
    /// belonging to some other page, and no block appears twice.
    fn targets_ok(&self, inode: u32, first: u32, trace: &Trace) -> bool {
        let mut seen = BTreeSet::new();
        trace.iter().enumerate().all(|(i, r)| {
            let key = (inode, first + i as u32);
            self.stencil.is_full_data(r.block)
                && seen.insert(r.block)
                && self.memo.owner(r.block).is_none_or(|o| o == key)
                && !self.emergency.contains(&r.block)
        })
    }

    fn write_under(&mut self, cp: CheckpointId, id: BlockId, b: Block) -> Result<(), DeviceError> {
        self.store.checkpoint_extend(cp, id).and_then(|_| self.store.write_block(id, b)).map_err(|e| DeviceError::Protocol(e.to_string()))
    }

    // ---- network side ----

    /// Handles deliveries that are already due, without blocking.
    pub(super) fn pump(&mut self) -> Result<(), DeviceError> {
        while let Some(resp) = self.link.try_recv() {
            let exp = self.expect.pop_front().ok_or_else(|| DeviceError::Protocol("unexpected response".into()))?;
            self.handle(exp, resp)?;
        }
        Ok(())
    }

    pub(super) fn process_one(&mut self) -> Result<(), DeviceError> {
        self.live()?;
        let exp = self.expect.pop_front().ok_or_else(|| DeviceError::Protocol("nothing outstanding".into()))?;
        let resp = self.link.recv();
        self.handle(exp, resp)
    }

    /// Settles every pending op.
    pub(super) fn drain(&mut self) -> Result<(), DeviceError> {
        while !self.pending.is_empty() {
            self.process_one()?;
        }
        Ok(())
    }

    pub(super) fn settle(&mut self, seq: u64) -> Result<Outcome, DeviceError> {
        loop {
            if let Some(o) = self.resolved.remove(&seq) {
                return Ok(o);
            }
            if self.expect.is_empty() {
                return Err(DeviceError::Protocol(format!("seq {seq} never resolved")));
            }
            self.process_one()?;
        }
    }

    pub(super) fn await_ack(&mut self, seq: u64) -> Result<(), DeviceError> {
        while self.journal.last_acked < seq {
            if !self.expect.iter().any(|e| matches!(e, Expect::Commit(_))) {
                return Err(DeviceError::Offline);
            }
            self.process_one()?;
        }
        Ok(())
    }

    fn handle(&mut self, exp: Expect, resp: Result<NetMessage, WireError>) -> Result<(), DeviceError> {
        match exp {
            Expect::Trace(seq) => {
                if self.pending.front().map(|p| p.seq) == Some(seq) {
                    let p = self.pending.pop_front().unwrap();
                    self.resolve(p, resp)?;
                }
            }
            Expect::Commit(_) => {
                if let Ok(NetMessage { body: NetBody::Ack { committed, .. }, .. }) = resp {
                    self.journal.last_acked = self.journal.last_acked.max(committed);
                }
            }
            Expect::Abort => {
                if let Ok(NetMessage { body: NetBody::Ack { stencil, .. }, .. }) = resp {
                    if self.cfg.stencil_source == StencilSource::Cloud {
                        self.install_full_stencil(stencil.as_ref())?;
                    }
                }
                self.stencil_stale = false;
            }
            Expect::Hello => {
                self.hello_ack = Some(match resp {
                    Ok(m) => m.body,
                    Err(e) => NetBody::Error { code: 0, message: e.to_string() },
                });
            }
        }
        Ok(())
    }

    pub(super) fn install_full_stencil(&mut self, delta: Option<&StencilDelta>) -> Result<(), DeviceError> {
        let mut map = StencilMap::skeleton(self.sb);
        if let Some(d) = delta {
            map.apply_delta(d).map_err(|e| DeviceError::Protocol(format!("replica stencil rejected at block {}", e.0)))?;
        }
        self.stencil = map;
        Ok(())
    }

    fn resolve(&mut self, mut p: Pending, resp: Result<NetMessage, WireError>) -> Result<(), DeviceError> {
        let cloud = match resp {
            Ok(NetMessage { seq, body: NetBody::TraceResp { ok: true, trace, result, stencil } }) if seq == p.seq => Some((trace, result, stencil)),
            _ => None,
        };
        let mut cloud_ok = cloud.is_some();
        if self.cfg.stencil_source == StencilSource::Cloud && !p.staged {
            if let Some((_, _, stencil)) = &cloud {
                cloud_ok = self.apply_cloud_delta(p.cp, stencil.as_ref());
            }
            if cloud_ok {
                self.local_stage(&mut p)?;
            }
        }
        let verdict = match &cloud {
            _ if p.local_fail => Verdict::LocalReject,
            Some((trace, result, _)) if cloud_ok => match verify_traces(&p.twin.trace, trace) {
                Verdict::Match if p.twin.result != Some(*result) => Verdict::Mismatch(trace.len()),
                v => v,
            },
            _ => Verdict::CloudReject,
        };
        match verdict {
            Verdict::Match => self.counters.matches += 1,
            Verdict::Mismatch(_) => self.counters.mismatches += 1,
            Verdict::LocalReject => self.counters.local_rejects += 1,
            Verdict::CloudReject => self.counters.cloud_rejects += 1,
        }
        if verdict.is_match() {
            self.on_match(p)
        } else {
            self.on_failure(p, verdict)
        }
    }

    /// Applies the replica's stencil update for one op and scrubs whatever
    /// it declassifies. False if the update is malformed.
    fn apply_cloud_delta(&mut self, cp: CheckpointId, delta: Option<&StencilDelta>) -> bool {
        let Some(d) = delta else { return true };
        let before: Vec<(BlockId, BlockClass)> = d.entries.iter().map(|(id, _)| (*id, self.stencil.classify(*id))).collect();
        if self.stencil.apply_delta(d).is_err() {
            return false;
        }
        for (id, old) in before {
            let new = self.stencil.classify(id);
            let mut keep = [false; BLOCK_SIZE];
            for r in new.data_ranges() {
                keep[r.start as usize..r.end as usize].fill(true);
            }
            for r in old.data_ranges() {
                let mut i = r.start as usize;
                while i < r.end as usize {
                    if keep[i] {
                        i += 1;
                        continue;
                    }
                    let j = (i..r.end as usize).find(|&j| keep[j]).unwrap_or(r.end as usize);
                    self.scrub(cp, id, i..j);
                    i = j;
                }
            }
        }
        true
    }

    fn on_match(&mut self, p: Pending) -> Result<(), DeviceError> {
        self.store.discard(p.cp).map_err(|e| DeviceError::Protocol(e.to_string()))?;
        self.journal.last_executed = p.seq;
        let result = p.twin.result.unwrap_or(Err(OpError::Rejected));
        match &p.intent {
            Intent::Write { inode, first, pages, inline, retry, .. } => {
                let keys: Vec<(u32, u32)> = (0..pages.len() as u32).map(|i| (*inode, first + i)).collect();
                if let Err(code) = result {
                    self.taint(&keys, p.seq);
                    if let Some(f) = self.fds.get_mut(&retry.fd) {
                        f.failed = Some(DeviceError::Op(code));
                        f.barrier_failed = true;
                    }
                } else {
                    for (i, key) in keys.iter().enumerate() {
                        let target = if *inline { MemoTarget::Inline } else { MemoTarget::Block(p.twin.trace[i].block) };
                        self.memo.set(*key, target);
                        if let Some(e) = self.cache.get_mut(*key) {
                            e.block = match target {
                                MemoTarget::Block(b) => Some(b),
                                MemoTarget::Inline => None,
                            };
                            if e.pending == Some(p.seq) {
                                e.pending = None;
                                e.trust = Trust::Trusted;
                            }
                        }
                    }
                }
            }
            Intent::Read { inode, first, .. } => {
                if p.twin.trace.is_empty() && self.inode(*inode).is_ok_and(|i| i.is_inline()) {
                    self.memo.set((*inode, 0), MemoTarget::Inline);
                }
                for (i, r) in p.twin.trace.iter().enumerate() {
                    self.memo.set((*inode, first + i as u32), MemoTarget::Block(r.block));
                }
            }
            _ => {}
        }
        if p.want_outcome {
            self.resolved.insert(p.seq, Outcome { verdict: Verdict::Match, result, trace: p.twin.trace.clone() });
        }
        let crash_here = self.crash_target == Some(p.seq);
        if crash_here && self.crash_arm == Some(CrashPoint::AfterDeviceExec) {
            return Err(self.crash());
        }
        if self.link.send(NetMessage::new(p.seq, NetBody::Commit)).is_ok() {
            self.expect.push_back(Expect::Commit(p.seq));
            self.journal.commit_sent = p.seq;
        }
        if crash_here && self.crash_arm == Some(CrashPoint::AfterFinalCommitSent) {
            return Err(self.crash());
        }
        if crash_here && self.crash_arm == Some(CrashPoint::AfterReplicaCommit) {
            // Only the ack for this commit matters; earlier pending ops were
            // settled before any metadata op was delegated.
            while self.journal.last_acked < p.seq && !self.expect.is_empty() {
                let exp = self.expect.pop_front().unwrap();
                let resp = self.link.recv();
                self.handle(exp, resp)?;
            }
            return Err(self.crash());
        }
        Ok(())
    }

    fn taint(&mut self, keys: &[(u32, u32)], seq: u64) {
        for key in keys {
            if let Some(e) = self.cache.get_mut(*key) {
                e.trust = Trust::Untrusted;
                if e.pending == Some(seq) {
                    e.pending = None;
                }
            }
        }
    }

    /// Rolls back `p` and everything delegated after it, tells the replica
    /// to drop the same range, and queues the writes for retry.
    fn on_failure(&mut self, p: Pending, verdict: Verdict) -> Result<(), DeviceError> {
        let k = p.seq;
        let through = self.max_sent;
        let mut all = vec![p];
        all.extend(self.pending.drain(..));
        for q in all.iter().rev() {
            self.store.rollback(q.cp).map_err(|e| DeviceError::Protocol(e.to_string()))?;
        }
        self.counters.rollbacks += all.len() as u64;
        for q in &all {
            let v = if q.seq == k { verdict } else { Verdict::CloudReject };
            if let Intent::Write { inode, first, pages, retry, .. } = &q.intent {
                let keys: Vec<(u32, u32)> = (0..pages.len() as u32).map(|i| (*inode, first + i)).collect();
                self.taint(&keys, q.seq);
                self.retries.push(*retry);
            }
            if let Some(f) = self.fds.get_mut(&q.op.fd) {
                if matches!(q.intent, Intent::Write { .. } | Intent::Read { untrusted: true, .. }) {
                    f.failed.get_or_insert(DeviceError::VerificationFailed(v));
                    f.barrier_failed = true;
                }
            }
            if q.want_outcome {
                self.resolved.insert(q.seq, Outcome { verdict: v, result: Err(OpError::Rejected), trace: Vec::new() });
            }
        }
        for f in self.fds.values_mut() {
            f.twin_pos = None;
        }
        if self.link.send(NetMessage::new(k, NetBody::Abort { through })).is_ok() {
            self.expect.push_back(Expect::Abort);
            if self.cfg.stencil_source == StencilSource::Cloud {
                self.stencil_stale = true;
            }
        }
        if self.cfg.stencil_source == StencilSource::Device {
            self.stencil = StencilMap::build(&self.store).map_err(|e| DeviceError::Protocol(e.to_string()))?;
        }
        Ok(())
    }

    /// Rebuilds the block ownership map from the (validated) disk.
    pub(super) fn build_owners(&mut self) {
        self.memo.clear();
        for ino in 0..self.sb.inode_count {
            let Ok(i) = self.store.inode(&self.sb, ino) else { continue };
            if i.mode != crate::minifs::InodeMode::File {
                continue;
            }
            for (p, &b) in i.direct.iter().enumerate().take_while(|(_, &b)| b != 0) {
                self.memo.set((ino, p as u32), MemoTarget::Block(BlockId(b)));
            }
        }
    }
}
