//! The device <-> local twin channel. Everything crossing it is a 4096-byte
//! frame: `kind(1) | seq(8) | len(2) | payload(len <= 4085) | zero padding`.
//!
//! Messages larger than one payload are split:
//! - An op completion is a FILEOP frame carrying `result(4) | n(4)`
//!   followed by `ceil(n / 1021)` TRACE frames of packed entries. Each
//!   entry is a u32 block number with bit 31 set for writes.
//! - A block travels as two META frames, each prefixed by its byte offset
//!   within the block (`offset(2)`), after `block(4)` for writes.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::time::Duration;

use super::{decode_fileop, encode_fileop, Reader, WireError, FILEOP_LEN};
use crate::blockstore::{Block, BlockId, BLOCK_SIZE};
use crate::op::{BlockRequest, FileOp, RequestKind, Trace};

pub const FRAME_SIZE: usize = 4096;
pub const FRAME_HEADER: usize = 11;
pub const PAYLOAD_CAP: usize = FRAME_SIZE - FRAME_HEADER;
pub const TRACE_ENTRIES_PER_FRAME: usize = PAYLOAD_CAP / 4;
const WRITE_BIT: u32 = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    FileOp = 1,
    Trace = 2,
    MetaReadReq = 3,
    MetaReadResp = 4,
    MetaWriteReq = 5,
    MetaWriteResp = 6,
    Reject = 7,
}

impl FrameKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => FrameKind::FileOp,
            2 => FrameKind::Trace,
            3 => FrameKind::MetaReadReq,
            4 => FrameKind::MetaReadResp,
            5 => FrameKind::MetaWriteReq,
            6 => FrameKind::MetaWriteResp,
            7 => FrameKind::Reject,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelFrame {
    pub kind: FrameKind,
    pub seq: u64,
    pub payload: Vec<u8>,
}

pub type RawFrame = Box<[u8; FRAME_SIZE]>;

impl ChannelFrame {
    pub fn encode(&self) -> RawFrame {
        assert!(self.payload.len() <= PAYLOAD_CAP, "payload exceeds frame");
        let mut f: RawFrame = Box::new([0u8; FRAME_SIZE]);
        f[0] = self.kind as u8;
        f[1..9].copy_from_slice(&self.seq.to_le_bytes());
        f[9..11].copy_from_slice(&(self.payload.len() as u16).to_le_bytes());
        f[FRAME_HEADER..FRAME_HEADER + self.payload.len()].copy_from_slice(&self.payload);
        f
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        if b.len() != FRAME_SIZE {
            return Err(WireError::LengthMismatch { expected: FRAME_SIZE, got: b.len() });
        }
        let kind = FrameKind::from_byte(b[0]).ok_or(WireError::Decode("unknown frame kind"))?;
        let seq = u64::from_le_bytes(b[1..9].try_into().unwrap());
        let len = u16::from_le_bytes(b[9..11].try_into().unwrap()) as usize;
        if len > PAYLOAD_CAP {
            return Err(WireError::Decode("frame length exceeds payload capacity"));
        }
        if b[FRAME_HEADER + len..].iter().any(|&x| x != 0) {
            return Err(WireError::Decode("nonzero frame padding"));
        }
        Ok(ChannelFrame { kind, seq, payload: b[FRAME_HEADER..FRAME_HEADER + len].to_vec() })
    }
}

/// Logical channel messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChannelMsg {
    /// Device -> twin: run this op.
    Op(FileOp),
    /// Twin -> device: the op finished with this raw result and trace.
    Done { result: u32, trace: Trace },
    MetaReadReq(BlockId),
    MetaReadResp(Block),
    MetaWriteReq(BlockId, Block),
    MetaWriteResp,
    Reject(BlockId),
}

/// Which side a stream of frames is addressed to. FILEOP frames differ by
/// direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToTwin,
    ToDevice,
}

fn frame(kind: FrameKind, seq: u64, payload: Vec<u8>) -> ChannelFrame {
    ChannelFrame { kind, seq, payload }
}

pub fn pack_entry(rq: &BlockRequest) -> u32 {
    match rq.kind {
        RequestKind::Read => rq.block.0 & !WRITE_BIT,
        RequestKind::Write => rq.block.0 | WRITE_BIT,
    }
}

pub fn unpack_entry(v: u32) -> BlockRequest {
    if v & WRITE_BIT != 0 {
        BlockRequest::write(v & !WRITE_BIT)
    } else {
        BlockRequest::read(v)
    }
}

/// First META_READ_RESP fragment size: payload minus the offset header.
pub const READ_CHUNK: usize = PAYLOAD_CAP - 2;
/// First META_WRITE_REQ fragment size: payload minus block and offset.
pub const WRITE_CHUNK: usize = PAYLOAD_CAP - 6;

pub fn to_frames(seq: u64, msg: &ChannelMsg) -> Vec<ChannelFrame> {
    match msg {
        ChannelMsg::Op(f) => vec![frame(FrameKind::FileOp, seq, encode_fileop(f).to_vec())],
        ChannelMsg::Done { result, trace } => {
            let mut p = result.to_le_bytes().to_vec();
            p.extend_from_slice(&(trace.len() as u32).to_le_bytes());
            let mut out = vec![frame(FrameKind::FileOp, seq, p)];
            for chunk in trace.chunks(TRACE_ENTRIES_PER_FRAME) {
                let p = chunk.iter().flat_map(|rq| pack_entry(rq).to_le_bytes()).collect();
                out.push(frame(FrameKind::Trace, seq, p));
            }
            out
        }
        ChannelMsg::MetaReadReq(id) => vec![frame(FrameKind::MetaReadReq, seq, id.0.to_le_bytes().to_vec())],
        ChannelMsg::MetaReadResp(b) => [0..READ_CHUNK, READ_CHUNK..BLOCK_SIZE]
            .into_iter()
            .map(|r| {
                let mut p = (r.start as u16).to_le_bytes().to_vec();
                p.extend_from_slice(&b.as_bytes()[r]);
                frame(FrameKind::MetaReadResp, seq, p)
            })
            .collect(),
        ChannelMsg::MetaWriteReq(id, b) => [0..WRITE_CHUNK, WRITE_CHUNK..BLOCK_SIZE]
            .into_iter()
            .map(|r| {
                let mut p = id.0.to_le_bytes().to_vec();
                p.extend_from_slice(&(r.start as u16).to_le_bytes());
                p.extend_from_slice(&b.as_bytes()[r]);
                frame(FrameKind::MetaWriteReq, seq, p)
            })
            .collect(),
        ChannelMsg::MetaWriteResp => vec![frame(FrameKind::MetaWriteResp, seq, Vec::new())],
        ChannelMsg::Reject(id) => vec![frame(FrameKind::Reject, seq, id.0.to_le_bytes().to_vec())],
    }
}

enum Partial {
    Trace { result: u32, want: usize, got: Trace },
    Block { id: Option<BlockId>, buf: Block, filled: usize },
}

/// Rebuilds messages from frames arriving in one direction.
pub struct Reassembler {
    dir: Direction,
    partial: Option<(u64, Partial)>,
}

impl Reassembler {
    pub fn new(dir: Direction) -> Self {
        Reassembler { dir, partial: None }
    }

    /// Feeds one frame. Returns a message when one completes.
    pub fn push(&mut self, f: ChannelFrame) -> Result<Option<(u64, ChannelMsg)>, WireError> {
        if let Some((seq, part)) = self.partial.take() {
            if f.seq != seq {
                return Err(WireError::Decode("fragment seq changed mid-message"));
            }
            return self.continue_partial(seq, part, f);
        }
        let mut r = Reader::new(&f.payload);
        let seq = f.seq;
        let msg = match (f.kind, self.dir) {
            (FrameKind::FileOp, Direction::ToTwin) => {
                if f.payload.len() != FILEOP_LEN {
                    return Err(WireError::LengthMismatch { expected: FILEOP_LEN, got: f.payload.len() });
                }
                ChannelMsg::Op(decode_fileop(&f.payload)?)
            }
            (FrameKind::FileOp, Direction::ToDevice) => {
                let result = r.u32()?;
                let n = r.u32()? as usize;
                r.finish()?;
                if n == 0 {
                    ChannelMsg::Done { result, trace: Vec::new() }
                } else {
                    self.partial = Some((seq, Partial::Trace { result, want: n, got: Vec::with_capacity(n.min(1 << 16)) }));
                    return Ok(None);
                }
            }
            (FrameKind::MetaReadReq, Direction::ToDevice) => {
                let id = BlockId(r.u32()?);
                r.finish()?;
                ChannelMsg::MetaReadReq(id)
            }
            (FrameKind::MetaReadResp, Direction::ToTwin) => {
                return self.continue_partial(seq, Partial::Block { id: None, buf: Block::zeroed(), filled: 0 }, f);
            }
            (FrameKind::MetaWriteReq, Direction::ToDevice) => {
                let id = BlockId(r.u32()?);
                return self.continue_partial(seq, Partial::Block { id: Some(id), buf: Block::zeroed(), filled: 0 }, f);
            }
            (FrameKind::MetaWriteResp, Direction::ToTwin) => {
                r.finish()?;
                ChannelMsg::MetaWriteResp
            }
            (FrameKind::Reject, Direction::ToTwin) => {
                let id = BlockId(r.u32()?);
                r.finish()?;
                ChannelMsg::Reject(id)
            }
            _ => return Err(WireError::Decode("frame kind not valid in this direction")),
        };
        Ok(Some((seq, msg)))
    }

    fn continue_partial(&mut self, seq: u64, part: Partial, f: ChannelFrame) -> Result<Option<(u64, ChannelMsg)>, WireError> {
        match part {
            Partial::Trace { result, want, mut got } => {
                if f.kind != FrameKind::Trace || !f.payload.len().is_multiple_of(4) {
                    return Err(WireError::Decode("expected TRACE frame"));
                }
                let left = want - got.len();
                let expect = left.min(TRACE_ENTRIES_PER_FRAME);
                if f.payload.len() / 4 != expect {
                    return Err(WireError::LengthMismatch { expected: expect * 4, got: f.payload.len() });
                }
                got.extend(f.payload.chunks_exact(4).map(|c| unpack_entry(u32::from_le_bytes(c.try_into().unwrap()))));
                if got.len() == want {
                    Ok(Some((seq, ChannelMsg::Done { result, trace: got })))
                } else {
                    self.partial = Some((seq, Partial::Trace { result, want, got }));
                    Ok(None)
                }
            }
            Partial::Block { id, mut buf, filled } => {
                let mut r = Reader::new(&f.payload);
                let expect_kind = if id.is_some() { FrameKind::MetaWriteReq } else { FrameKind::MetaReadResp };
                if f.kind != expect_kind {
                    return Err(WireError::Decode("expected block fragment"));
                }
                if let Some(id) = id {
                    if BlockId(r.u32()?) != id {
                        return Err(WireError::Decode("fragment block changed"));
                    }
                }
                let off = r.u16()? as usize;
                let chunk = r.rest();
                if off != filled || off + chunk.len() > BLOCK_SIZE || chunk.is_empty() {
                    return Err(WireError::Decode("fragment offset"));
                }
                buf.as_mut_bytes()[off..off + chunk.len()].copy_from_slice(chunk);
                let filled = off + chunk.len();
                if filled == BLOCK_SIZE {
                    let msg = match id {
                        Some(id) => ChannelMsg::MetaWriteReq(id, buf),
                        None => ChannelMsg::MetaReadResp(buf),
                    };
                    Ok(Some((seq, msg)))
                } else {
                    self.partial = Some((seq, Partial::Block { id, buf, filled }));
                    Ok(None)
                }
            }
        }
    }
}

/// Observer of raw frames, for taint scanning.
pub type FrameTap = Arc<dyn Fn(&[u8]) + Send + Sync>;

/// One end of a bidirectional bounded frame mailbox.
pub struct Endpoint {
    tx: SyncSender<RawFrame>,
    rx: Receiver<RawFrame>,
    incoming: Reassembler,
    tap: Option<FrameTap>,
    frames_sent: u64,
}

/// A connected pair. The first end talks to the twin, the second is the
/// twin's own end.
pub fn channel_pair(capacity: usize) -> (Endpoint, Endpoint) {
    let (to_twin_tx, to_twin_rx) = mpsc::sync_channel(capacity);
    let (to_dev_tx, to_dev_rx) = mpsc::sync_channel(capacity);
    let device = Endpoint {
        tx: to_twin_tx,
        rx: to_dev_rx,
        incoming: Reassembler::new(Direction::ToDevice),
        tap: None,
        frames_sent: 0,
    };
    let twin = Endpoint {
        tx: to_dev_tx,
        rx: to_twin_rx,
        incoming: Reassembler::new(Direction::ToTwin),
        tap: None,
        frames_sent: 0,
    };
    (device, twin)
}

impl Endpoint {
    /// Installs an observer that sees every frame sent from this end.
    pub fn set_tap(&mut self, tap: FrameTap) {
        self.tap = Some(tap);
    }

    pub fn frames_sent(&self) -> u64 {
        self.frames_sent
    }

    pub fn send_frame(&mut self, f: &ChannelFrame) -> Result<(), WireError> {
        let raw = f.encode();
        if let Some(tap) = &self.tap {
            tap(&raw[..]);
        }
        self.tx.send(raw).map_err(|_| WireError::ChannelClosed)?;
        self.frames_sent += 1;
        Ok(())
    }

    pub fn send(&mut self, seq: u64, msg: &ChannelMsg) -> Result<(), WireError> {
        for f in to_frames(seq, msg) {
            self.send_frame(&f)?;
        }
        Ok(())
    }

    pub fn recv(&mut self) -> Result<(u64, ChannelMsg), WireError> {
        loop {
            let raw = self.rx.recv().map_err(|_| WireError::ChannelClosed)?;
            if let Some(m) = self.incoming.push(ChannelFrame::decode(&raw[..])?)? {
                return Ok(m);
            }
        }
    }

    pub fn recv_timeout(&mut self, t: Duration) -> Result<(u64, ChannelMsg), WireError> {
        loop {
            let raw = self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => WireError::Timeout,
                RecvTimeoutError::Disconnected => WireError::ChannelClosed,
            })?;
            if let Some(m) = self.incoming.push(ChannelFrame::decode(&raw[..])?)? {
                return Ok(m);
            }
        }
    }

    /// Drops any half-assembled message, e.g. after a protocol error.
    pub fn reset(&mut self) {
        self.incoming = Reassembler::new(self.incoming.dir);
    }
}
