//! Device <-> replica messages: `len(4) | kind(1) | seq(8) | body`, where
//! `len` counts everything after itself.

use std::io::{Read, Write};

use super::{decode_fileop, encode_fileop, Reader, WireError};
use crate::blockstore::BlockId;
use crate::op::{decode_result, encode_result, BlockRequest, FileOp, OpResult, RequestKind, Trace};
use crate::stencil::StencilDelta;

pub const PROTOCOL_VERSION: u8 = 1;

/// Upper bound on one message, well above a 4 GiB-geometry metadata image.
pub const MAX_MESSAGE: usize = 256 << 20;

pub mod kind {
    pub const HELLO: u8 = 1;
    pub const FILEOP: u8 = 2;
    pub const TRACE_RESP: u8 = 3;
    pub const COMMIT: u8 = 4;
    pub const ABORT: u8 = 5;
    pub const ACK: u8 = 6;
    pub const ERROR: u8 = 7;
}

pub const HELLO_CLOUD_STENCIL: u8 = 1;
/// HELLO flag: the device forgot its descriptors; clear the twin's.
pub const HELLO_RESET_FDS: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NetBody {
    /// Opens or resumes a session. A non-empty image provisions the replica.
    Hello { version: u8, device_id: u64, flags: u8, image: Vec<u8> },
    FileOp(FileOp),
    TraceResp { ok: bool, trace: Trace, result: OpResult, stencil: Option<StencilDelta> },
    /// Commits every staged op up to and including the message seq.
    Commit,
    /// Aborts staged ops from the message seq through `through`.
    Abort { through: u64 },
    Ack { committed: u64, applied: u64, stencil: Option<StencilDelta> },
    Error { code: u8, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetMessage {
    pub seq: u64,
    pub body: NetBody,
}

pub mod error_code {
    pub const SEQ_GAP: u8 = 1;
    pub const UNKNOWN_TXN: u8 = 2;
    pub const NO_SESSION: u8 = 3;
    pub const BAD_IMAGE: u8 = 4;
    pub const BAD_MESSAGE: u8 = 5;
    pub const REPLAY: u8 = 6;
}

/// `n(4) | n x (kind(1) block(4))`; kind 0 is a read, 1 a write.
pub fn encode_trace(t: &[BlockRequest]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 5 * t.len());
    push_trace(&mut out, t);
    out
}

pub fn decode_trace(b: &[u8]) -> Result<Trace, WireError> {
    let mut r = Reader::new(b);
    let t = read_trace(&mut r)?;
    r.finish()?;
    Ok(t)
}

fn push_trace(out: &mut Vec<u8>, t: &[BlockRequest]) {
    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    for rq in t {
        out.push(match rq.kind {
            RequestKind::Read => 0,
            RequestKind::Write => 1,
        });
        out.extend_from_slice(&rq.block.0.to_le_bytes());
    }
}

fn read_trace(r: &mut Reader) -> Result<Trace, WireError> {
    let n = r.u32()? as usize;
    let body = r.take(n.checked_mul(5).ok_or(WireError::Decode("trace length"))?)?;
    body.chunks_exact(5)
        .map(|e| {
            let kind = match e[0] {
                0 => RequestKind::Read,
                1 => RequestKind::Write,
                _ => return Err(WireError::Decode("trace entry kind")),
            };
            Ok(BlockRequest { kind, block: BlockId(u32::from_le_bytes(e[1..5].try_into().unwrap())) })
        })
        .collect()
}

fn read_stencil(r: &mut Reader) -> Result<Option<StencilDelta>, WireError> {
    if r.is_empty() {
        return Ok(None);
    }
    let rest = r.rest();
    let (d, used) = StencilDelta::decode(rest).map_err(|_| WireError::Decode("stencil delta"))?;
    if used != rest.len() {
        return Err(WireError::LengthMismatch { expected: used, got: rest.len() });
    }
    Ok(Some(d))
}

impl NetMessage {
    pub fn new(seq: u64, body: NetBody) -> Self {
        NetMessage { seq, body }
    }

    pub fn kind(&self) -> u8 {
        match self.body {
            NetBody::Hello { .. } => kind::HELLO,
            NetBody::FileOp(_) => kind::FILEOP,
            NetBody::TraceResp { .. } => kind::TRACE_RESP,
            NetBody::Commit => kind::COMMIT,
            NetBody::Abort { .. } => kind::ABORT,
            NetBody::Ack { .. } => kind::ACK,
            NetBody::Error { .. } => kind::ERROR,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut b = Vec::new();
        match &self.body {
            NetBody::Hello { version, device_id, flags, image } => {
                b.push(*version);
                b.extend_from_slice(&device_id.to_le_bytes());
                b.push(*flags);
                b.extend_from_slice(&(image.len() as u32).to_le_bytes());
                b.extend_from_slice(image);
            }
            NetBody::FileOp(f) => b.extend_from_slice(&encode_fileop(f)),
            NetBody::TraceResp { ok, trace, result, stencil } => {
                b.push(*ok as u8);
                push_trace(&mut b, trace);
                b.extend_from_slice(&encode_result(*result).to_le_bytes());
                if let Some(s) = stencil {
                    b.extend_from_slice(&s.encode());
                }
            }
            NetBody::Commit => {}
            NetBody::Abort { through } => b.extend_from_slice(&through.to_le_bytes()),
            NetBody::Ack { committed, applied, stencil } => {
                b.extend_from_slice(&committed.to_le_bytes());
                b.extend_from_slice(&applied.to_le_bytes());
                if let Some(s) = stencil {
                    b.extend_from_slice(&s.encode());
                }
            }
            NetBody::Error { code, message } => {
                let m = message.as_bytes();
                let m = &m[..m.len().min(u16::MAX as usize)];
                b.push(*code);
                b.extend_from_slice(&(m.len() as u16).to_le_bytes());
                b.extend_from_slice(m);
            }
        }
        b
    }

    /// Full framed encoding including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let body = self.encode_body();
        let mut out = Vec::with_capacity(13 + body.len());
        out.extend_from_slice(&((9 + body.len()) as u32).to_le_bytes());
        out.push(self.kind());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Decodes one complete framed message. Trailing bytes are an error.
    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(b);
        let len = r.u32()? as usize;
        if len < 9 || b.len() != 4 + len {
            return Err(WireError::LengthMismatch { expected: 4 + len.max(9), got: b.len() });
        }
        let k = r.u8()?;
        let seq = r.u64()?;
        let body = Self::decode_body(k, &mut r)?;
        r.finish()?;
        Ok(NetMessage { seq, body })
    }

    fn decode_body(k: u8, r: &mut Reader) -> Result<NetBody, WireError> {
        Ok(match k {
            kind::HELLO => {
                let version = r.u8()?;
                let device_id = r.u64()?;
                let flags = r.u8()?;
                let n = r.u32()? as usize;
                NetBody::Hello { version, device_id, flags, image: r.take(n)?.to_vec() }
            }
            kind::FILEOP => NetBody::FileOp(decode_fileop(r.rest())?),
            kind::TRACE_RESP => {
                let ok = match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(WireError::Decode("ok flag")),
                };
                let trace = read_trace(r)?;
                let result = decode_result(r.u32()?).ok_or(WireError::Decode("result code"))?;
                let stencil = read_stencil(r)?;
                NetBody::TraceResp { ok, trace, result, stencil }
            }
            kind::COMMIT => NetBody::Commit,
            kind::ABORT => NetBody::Abort { through: r.u64()? },
            kind::ACK => {
                let committed = r.u64()?;
                let applied = r.u64()?;
                NetBody::Ack { committed, applied, stencil: read_stencil(r)? }
            }
            kind::ERROR => {
                let code = r.u8()?;
                let n = r.u16()? as usize;
                let message = std::str::from_utf8(r.take(n)?).map_err(|_| WireError::Decode("utf8"))?;
                NetBody::Error { code, message: message.to_owned() }
            }
            _ => return Err(WireError::Decode("unknown message kind")),
        })
    }
}

pub fn write_message(w: &mut impl Write, m: &NetMessage) -> Result<(), WireError> {
    w.write_all(&m.encode())?;
    w.flush()?;
    Ok(())
}

/// Reads one framed message. A clean EOF before the prefix is `ChannelClosed`.
pub fn read_message(r: &mut impl Read) -> Result<NetMessage, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Err(WireError::ChannelClosed),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_le_bytes(len) as usize;
    if !(9..=MAX_MESSAGE).contains(&n) {
        return Err(WireError::Decode("message length out of range"));
    }
    let mut buf = vec![0u8; 4 + n];
    buf[..4].copy_from_slice(&len);
    r.read_exact(&mut buf[4..])?;
    NetMessage::decode(&buf)
}

/// Request/response seam between the device and a replica. Every request
/// gets exactly one response.
pub trait Transport: Send {
    fn exchange(&mut self, m: &NetMessage) -> Result<NetMessage, WireError>;
}

/// Plain TCP stream with length-prefix framing.
pub struct TcpTransport {
    stream: std::net::TcpStream,
}

impl TcpTransport {
    pub fn connect(addr: impl std::net::ToSocketAddrs) -> Result<Self, WireError> {
        let stream = std::net::TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpTransport { stream })
    }
}

impl Transport for TcpTransport {
    fn exchange(&mut self, m: &NetMessage) -> Result<NetMessage, WireError> {
        write_message(&mut self.stream, m)?;
        read_message(&mut self.stream)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::op::{NameToken, OpError, OpenFlags};
    use crate::stencil::BlockClass;
    use proptest::prelude::*;

    #[test]
    fn empty_trace_resp_body_is_nine_bytes() {
        let m = NetMessage::new(1, NetBody::TraceResp { ok: true, trace: vec![], result: Ok(0), stencil: None });
        assert_eq!(m.encode_body().len(), 9);
    }

    #[test]
    fn read_21_entry() {
        assert_eq!(encode_trace(&[BlockRequest::read(21)]), vec![1, 0, 0, 0, 0, 0x15, 0, 0, 0]);
    }

    #[test]
    fn stream_round_trip_and_eof() {
        let msgs = vec![
            NetMessage::new(1, NetBody::Commit),
            NetMessage::new(2, NetBody::Abort { through: 9 }),
            NetMessage::new(3, NetBody::Error { code: 1, message: "gap".into() }),
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_message(&mut buf, m).unwrap();
        }
        let mut cur = std::io::Cursor::new(buf);
        for m in &msgs {
            assert_eq!(&read_message(&mut cur).unwrap(), m);
        }
        assert_eq!(read_message(&mut cur), Err(WireError::ChannelClosed));
    }

    #[test]
    fn truncated_and_trailing() {
        let m = NetMessage::new(5, NetBody::FileOp(FileOp::write(3, 4096)));
        let b = m.encode();
        assert!(matches!(NetMessage::decode(&b[..b.len() - 1]), Err(WireError::LengthMismatch { .. })));
        let mut extra = b.clone();
        extra.push(0);
        assert!(NetMessage::decode(&extra).is_err());
    }

    fn arb_result() -> impl Strategy<Value = OpResult> {
        prop_oneof![
            (0u32..crate::op::MAX_RESULT_VALUE).prop_map(Ok),
            (1u8..=8).prop_map(|c| Err(OpError::from_code(c).unwrap())),
        ]
    }

    fn arb_trace() -> impl Strategy<Value = Trace> {
        proptest::collection::vec(
            (any::<bool>(), any::<u32>()).prop_map(|(w, b)| if w { BlockRequest::write(b) } else { BlockRequest::read(b) }),
            0..40,
        )
    }

    fn arb_stencil() -> impl Strategy<Value = Option<StencilDelta>> {
        let class = prop_oneof![
            Just(BlockClass::FullMetadata),
            Just(BlockClass::FullData),
            Just(BlockClass::Unused),
            Just(BlockClass::Mixed(vec![0..64, 128..4096])),
        ];
        proptest::option::of(
            proptest::collection::vec((any::<u32>().prop_map(BlockId), class), 0..5)
                .prop_map(|entries| StencilDelta { entries }),
        )
    }

    pub(crate) fn arb_fileop() -> impl Strategy<Value = FileOp> {
        (1u8..=7, any::<u32>(), any::<u32>(), any::<u64>(), any::<[u8; 16]>()).prop_map(|(k, fd, fl, c, n)| FileOp {
            kind: crate::op::OpKind::from_byte(k).unwrap(),
            fd,
            flags: OpenFlags(fl),
            count: c,
            name: NameToken(n),
        })
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = NetMessage> {
        let body = prop_oneof![
            (any::<u8>(), any::<u64>(), any::<u8>(), proptest::collection::vec(any::<u8>(), 0..64))
                .prop_map(|(version, device_id, flags, image)| NetBody::Hello { version, device_id, flags, image }),
            arb_fileop().prop_map(NetBody::FileOp),
            (any::<bool>(), arb_trace(), arb_result(), arb_stencil())
                .prop_map(|(ok, trace, result, stencil)| NetBody::TraceResp { ok, trace, result, stencil }),
            Just(NetBody::Commit),
            any::<u64>().prop_map(|through| NetBody::Abort { through }),
            (any::<u64>(), any::<u64>(), arb_stencil())
                .prop_map(|(committed, applied, stencil)| NetBody::Ack { committed, applied, stencil }),
            (any::<u8>(), "[a-z ]{0,30}").prop_map(|(code, message)| NetBody::Error { code, message }),
        ];
        (any::<u64>(), body).prop_map(|(seq, body)| NetMessage { seq, body })
    }

    proptest! {
        #[test]
        fn message_round_trip(m in arb_message()) {
            let b = m.encode();
            prop_assert_eq!(u32::from_le_bytes(b[..4].try_into().unwrap()) as usize, b.len() - 4);
            prop_assert_eq!(NetMessage::decode(&b).unwrap(), m);
        }

        #[test]
        fn trace_round_trip(t in arb_trace()) {
            let b = encode_trace(&t);
            prop_assert_eq!(b.len(), 4 + 5 * t.len());
            prop_assert_eq!(decode_trace(&b).unwrap(), t);
        }

        #[test]
        fn fileop_round_trip(f in arb_fileop()) {
            prop_assert_eq!(decode_fileop(&encode_fileop(&f)).unwrap(), f);
        }

        #[test]
        fn decode_never_panics(b in proptest::collection::vec(any::<u8>(), 0..80)) {
            let _ = NetMessage::decode(&b);
        }
    }
}
