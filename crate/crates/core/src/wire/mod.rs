//! Byte layouts for the two boundaries: the fixed-size frame channel to the
//! local twin and the length-prefixed network protocol to the replica.
//! Integers are little-endian everywhere.

pub mod channel;
pub mod net;

use thiserror::Error;

use crate::op::{FileOp, NameToken, OpKind, OpenFlags, TOKEN_LEN};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("decode error: {0}")]
    Decode(&'static str),
    #[error("length mismatch: expected {expected} bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("channel closed")]
    ChannelClosed,
    #[error("channel receive timed out")]
    Timeout,
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for WireError {
    fn from(e: std::io::Error) -> Self {
        WireError::Io(e.to_string())
    }
}

pub const FILEOP_LEN: usize = 1 + 4 + 4 + 8 + TOKEN_LEN;

/// `op(1) fd(4) flags(4) count(8) name(16)`.
pub fn encode_fileop(f: &FileOp) -> [u8; FILEOP_LEN] {
    let mut b = [0u8; FILEOP_LEN];
    b[0] = f.kind as u8;
    b[1..5].copy_from_slice(&f.fd.to_le_bytes());
    b[5..9].copy_from_slice(&f.flags.0.to_le_bytes());
    b[9..17].copy_from_slice(&f.count.to_le_bytes());
    b[17..].copy_from_slice(&f.name.0);
    b
}

pub fn decode_fileop(b: &[u8]) -> Result<FileOp, WireError> {
    if b.len() != FILEOP_LEN {
        return Err(WireError::LengthMismatch { expected: FILEOP_LEN, got: b.len() });
    }
    let kind = OpKind::from_byte(b[0]).ok_or(WireError::Decode("unknown op byte"))?;
    Ok(FileOp {
        kind,
        fd: u32::from_le_bytes(b[1..5].try_into().unwrap()),
        flags: OpenFlags(u32::from_le_bytes(b[5..9].try_into().unwrap())),
        count: u64::from_le_bytes(b[9..17].try_into().unwrap()),
        name: NameToken(b[17..].try_into().unwrap()),
    })
}

/// Cursor over a byte slice that reports truncation as `LengthMismatch`.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, at: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(WireError::LengthMismatch { expected: self.at + n, got: self.buf.len() })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.at..];
        self.at = self.buf.len();
        s
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.at == self.buf.len()
    }

    pub(crate) fn finish(&self) -> Result<(), WireError> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(WireError::LengthMismatch { expected: self.at, got: self.buf.len() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_fileop_bytes() {
        let b = encode_fileop(&FileOp::write(3, 4096));
        assert_eq!(b[0], OpKind::Write as u8);
        assert_eq!(&b[1..5], &[3, 0, 0, 0]);
        assert_eq!(&b[9..17], &4096u64.to_le_bytes());
        assert_eq!(decode_fileop(&b).unwrap(), FileOp::write(3, 4096));
    }

    #[test]
    fn fileop_errors() {
        let mut b = encode_fileop(&FileOp::fsync(1));
        assert!(matches!(decode_fileop(&b[..10]), Err(WireError::LengthMismatch { .. })));
        b[0] = 0;
        assert_eq!(decode_fileop(&b), Err(WireError::Decode("unknown op byte")));
    }
}
