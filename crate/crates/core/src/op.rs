//! File operations delegated to the filesystem twins, and the block
//! request traces they produce.

use std::fmt;

use crate::blockstore::BlockId;

/// Length of an obfuscated path component.
pub const TOKEN_LEN: usize = 16;

/// Parent fd value meaning "resolve against the root directory".
pub const ROOT_PARENT: u64 = u64::MAX;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NameToken(pub [u8; TOKEN_LEN]);

impl fmt::Debug for NameToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpKind {
    Open = 1,
    Read = 2,
    Write = 3,
    Fsync = 4,
    Close = 5,
    Lseek = 6,
    Fstat = 7,
}

impl OpKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => OpKind::Open,
            2 => OpKind::Read,
            3 => OpKind::Write,
            4 => OpKind::Fsync,
            5 => OpKind::Close,
            6 => OpKind::Lseek,
            7 => OpKind::Fstat,
            _ => return None,
        })
    }
}

/// Open flags. Lseek reuses the flag word for `whence`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct OpenFlags(pub u32);

impl OpenFlags {
    pub const CREATE: OpenFlags = OpenFlags(1);
    pub const TRUNC: OpenFlags = OpenFlags(2);
    pub const DIRECTORY: OpenFlags = OpenFlags(4);
    /// Reads return local-twin results before cloud validation arrives.
    pub const UNTRUSTED: OpenFlags = OpenFlags(8);

    pub const fn empty() -> Self {
        OpenFlags(0)
    }

    pub const fn contains(self, other: OpenFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub const fn union(self, other: OpenFlags) -> Self {
        OpenFlags(self.0 | other.0)
    }

    pub fn without(self, other: OpenFlags) -> Self {
        OpenFlags(self.0 & !other.0)
    }
}

impl std::ops::BitOr for OpenFlags {
    type Output = OpenFlags;
    fn bitor(self, rhs: OpenFlags) -> OpenFlags {
        self.union(rhs)
    }
}

impl fmt::Debug for OpenFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OpenFlags({:#x})", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Whence {
    Set = 0,
    Cur = 1,
    End = 2,
}

impl Whence {
    pub fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(Whence::Set),
            1 => Some(Whence::Cur),
            2 => Some(Whence::End),
            _ => None,
        }
    }
}

/// One delegated file-API invocation: `<op, fd, flags, count, name>`.
///
/// Field use by op:
/// - `Open`: `fd` is the descriptor the caller assigns, `count` is the
///   parent directory fd (or [`ROOT_PARENT`]), `name` the component token.
/// - `Read`/`Write`: `count` bytes at the twin's current position.
/// - `Lseek`: `flags` holds the whence, `count` the offset as `i64` bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FileOp {
    pub kind: OpKind,
    pub fd: u32,
    pub flags: OpenFlags,
    pub count: u64,
    pub name: NameToken,
}

impl FileOp {
    fn bare(kind: OpKind, fd: u32) -> Self {
        FileOp { kind, fd, flags: OpenFlags::empty(), count: 0, name: NameToken::default() }
    }

    pub fn open(fd: u32, parent: u64, name: NameToken, flags: OpenFlags) -> Self {
        FileOp { kind: OpKind::Open, fd, flags, count: parent, name }
    }

    pub fn read(fd: u32, count: u64) -> Self {
        FileOp { count, ..Self::bare(OpKind::Read, fd) }
    }

    pub fn write(fd: u32, count: u64) -> Self {
        FileOp { count, ..Self::bare(OpKind::Write, fd) }
    }

    pub fn fsync(fd: u32) -> Self {
        Self::bare(OpKind::Fsync, fd)
    }

    pub fn close(fd: u32) -> Self {
        Self::bare(OpKind::Close, fd)
    }

    pub fn fstat(fd: u32) -> Self {
        Self::bare(OpKind::Fstat, fd)
    }

    pub fn lseek(fd: u32, offset: i64, whence: Whence) -> Self {
        FileOp {
            flags: OpenFlags(whence as u32),
            count: offset as u64,
            ..Self::bare(OpKind::Lseek, fd)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Read,
    Write,
}

/// One advised disk access.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockRequest {
    pub kind: RequestKind,
    pub block: BlockId,
}

impl BlockRequest {
    pub fn read(block: u32) -> Self {
        BlockRequest { kind: RequestKind::Read, block: BlockId(block) }
    }

    pub fn write(block: u32) -> Self {
        BlockRequest { kind: RequestKind::Write, block: BlockId(block) }
    }
}

impl fmt::Debug for BlockRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            RequestKind::Read => 'R',
            RequestKind::Write => 'W',
        };
        write!(f, "{k}{}", self.block.0)
    }
}

pub type Trace = Vec<BlockRequest>;

/// Filesystem-level failure of an op. Both twins report these as part of
/// their result so they take part in comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, thiserror::Error)]
pub enum OpError {
    #[error("no such file")]
    NoSuchFile,
    #[error("no space left")]
    NoSpace,
    #[error("bad file descriptor")]
    BadFd,
    #[error("not a directory")]
    NotDir,
    #[error("is a directory")]
    IsDir,
    #[error("file too large")]
    TooLarge,
    #[error("invalid argument")]
    Invalid,
    #[error("metadata access rejected")]
    Rejected,
}

impl OpError {
    pub fn code(self) -> u8 {
        match self {
            OpError::NoSuchFile => 1,
            OpError::NoSpace => 2,
            OpError::BadFd => 3,
            OpError::NotDir => 4,
            OpError::IsDir => 5,
            OpError::TooLarge => 6,
            OpError::Invalid => 7,
            OpError::Rejected => 8,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => OpError::NoSuchFile,
            2 => OpError::NoSpace,
            3 => OpError::BadFd,
            4 => OpError::NotDir,
            5 => OpError::IsDir,
            6 => OpError::TooLarge,
            7 => OpError::Invalid,
            8 => OpError::Rejected,
            _ => return None,
        })
    }
}

/// Value an op returns: inode number for Open, byte count for Read/Write,
/// position for Lseek, size for Fstat, zero otherwise.
pub type OpResult = Result<u32, OpError>;

const ERROR_BASE: u32 = 0xFFFF_FF00;

/// Largest success value representable next to the error codes.
pub const MAX_RESULT_VALUE: u32 = ERROR_BASE - 1;

pub fn encode_result(r: OpResult) -> u32 {
    match r {
        Ok(v) => v.min(MAX_RESULT_VALUE),
        Err(e) => ERROR_BASE | e.code() as u32,
    }
}

pub fn decode_result(v: u32) -> Option<OpResult> {
    if v >= ERROR_BASE {
        OpError::from_code((v & 0xFF) as u8).map(Err)
    } else {
        Some(Ok(v))
    }
}

/// What a twin hands back for one op.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpOutcome {
    pub trace: Trace,
    pub result: OpResult,
}

impl OpOutcome {
    pub fn ok(value: u32) -> Self {
        OpOutcome { trace: Vec::new(), result: Ok(value) }
    }

    pub fn err(e: OpError) -> Self {
        OpOutcome { trace: Vec::new(), result: Err(e) }
    }
}
