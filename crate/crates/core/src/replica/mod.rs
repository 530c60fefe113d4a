//! The metadata-only replica. Replays delegated ops against its copy of the
//! filesystem metadata, stages the resulting deltas, and makes them durable
//! only on final commit.

mod server;
mod session;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use server::{serve_connection, spawn_server, DEFAULT_PORT};
pub use session::{CommitRecord, Phase, ReplayResponse, Session};

use crate::minifs::{ImageError, LayoutError, MetadataImage};
use crate::wire::net::{error_code, NetBody, NetMessage, Transport, HELLO_CLOUD_STENCIL, PROTOCOL_VERSION};
pub use crate::wire::net::HELLO_RESET_FDS;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum ReplicaError {
    #[error("bad metadata image: {0}")]
    BadImage(#[from] ImageError),
    #[error("seq gap: expected {expected}, got {got}")]
    SeqGap { expected: u64, got: u64 },
    #[error("unknown transaction {0}")]
    UnknownTxn(u64),
    #[error("no session for device {0:#x}")]
    NoSession(u64),
    #[error("replay failed: {0}")]
    Replay(String),
    #[error("state io: {0}")]
    Io(#[from] std::io::Error),
}

impl ReplicaError {
    pub fn is_bad_magic(&self) -> bool {
        matches!(self, ReplicaError::BadImage(ImageError::Layout(LayoutError::BadMagic(_))) | ReplicaError::BadImage(ImageError::BadHeader))
    }

    fn code(&self) -> u8 {
        match self {
            ReplicaError::BadImage(_) => error_code::BAD_IMAGE,
            ReplicaError::SeqGap { .. } => error_code::SEQ_GAP,
            ReplicaError::UnknownTxn(_) => error_code::UNKNOWN_TXN,
            ReplicaError::NoSession(_) => error_code::NO_SESSION,
            ReplicaError::Replay(_) | ReplicaError::Io(_) => error_code::BAD_MESSAGE,
        }
    }
}

/// All device sessions. Each session is processed sequentially; callers
/// serialize access (the TCP server holds it behind a mutex).
#[derive(Debug, Default)]
pub struct ReplicaService {
    sessions: BTreeMap<u64, Session>,
    state_dir: Option<PathBuf>,
}

impl ReplicaService {
    pub fn new() -> Self {
        Self::default()
    }

    /// Service persisting every session under `dir`; existing sessions are
    /// loaded.
    pub fn with_state_dir(dir: impl Into<PathBuf>) -> Result<Self, ReplicaError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut sessions = BTreeMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(id) = name.to_str().and_then(|s| u64::from_str_radix(s, 16).ok()) else {
                continue;
            };
            sessions.insert(id, Session::load(id, entry.path())?);
        }
        Ok(ReplicaService { sessions, state_dir: Some(dir) })
    }

    /// Creates (or replaces) the session for `device_id` from a mkfs export.
    pub fn bootstrap(&mut self, device_id: u64, image: MetadataImage, cloud_stencil: bool) -> Result<(), ReplicaError> {
        let dir = self.state_dir.as_ref().map(|d| d.join(format!("{device_id:016x}")));
        let s = Session::bootstrap(device_id, image, cloud_stencil, dir)?;
        self.sessions.insert(device_id, s);
        Ok(())
    }

    pub fn session(&self, device_id: u64) -> Option<&Session> {
        self.sessions.get(&device_id)
    }

    pub fn session_mut(&mut self, device_id: u64) -> Option<&mut Session> {
        self.sessions.get_mut(&device_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    /// Drops everything a process restart would lose: descriptor tables and
    /// in-memory caches. Durable and staged state survive.
    pub fn restart(&mut self) {
        for s in self.sessions.values_mut() {
            s.restart();
        }
    }

    /// Handles one request. `bound` is the device the connection said HELLO
    /// as.
    pub fn handle(&mut self, bound: &mut Option<u64>, msg: &NetMessage) -> NetMessage {
        match self.try_handle(bound, msg) {
            Ok(resp) => resp,
            Err(e) => NetMessage::new(msg.seq, NetBody::Error { code: e.code(), message: e.to_string() }),
        }
    }

    fn try_handle(&mut self, bound: &mut Option<u64>, msg: &NetMessage) -> Result<NetMessage, ReplicaError> {
        if let NetBody::Hello { version, device_id, flags, image } = &msg.body {
            if *version != PROTOCOL_VERSION {
                return Err(ReplicaError::Replay(format!("unsupported protocol version {version}")));
            }
            if !image.is_empty() {
                let img = MetadataImage::decode(image)?;
                self.bootstrap(*device_id, img, flags & HELLO_CLOUD_STENCIL != 0)?;
            }
            let s = self.sessions.get_mut(device_id).ok_or(ReplicaError::NoSession(*device_id))?;
            if flags & HELLO_RESET_FDS != 0 {
                s.reset_fds();
            }
            *bound = Some(*device_id);
            return Ok(NetMessage::new(msg.seq, s.ack(true)));
        }
        let id = bound.ok_or(ReplicaError::NoSession(0))?;
        let s = self.sessions.get_mut(&id).ok_or(ReplicaError::NoSession(id))?;
        let body = match &msg.body {
            NetBody::FileOp(op) => {
                let r = s.replay_fileop(msg.seq, op)?;
                NetBody::TraceResp { ok: r.ok, trace: r.trace, result: r.result, stencil: r.stencil }
            }
            NetBody::Commit => {
                s.commit(msg.seq)?;
                s.ack(false)
            }
            NetBody::Abort { through } => {
                s.abort(msg.seq, *through)?;
                let cloud = s.cloud_stencil();
                s.ack(cloud)
            }
            _ => return Err(ReplicaError::Replay("unexpected message kind".into())),
        };
        Ok(NetMessage::new(msg.seq, body))
    }
}

/// Transport to a replica in the same process.
pub struct InProcessTransport {
    svc: Arc<Mutex<ReplicaService>>,
    bound: Option<u64>,
}

impl InProcessTransport {
    pub fn new(svc: Arc<Mutex<ReplicaService>>) -> Self {
        InProcessTransport { svc, bound: None }
    }
}

impl Transport for InProcessTransport {
    fn exchange(&mut self, m: &NetMessage) -> Result<NetMessage, WireError> {
        // Round-trip through the codec so both sides see exactly what a
        // socket would carry.
        let req = NetMessage::decode(&m.encode())?;
        let resp = self.svc.lock().map_err(|_| WireError::ChannelClosed)?.handle(&mut self.bound, &req);
        NetMessage::decode(&resp.encode())
    }
}
