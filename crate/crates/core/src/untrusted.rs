//! The local twin: a minifs engine outside the trust boundary. It sees the
//! disk only through stencil-gated metadata requests on the frame channel.

use std::thread::{self, JoinHandle};

use crate::blockstore::{Block, BlockId};
use crate::minifs::{AccessReject, Engine, MetadataAccessor};
use crate::op::{encode_result, FileOp, OpError, Trace};
use crate::wire::channel::{ChannelMsg, Endpoint};
use crate::wire::WireError;

/// Hook for misbehaving twins. Honest twins use [`NoTamper`].
pub trait TwinTamper: Send {
    /// Runs before the engine sees `op`. May issue extra metadata requests.
    fn before_op(&mut self, _seq: u64, _op: &FileOp, _acc: &mut dyn MetadataAccessor) {}

    /// May rewrite the completion before it is sent.
    fn on_done(&mut self, _seq: &mut u64, _op: &FileOp, _result: &mut u32, _trace: &mut Trace) {}
}

pub struct NoTamper;

impl TwinTamper for NoTamper {}

struct ChannelAccessor<'a> {
    ep: &'a mut Endpoint,
    seq: u64,
    failed: Option<WireError>,
}

impl ChannelAccessor<'_> {
    fn ask(&mut self, msg: ChannelMsg, id: BlockId) -> Result<ChannelMsg, AccessReject> {
        if self.failed.is_some() {
            return Err(AccessReject(id));
        }
        let r = self.ep.send(self.seq, &msg).and_then(|_| self.ep.recv());
        match r {
            Ok((_, m)) => Ok(m),
            Err(e) => {
                self.failed = Some(e);
                Err(AccessReject(id))
            }
        }
    }
}

impl MetadataAccessor for ChannelAccessor<'_> {
    fn read_meta(&mut self, id: BlockId) -> Result<Block, AccessReject> {
        match self.ask(ChannelMsg::MetaReadReq(id), id)? {
            ChannelMsg::MetaReadResp(b) => Ok(b),
            _ => Err(AccessReject(id)),
        }
    }

    fn write_meta(&mut self, id: BlockId, block: &Block) -> Result<(), AccessReject> {
        match self.ask(ChannelMsg::MetaWriteReq(id, block.clone()), id)? {
            ChannelMsg::MetaWriteResp => Ok(()),
            _ => Err(AccessReject(id)),
        }
    }
}

/// Serves ops from `ep` until the channel closes.
pub fn serve(mut ep: Endpoint, mut tamper: Box<dyn TwinTamper>) {
    let mut engine = Engine::new();
    loop {
        let (seq, op) = match ep.recv() {
            Ok((seq, ChannelMsg::Op(op))) => (seq, op),
            Ok(_) => continue,
            Err(WireError::ChannelClosed) => return,
            Err(_) => {
                ep.reset();
                continue;
            }
        };
        let mut acc = ChannelAccessor { ep: &mut ep, seq, failed: None };
        tamper.before_op(seq, &op, &mut acc);
        let out = engine.exec_fileop(&op, &mut acc);
        if matches!(acc.failed, Some(WireError::ChannelClosed)) {
            return;
        }
        let (mut result, mut trace) = match out {
            Ok(o) => (encode_result(o.result), o.trace),
            Err(_) => (encode_result(Err(OpError::Rejected)), Vec::new()),
        };
        let mut out_seq = seq;
        tamper.on_done(&mut out_seq, &op, &mut result, &mut trace);
        if ep.send(out_seq, &ChannelMsg::Done { result, trace }).is_err() {
            return;
        }
    }
}

pub fn spawn(ep: Endpoint, tamper: Box<dyn TwinTamper>) -> JoinHandle<()> {
    thread::Builder::new()
        .name("local-twin".into())
        .spawn(move || serve(ep, tamper))
        .expect("spawn twin thread")
}
