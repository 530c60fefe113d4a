//! Restart after a crash and resynchronization after a disconnect.

use super::*;
use crate::replica::HELLO_RESET_FDS;
use crate::wire::net::{NetBody, NetMessage, HELLO_CLOUD_STENCIL, PROTOCOL_VERSION};

impl Device {
    /// Boots from what survived a crash: unvalidated ops are undone, then the
    /// replica is brought to the same committed state.
    pub fn restore(durable: DeviceDurable, transport: Box<dyn Transport>, tamper: Box<dyn TwinTamper>, taps: Taps) -> Result<Self, DeviceError> {
        let DeviceDurable { mut store, journal, emergency, key, config } = durable;
        let mut live = store.live_checkpoints();
        live.sort();
        for cp in live.into_iter().rev() {
            store.rollback(cp).map_err(|e| DeviceError::Setup(e.to_string()))?;
        }
        let mut d = Device::assemble(config, key, store, transport, tamper, taps)?;
        d.journal = journal;
        d.emergency = emergency;
        d.build_owners();
        d.reconnect_recover()?;
        Ok(d)
    }

    /// Sends HELLO and waits for its ack.
    pub(super) fn hello(&mut self, image: Vec<u8>, reset_fds: bool) -> Result<(u64, u64), DeviceError> {
        let mut flags = 0;
        if self.cfg.stencil_source == StencilSource::Cloud {
            flags |= HELLO_CLOUD_STENCIL;
        }
        if reset_fds {
            flags |= HELLO_RESET_FDS;
        }
        let body = NetBody::Hello { version: PROTOCOL_VERSION, device_id: self.cfg.device_id, flags, image };
        self.link.send(NetMessage::new(0, body)).map_err(|_| DeviceError::Offline)?;
        self.expect.push_back(Expect::Hello);
        self.hello_ack = None;
        while self.hello_ack.is_none() {
            self.process_one()?;
        }
        match self.hello_ack.take() {
            Some(NetBody::Ack { committed, applied, stencil }) => {
                if self.cfg.stencil_source == StencilSource::Cloud {
                    self.install_full_stencil(stencil.as_ref())?;
                }
                Ok((committed, applied))
            }
            Some(NetBody::Error { message, .. }) => Err(DeviceError::Protocol(message)),
            other => Err(DeviceError::Protocol(format!("unexpected HELLO reply {other:?}"))),
        }
    }

    /// Resends the final commit the replica may have missed, drops what it
    /// staged beyond the device's executed state, and re-opens held fds.
    pub fn reconnect_recover(&mut self) -> Result<(), DeviceError> {
        self.live()?;
        self.drain()?;
        while self.link.in_flight() > 0 {
            self.process_one()?;
        }
        let (committed, applied) = self.hello(Vec::new(), true)?;
        let executed = self.journal.last_executed;
        if executed > committed {
            self.link.send(NetMessage::new(executed, NetBody::Commit)).map_err(|_| DeviceError::Offline)?;
            self.expect.push_back(Expect::Commit(executed));
            self.journal.commit_sent = executed;
            self.await_ack(executed)?;
        } else {
            self.journal.last_acked = self.journal.last_acked.max(committed);
        }
        if applied > executed {
            self.link.send(NetMessage::new(executed + 1, NetBody::Abort { through: applied })).map_err(|_| DeviceError::Offline)?;
            self.expect.push_back(Expect::Abort);
            self.stencil_stale = true;
            while self.stencil_stale {
                self.process_one()?;
            }
        }
        self.next_seq = applied.max(executed) + 1;
        self.max_sent = self.next_seq - 1;
        let held: Vec<Fd> = self.fds.iter().filter(|(_, f)| !f.emergency).map(|(k, _)| *k).collect();
        for fd in held {
            let f = self.fds[&fd].clone();
            let flags = f.flags.without(OpenFlags::CREATE).without(OpenFlags::TRUNC);
            let o = self.sync_op(FileOp::open(fd, f.parent, f.token, flags), Intent::Open)?;
            if o.result != Ok(f.inode) {
                return Err(DeviceError::Protocol(format!("fd {fd} re-opened as {:?}", o.result)));
            }
            self.fd_mut(fd)?.twin_pos = Some(0);
        }
        Ok(())
    }
}
