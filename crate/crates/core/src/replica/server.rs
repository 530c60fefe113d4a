use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use super::ReplicaService;
use crate::wire::net::{read_message, write_message};
use crate::wire::WireError;

pub const DEFAULT_PORT: u16 = 7447;

/// Serves one device connection until it closes.
pub fn serve_connection(svc: &Mutex<ReplicaService>, stream: TcpStream) -> Result<(), WireError> {
    stream.set_nodelay(true)?;
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    let mut bound = None;
    loop {
        let msg = match read_message(&mut r) {
            Ok(m) => m,
            Err(WireError::ChannelClosed) => return Ok(()),
            Err(e) => return Err(e),
        };
        let resp = svc.lock().map_err(|_| WireError::ChannelClosed)?.handle(&mut bound, &msg);
        write_message(&mut w, &resp)?;
    }
}

/// Accepts connections on `listener`, one thread each. Returns the bound
/// address and the accept thread.
pub fn spawn_server(svc: Arc<Mutex<ReplicaService>>, listener: TcpListener) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let addr = listener.local_addr()?;
    let h = thread::Builder::new().name("replica-accept".into()).spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let svc = svc.clone();
            let _ = thread::Builder::new().name("replica-conn".into()).spawn(move || {
                let _ = serve_connection(&svc, stream);
            });
        }
    })?;
    Ok((addr, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minifs::mkfs;
    use crate::wire::net::{NetBody, NetMessage, TcpTransport, Transport, PROTOCOL_VERSION};

    #[test]
    fn tcp_round_trip() {
        let svc = Arc::new(Mutex::new(ReplicaService::new()));
        let (addr, _h) = spawn_server(svc, TcpListener::bind("127.0.0.1:0").unwrap()).unwrap();
        let mut t = TcpTransport::connect(addr).unwrap();
        let (_, meta) = mkfs(64, 32).unwrap();
        let hello = NetBody::Hello { version: PROTOCOL_VERSION, device_id: 3, flags: 0, image: meta.encode() };
        let r = t.exchange(&NetMessage::new(0, hello)).unwrap();
        assert_eq!(r.body, NetBody::Ack { committed: 0, applied: 0, stencil: None });
    }
}
