//! The device's network shim. Requests go out in order on a worker thread;
//! each response is released to the device one simulated round trip after
//! its request was sent, so independent requests overlap.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::wire::net::{NetMessage, Transport};
use crate::wire::WireError;

/// Observer of every encoded network message in either direction.
pub type NetTap = Arc<dyn Fn(&[u8]) + Send + Sync>;

#[derive(Debug, Default)]
pub struct LinkStats {
    pub fileops: AtomicU64,
    pub messages: AtomicU64,
}

struct Job {
    msg: NetMessage,
    sent_at: Instant,
}

struct Delivery {
    resp: Result<NetMessage, WireError>,
    deliver_at: Instant,
}

pub struct Link {
    jobs: Option<Sender<Job>>,
    done: Receiver<Delivery>,
    worker: Option<JoinHandle<()>>,
    ready: Option<Delivery>,
    in_flight: usize,
    severed: bool,
    stats: Arc<LinkStats>,
}

impl Link {
    pub fn new(mut transport: Box<dyn Transport>, delay: Duration, tap: Option<NetTap>, stats: Arc<LinkStats>) -> Self {
        let (jobs, rx) = mpsc::channel::<Job>();
        let (tx, done) = mpsc::channel();
        let worker = thread::Builder::new()
            .name("device-link".into())
            .spawn(move || {
                for job in rx {
                    let half = job.sent_at + delay / 2;
                    let now = Instant::now();
                    if half > now {
                        thread::sleep(half - now);
                    }
                    if let Some(t) = &tap {
                        t(&job.msg.encode());
                    }
                    let resp = transport.exchange(&job.msg);
                    if let (Some(t), Ok(m)) = (&tap, &resp) {
                        t(&m.encode());
                    }
                    let deliver_at = (job.sent_at + delay).max(Instant::now());
                    if tx.send(Delivery { resp, deliver_at }).is_err() {
                        return;
                    }
                }
            })
            .expect("spawn link thread");
        Link { jobs: Some(jobs), done, worker: Some(worker), ready: None, in_flight: 0, severed: false, stats }
    }

    pub fn is_online(&self) -> bool {
        !self.severed
    }

    /// Refuses new requests. Requests already on the wire still complete.
    pub fn sever(&mut self) {
        self.severed = true;
    }

    pub fn restore(&mut self) {
        self.severed = false;
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    #[cfg(test)]
    pub fn stats(&self) -> &Arc<LinkStats> {
        &self.stats
    }

    pub fn send(&mut self, msg: NetMessage) -> Result<(), WireError> {
        if self.severed {
            return Err(WireError::ChannelClosed);
        }
        if matches!(msg.body, crate::wire::net::NetBody::FileOp(_)) {
            self.stats.fileops.fetch_add(1, Ordering::Relaxed);
        }
        self.stats.messages.fetch_add(1, Ordering::Relaxed);
        let jobs = self.jobs.as_ref().ok_or(WireError::ChannelClosed)?;
        jobs.send(Job { msg, sent_at: Instant::now() }).map_err(|_| WireError::ChannelClosed)?;
        self.in_flight += 1;
        Ok(())
    }

    /// Next response, waiting out its simulated delay.
    pub fn recv(&mut self) -> Result<NetMessage, WireError> {
        if self.in_flight == 0 {
            return Err(WireError::Decode("no request outstanding"));
        }
        let d = match self.ready.take() {
            Some(d) => d,
            None => self.done.recv().map_err(|_| WireError::ChannelClosed)?,
        };
        let now = Instant::now();
        if d.deliver_at > now {
            thread::sleep(d.deliver_at - now);
        }
        self.in_flight -= 1;
        d.resp
    }

    /// Next response if it is already due.
    pub fn try_recv(&mut self) -> Option<Result<NetMessage, WireError>> {
        if self.in_flight == 0 {
            return None;
        }
        let d = match self.ready.take() {
            Some(d) => d,
            None => match self.done.try_recv() {
                Ok(d) => d,
                Err(TryRecvError::Empty) => return None,
                Err(TryRecvError::Disconnected) => {
                    self.in_flight = 0;
                    return Some(Err(WireError::ChannelClosed));
                }
            },
        };
        if d.deliver_at > Instant::now() {
            self.ready = Some(d);
            return None;
        }
        self.in_flight -= 1;
        Some(d.resp)
    }

    /// Lets queued requests reach the peer, then stops the worker.
    pub fn shutdown(&mut self) {
        self.jobs = None;
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for Link {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::net::NetBody;

    struct Echo;

    impl Transport for Echo {
        fn exchange(&mut self, m: &NetMessage) -> Result<NetMessage, WireError> {
            Ok(m.clone())
        }
    }

    fn commit(seq: u64) -> NetMessage {
        NetMessage::new(seq, NetBody::Commit)
    }

    #[test]
    fn pipelined_requests_share_one_delay() {
        let mut l = Link::new(Box::new(Echo), Duration::from_millis(40), None, Arc::default());
        let t0 = Instant::now();
        for s in 1..=5 {
            l.send(commit(s)).unwrap();
        }
        assert!(t0.elapsed() < Duration::from_millis(5));
        for s in 1..=5 {
            assert_eq!(l.recv().unwrap().seq, s);
        }
        let took = t0.elapsed();
        assert!(took >= Duration::from_millis(40), "{took:?}");
        assert!(took < Duration::from_millis(150), "{took:?}");
        assert_eq!(l.stats().messages.load(Ordering::Relaxed), 5);
    }

    #[test]
    fn try_recv_respects_delay() {
        let mut l = Link::new(Box::new(Echo), Duration::from_millis(30), None, Arc::default());
        l.send(commit(1)).unwrap();
        assert!(l.try_recv().is_none());
        thread::sleep(Duration::from_millis(45));
        assert_eq!(l.try_recv().unwrap().unwrap().seq, 1);
        assert!(l.try_recv().is_none());
    }

    #[test]
    fn severed_refuses_new_sends() {
        let mut l = Link::new(Box::new(Echo), Duration::ZERO, None, Arc::default());
        l.send(commit(1)).unwrap();
        l.sever();
        assert!(l.send(commit(2)).is_err());
        assert_eq!(l.recv().unwrap().seq, 1);
        l.restore();
        l.send(commit(3)).unwrap();
        assert_eq!(l.recv().unwrap().seq, 3);
    }
}
