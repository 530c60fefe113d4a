//! Test and benchmark harness: builds a device wired to a replica, drives
//! workloads against a reference model, injects attacks and crashes, and
//! scans every boundary for leaked payload bytes.

pub mod attack;
pub mod bench;
pub mod crashes;
pub mod oracle;
pub mod taint;
pub mod workload;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use crate::device::{Device, DeviceConfig, DeviceError, NameKey, Taps};
use crate::minifs::mkfs;
use crate::replica::{InProcessTransport, ReplicaService};
use crate::untrusted::{NoTamper, TwinTamper};
use crate::wire::net::{TcpTransport, Transport};

pub use attack::{AttackHandle, AttackKind};
pub use taint::TaintScanner;

#[derive(Clone, Debug)]
pub struct RigConfig {
    pub device: DeviceConfig,
    pub blocks: u32,
    pub inodes: u32,
    pub attack: Option<AttackKind>,
    /// External replica. `None` runs one in-process.
    pub replica_addr: Option<SocketAddr>,
    pub key: [u8; 32],
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            device: DeviceConfig::default(),
            blocks: 4096,
            inodes: 128,
            attack: None,
            replica_addr: None,
            key: [0x42; 32],
        }
    }
}

/// A provisioned device and the replica it talks to.
pub struct Rig {
    pub device: Device,
    /// Present when the replica runs in-process.
    pub replica: Option<Arc<Mutex<ReplicaService>>>,
    pub scanner: Arc<TaintScanner>,
    pub attack: Option<AttackHandle>,
    addr: Option<SocketAddr>,
}

fn setup(e: impl std::fmt::Display) -> DeviceError {
    DeviceError::Setup(e.to_string())
}

impl Rig {
    pub fn new(cfg: RigConfig) -> Result<Rig, DeviceError> {
        let (store, meta) = mkfs(cfg.blocks, cfg.inodes).map_err(setup)?;
        let replica = match cfg.replica_addr {
            None => Some(Arc::new(Mutex::new(ReplicaService::new()))),
            Some(_) => None,
        };
        let scanner = TaintScanner::new();
        let attack = cfg.attack.map(AttackHandle::new);
        let transport = connect(&replica, cfg.replica_addr)?;
        let device = Device::provision(
            cfg.device.clone(),
            NameKey::new(cfg.key),
            store,
            &meta,
            transport,
            tamper(&attack),
            taps(&scanner),
        )?;
        Ok(Rig { device, replica, scanner, attack, addr: cfg.replica_addr })
    }

    pub fn device_id(&self) -> u64 {
        self.device.config().device_id
    }

    /// The replica's committed metadata digest, when it is in-process.
    pub fn replica_digest(&self) -> Option<[u8; 32]> {
        let svc = self.replica.as_ref()?;
        let g = svc.lock().unwrap();
        g.session(self.device_id()).map(|s| s.durable_digest())
    }

    /// Scans the replica's durable, working and staged state for payload.
    pub fn scan_replica(&self) -> u64 {
        let Some(svc) = &self.replica else { return 0 };
        let g = svc.lock().unwrap();
        g.sessions().map(|s| self.scanner.scan(&s.state_bytes())).sum()
    }

    /// Power-cycles the device and restarts the replica process, then runs
    /// recovery. An honest twin replaces any attacker.
    pub fn restart(self) -> Result<Rig, DeviceError> {
        let Rig { device, replica, scanner, addr, .. } = self;
        let durable = device.into_durable();
        if let Some(svc) = &replica {
            svc.lock().unwrap().restart();
        }
        let transport = connect(&replica, addr)?;
        let device = Device::restore(durable, transport, Box::new(NoTamper), taps(&scanner))?;
        Ok(Rig { device, replica, scanner, attack: None, addr })
    }

    /// Non-Match verdicts and rejects seen so far.
    pub fn detections(&self) -> u64 {
        let c = self.device.counters();
        c.mismatches + c.local_rejects + c.cloud_rejects
    }
}

fn connect(replica: &Option<Arc<Mutex<ReplicaService>>>, addr: Option<SocketAddr>) -> Result<Box<dyn Transport>, DeviceError> {
    Ok(match (replica, addr) {
        (Some(svc), _) => Box::new(InProcessTransport::new(svc.clone())),
        (None, Some(a)) => Box::new(TcpTransport::connect(a).map_err(setup)?),
        (None, None) => unreachable!("rig without replica"),
    })
}

fn taps(scanner: &Arc<TaintScanner>) -> Taps {
    Taps { channel: Some(scanner.frame_tap()), net: Some(scanner.net_tap()) }
}

fn tamper(attack: &Option<AttackHandle>) -> Box<dyn TwinTamper> {
    match attack {
        Some(h) => Box::new(h.twin()),
        None => Box::new(NoTamper),
    }
}
