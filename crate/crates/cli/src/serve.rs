use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use twinfs::replica::{spawn_server, ReplicaService};

/// Runs the replica service until its accept loop exits.
pub fn run(listen: &str, state: Option<PathBuf>) -> Result<(), String> {
    let svc = match state {
        Some(dir) => ReplicaService::with_state_dir(&dir).map_err(|e| format!("{}: {e}", dir.display()))?,
        None => ReplicaService::new(),
    };
    let listener = TcpListener::bind(listen).map_err(|e| format!("bind {listen}: {e}"))?;
    let (addr, h) = spawn_server(Arc::new(Mutex::new(svc)), listener).map_err(|e| e.to_string())?;
    println!("listening on {addr}");
    h.join().map_err(|_| "accept loop panicked".to_string())
}
