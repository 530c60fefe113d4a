pub mod blockstore;
pub mod device;
pub mod harness;
pub mod minifs;
pub mod op;
pub mod replica;
pub mod stencil;
pub mod untrusted;
pub mod wire;
