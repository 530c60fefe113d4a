//! Standalone metadata replica.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

mod serve;

#[derive(Parser)]
#[command(name = "twinfs-replica", about = "Metadata replica service")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:7447")]
    listen: String,
    /// Directory for durable session state. Sessions live in memory without it.
    #[arg(long)]
    state: Option<PathBuf>,
}

fn main() -> ExitCode {
    let a = Args::parse();
    match serve::run(&a.listen, a.state) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("twinfs-replica: {e}");
            ExitCode::FAILURE
        }
    }
}
