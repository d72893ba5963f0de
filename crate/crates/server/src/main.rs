use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use ctqc_server::{serve_blocking, ServerConfig};

/// Serve a pipeline data directory to the inspection UI.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Pipeline output directory holding templates/, registered/ and batches/.
    #[arg(long)]
    data_dir: PathBuf,
    /// Refuse annotation writes.
    #[arg(long)]
    read_only: bool,
    /// Allowed UI origin; any origin when omitted.
    #[arg(long)]
    cors_origin: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = ServerConfig {
        data_dir: args.data_dir,
        read_only: args.read_only,
        cors_origin: args.cors_origin,
    };
    match serve_blocking(config, SocketAddr::new(args.host, args.port)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
