use std::net::SocketAddr;
use std::time::Duration;

use clap::Parser;
use seqdiag_service::{router, spawn_sweeper, AppState, Config};

/// Serves diagnosis sessions over HTTP.
#[derive(Parser)]
#[command(name = "seqdiag-service", version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Idle seconds before a session expires.
    #[arg(long, default_value_t = 1800)]
    idle_seconds: u64,
    /// Milliseconds a request waits for the engine before reporting `compiling`.
    #[arg(long, default_value_t = 5000)]
    wait_ms: u64,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let state = AppState::new(Config {
        idle: Duration::from_secs(args.idle_seconds),
        wait: Duration::from_millis(args.wait_ms),
    });
    spawn_sweeper(state.clone());
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
