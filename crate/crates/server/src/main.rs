use std::sync::Arc;

use capy_server::{config_from_env, router, Service, DEFAULT_LISTEN_ADDR};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();

    let config = match config_from_env() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("capy-server: {e}");
            std::process::exit(2);
        }
    };
    let state_dir = config.state_dir.clone();
    let service = match Service::new(config) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("capy-server: state directory {}: {e}", state_dir.display());
            std::process::exit(2);
        }
    };
    let addr = std::env::var("CAPY_LISTEN_ADDR").unwrap_or_else(|_| DEFAULT_LISTEN_ADDR.to_string());
    let listener = match tokio::net::TcpListener::bind(&addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("capy-server: cannot listen on {addr}: {e}");
            std::process::exit(2);
        }
    };
    tracing::info!("listening on {} with state in {}", listener.local_addr().unwrap(), state_dir.display());
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    };
    if let Err(e) = axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await {
        eprintln!("capy-server: {e}");
        std::process::exit(1);
    }
}
