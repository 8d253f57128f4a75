//! HTTP session service: session lifecycle, settings, EDA runs streamed as
//! server-sent events, clarification, insight graphs and data stories.

pub mod error;
pub mod events;
pub mod routes;
pub mod session;

use std::path::PathBuf;
use std::sync::Arc;

use capy_core::prompts::PromptAssets;
use capy_core::settings::{parse_model_spec, Settings};

pub use routes::router;
pub use session::{RunState, Service, ServiceConfig, Session};

pub const DEFAULT_LISTEN_ADDR: &str = "127.0.0.1:8765";

/// Service configuration from `CAPY_STATE_DIR`, `CAPY_MODEL`
/// (`provider:model`, applied to every role) and `CAPY_PROMPTS_DIR`.
pub fn config_from_env() -> Result<ServiceConfig, String> {
    let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
    let state_dir = var("CAPY_STATE_DIR").map_or_else(|| PathBuf::from("capy-state"), PathBuf::from);
    let mut config = ServiceConfig::new(state_dir);
    if let Some(spec) = var("CAPY_MODEL") {
        config.default_settings = Settings::with_model(parse_model_spec(&spec)?);
    }
    if let Some(dir) = var("CAPY_PROMPTS_DIR") {
        config.prompts = PromptAssets::with_overrides(dir.as_ref()).map_err(|e| format!("{dir}: {e}"))?;
    }
    Ok(config)
}

/// Serves until the listener fails or the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}
