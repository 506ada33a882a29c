//! JSON-over-HTTP service for the chat pipeline, memory inspection,
//! retrieval and human-evaluation logging. All routes live under `/v1`.
//!
//! Turns on one episode are serialized by that episode's lock; work that may
//! block on a remote backend runs on the blocking pool.

mod config;
mod error;
mod routes;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::Router;
use longmem::backends::Backends;
use longmem::context::StrategyConfig;
use longmem::eval::HumanEvalLog;
use longmem::pipeline::ConversationStore;
use tower_http::cors::CorsLayer;

pub use config::ServerConfig;
pub use error::ApiError;
pub use routes::{CreateEpisode, OpenSession, RetrieveRequest, RetrieveSource};

pub struct AppState {
    pub store: ConversationStore,
    pub backends: Backends,
    pub default_config: StrategyConfig,
    pub eval_log: HumanEvalLog,
    /// Episodes are written here as canonical JSONL after every change.
    pub episode_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(backends: Backends, default_config: StrategyConfig, eval_log: HumanEvalLog) -> Self {
        AppState { store: ConversationStore::new(), backends, default_config, eval_log, episode_dir: None }
    }

    pub fn from_config(config: &ServerConfig) -> longmem::Result<Self> {
        config.default_strategy.validate()?;
        let backends = config.backends.build()?;
        std::fs::create_dir_all(&config.data_dir)?;
        let episode_dir = config.data_dir.join("episodes");
        std::fs::create_dir_all(&episode_dir)?;
        let mut state = AppState::new(
            backends,
            config.default_strategy.clone(),
            HumanEvalLog::new(config.data_dir.join("human_eval.jsonl")),
        );
        state.episode_dir = Some(episode_dir);
        Ok(state)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new().nest("/v1", routes::v1()).layer(CorsLayer::permissive()).with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await
}
