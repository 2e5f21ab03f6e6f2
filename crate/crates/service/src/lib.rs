//! HTTP service for next-batch evaluation runs: datasets, configs, the run
//! protocol, reports, and background jobs for the built-in models.

pub mod api;
pub mod error;
pub mod model;
pub mod state;
pub mod store;

use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;
use tokio::net::TcpListener;

pub use api::router;
pub use error::ApiError;
pub use state::AppState;
pub use store::{FileStore, Store};

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
    pub token: Option<String>,
    pub job_concurrency: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            data_dir: PathBuf::from("nbeval-data"),
            token: None,
            job_concurrency: state::DEFAULT_JOB_CONCURRENCY,
        }
    }
}

impl ServiceConfig {
    /// Reads `NBEVAL_BIND`, `NBEVAL_DATA_DIR`, `NBEVAL_TOKEN` and `NBEVAL_JOB_CONCURRENCY`.
    pub fn from_env() -> Result<Self, ServeError> {
        let mut config = ServiceConfig::default();
        if let Ok(bind) = std::env::var("NBEVAL_BIND") {
            config.bind = bind
                .parse()
                .map_err(|_| ServeError::Config(format!("NBEVAL_BIND={bind:?} is not a socket address")))?;
        }
        if let Ok(dir) = std::env::var("NBEVAL_DATA_DIR") {
            config.data_dir = dir.into();
        }
        config.token = std::env::var("NBEVAL_TOKEN").ok().filter(|t| !t.is_empty());
        if let Ok(n) = std::env::var("NBEVAL_JOB_CONCURRENCY") {
            config.job_concurrency =
                n.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
                    ServeError::Config(format!("NBEVAL_JOB_CONCURRENCY={n:?} is not a positive integer"))
                })?;
        }
        Ok(config)
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error("cannot open data directory: {0}")]
    Storage(io::Error),
    #[error("server error: {0}")]
    Io(io::Error),
}

/// Opens the data directory, recovers runs and unfinished jobs, and returns the state.
/// Must be called inside a tokio runtime.
pub fn open_state(config: &ServiceConfig) -> Result<Arc<AppState>, ServeError> {
    let store = FileStore::open(&config.data_dir).map_err(ServeError::Storage)?;
    let state =
        AppState::open(Arc::new(store), config.job_concurrency, config.token.clone()).map_err(ServeError::Storage)?;
    state.resume_jobs();
    Ok(state)
}

/// Serves the API on an already bound listener until the process is interrupted.
pub async fn serve_on(listener: TcpListener, state: Arc<AppState>) -> Result<(), ServeError> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(ServeError::Io)
}

pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let state = open_state(&config)?;
    let listener = TcpListener::bind(config.bind)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.bind,
            source,
        })?;
    tracing::info!("listening on {}", listener.local_addr().map_err(ServeError::Io)?);
    serve_on(listener, state).await
}
