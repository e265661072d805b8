//! HTTP service over a trained retrieval model: browse the dataset, query
//! with activation map evidence, keep similarity-group annotations and
//! relevance feedback, and export training triplets from the annotations.

pub mod annotations;
pub mod bmp;
pub mod cache;
pub mod error;
pub mod feedback;
pub mod routes;
pub mod state;

use std::net::SocketAddr;
use std::sync::Arc;

pub use error::ApiError;
pub use routes::router;
pub use state::{AppState, Limits, ServiceConfig};

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
