//! JSON-over-HTTP front end for the serving engine.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hiertcn::data::synthetic::ITEMS_FILE;
use hiertcn::data::{EmbeddingTable, ItemMatrix};
use hiertcn::model::Checkpoint;
use hiertcn::serving::{InteractionAck, RecommendationResponse, Recommender, ServingModel};
use hiertcn::Error;
use log::info;
use serde::{Deserialize, Serialize};

use crate::args::ServeArgs;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InteractionRequest {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecommendationRequest {
    pub user_id: u64,
    pub candidate_ids: Vec<u64>,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CloseIdleRequest {
    /// Defaults to the server clock.
    pub now: Option<i64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CloseIdleResponse {
    pub closed: usize,
    pub now: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: String,
    pub users: usize,
}

pub struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::MissingItem(_) | Error::Data(_) | Error::EmptySequence => (StatusCode::UNPROCESSABLE_ENTITY, "data"),
            Error::Config(_) | Error::Shape(_) => (StatusCode::BAD_REQUEST, "config"),
            Error::Numeric(_) => (StatusCode::INTERNAL_SERVER_ERROR, "numeric"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string(), "kind": kind }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

type Shared = Arc<Recommender>;

async fn interactions(State(rec): State<Shared>, Json(req): Json<InteractionRequest>) -> Result<Json<InteractionAck>, ApiError> {
    Ok(Json(rec.on_interaction(req.user_id, req.item_id, req.timestamp)?))
}

async fn recommendations(
    State(rec): State<Shared>,
    Json(req): Json<RecommendationRequest>,
) -> Result<Json<RecommendationResponse>, ApiError> {
    Ok(Json(rec.recommend(req.user_id, &req.candidate_ids, req.k)?))
}

async fn close_idle(State(rec): State<Shared>, body: Option<Json<CloseIdleRequest>>) -> Result<Json<CloseIdleResponse>, ApiError> {
    let now = body.and_then(|Json(b)| b.now).unwrap_or_else(|| {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0)
    });
    Ok(Json(CloseIdleResponse { closed: rec.close_idle_sessions(now)?, now }))
}

async fn health(State(rec): State<Shared>) -> Json<Health> {
    Json(Health { status: "ok".into(), model_version: rec.model().version.clone(), users: rec.cache().len() })
}

pub fn router(rec: Shared) -> Router {
    Router::new()
        .route("/v1/interactions", post(interactions))
        .route("/v1/recommendations", post(recommendations))
        .route("/v1/maintenance/close-idle", post(close_idle))
        .route("/v1/health", get(health))
        .with_state(rec)
}

fn snapshot_path(args: &ServeArgs) -> PathBuf {
    args.snapshot.clone().unwrap_or_else(|| args.checkpoint.with_file_name("users.snap"))
}

pub fn load_engine(args: &ServeArgs) -> hiertcn::Result<Recommender> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let table = EmbeddingTable::open(&args.dataset.join(ITEMS_FILE))?;
    let rec = Recommender::new(ServingModel::new(ck, Arc::new(ItemMatrix::from_table(&table)))?, args.idle_threshold)?;
    let snap = snapshot_path(args);
    if snap.exists() {
        let n = rec.load_snapshot(&snap)?;
        info!("restored {n} users from {}", snap.display());
    }
    Ok(rec)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Serves until interrupted, then writes the user-state snapshot.
pub async fn serve(args: &ServeArgs) -> hiertcn::Result<()> {
    let rec = Arc::new(load_engine(args)?);
    let listener = tokio::net::TcpListener::bind(&args.addr).await?;
    info!("listening on {} (model {})", listener.local_addr()?, rec.model().version);
    axum::serve(listener, router(rec.clone())).with_graceful_shutdown(shutdown_signal()).await?;
    let snap = snapshot_path(args);
    rec.save_snapshot(&snap)?;
    info!("saved {} users to {}", rec.cache().len(), snap.display());
    Ok(())
}
