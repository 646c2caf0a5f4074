//! HTTP routes.

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::api::{PredictOptions, PredictResponse};
use crate::engine::Engine;
use crate::error::ServiceError;

/// Multipart framing allowance on top of the payload limit.
const FORM_OVERHEAD: usize = 64 * 1024;

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    upload_limit: usize,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(engine: Engine, upload_limit: usize) -> Self {
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        AppState {
            engine: Arc::new(engine),
            upload_limit,
            workers: Arc::new(Semaphore::new(workers)),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.upload_limit.saturating_add(FORM_OVERHEAD);
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/predict", post(predict))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn model(State(state): State<AppState>) -> Json<Value> {
    let mut v = serde_json::to_value(state.engine.info()).expect("serializable");
    v["api_version"] = json!(crate::api::API_VERSION);
    Json(v)
}

async fn predict(State(state): State<AppState>, mut form: Multipart) -> Result<Json<PredictResponse>, ServiceError> {
    let mut payload: Option<Vec<u8>> = None;
    let mut options = PredictOptions::default();
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(multipart_error(e)),
        };
        match field.name() {
            Some("file") => {
                let bytes = field.bytes().await.map_err(multipart_error)?;
                if bytes.len() > state.upload_limit {
                    return Err(ServiceError::PayloadTooLarge(format!(
                        "payload of {} bytes exceeds the {} byte limit",
                        bytes.len(),
                        state.upload_limit
                    )));
                }
                payload = Some(bytes.to_vec());
            }
            Some("options") => {
                let text = field.text().await.map_err(multipart_error)?;
                options = serde_json::from_str(&text).map_err(|e| ServiceError::BadRequest(format!("invalid options: {e}")))?;
            }
            _ => {}
        }
    }
    let payload = payload.ok_or_else(|| ServiceError::BadRequest("missing multipart field `file`".into()))?;
    if payload.is_empty() {
        return Err(ServiceError::BadRequest("undecodable media: empty payload".into()));
    }
    let _permit = state
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ServiceError::Unavailable("worker pool closed".into()))?;
    let engine = state.engine.clone();
    let response = tokio::task::spawn_blocking(move || engine.predict(payload, &options))
        .await
        .map_err(|e| ServiceError::Internal(format!("inference task failed: {e}")))??;
    Ok(Json(response))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ServiceError {
    if e.status() == axum::http::StatusCode::PAYLOAD_TOO_LARGE {
        ServiceError::PayloadTooLarge(e.body_text())
    } else {
        ServiceError::BadRequest(e.body_text())
    }
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
