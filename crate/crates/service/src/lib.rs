//! HTTP inpainting service: `GET /health`, `GET /models`, `POST /inpaint`.

pub mod api;
pub mod catalog;
pub mod pool;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use brushnet_core::diffusion::NoiseSchedule;
use brushnet_core::Error;
use serde_json::json;
use tokio::sync::oneshot;

use api::{encode_png_b64, validate, ErrorBody, InpaintRequest, InpaintResponse};
use catalog::Catalog;
use pool::{Job, WorkerPool};

pub const DEFAULT_BUDGET: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workers: usize,
    /// Wall-clock limit per request, queueing included.
    pub budget: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self { workers, budget: DEFAULT_BUDGET }
    }
}

#[derive(Clone)]
pub struct AppState {
    catalog: Arc<Catalog>,
    pool: Arc<WorkerPool>,
    budget: Duration,
    schedule: Arc<NoiseSchedule>,
}

impl AppState {
    /// Loads one replica per worker; fails if any checkpoint does not load.
    pub fn new(catalog: Catalog, config: &ServiceConfig) -> brushnet_core::Result<Self> {
        let pool = WorkerPool::start(&catalog, config.workers)?;
        Ok(Self {
            catalog: Arc::new(catalog),
            pool: Arc::new(pool),
            budget: config.budget,
            schedule: Arc::new(NoiseSchedule::default()),
        })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/inpaint", post(inpaint))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ready", "workers": s.pool.workers(), "models": s.catalog.entries().len() }))
}

async fn models(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "models": s.catalog.entries() }))
}

fn error(status: StatusCode, message: impl Into<String>, field: Option<&str>) -> Response {
    (status, Json(ErrorBody { error: message.into(), field: field.map(str::to_string) })).into_response()
}

async fn inpaint(State(s): State<AppState>, body: Bytes) -> Response {
    let started = Instant::now();
    let req: InpaintRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid request body: {e}"), None),
    };
    let valid = match validate(&req, &s.catalog, s.catalog.image_size(), s.catalog.seq_len(), &s.schedule) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.message, Some(e.field)),
    };
    let options = valid.options.clone();
    let cancel = Arc::new(AtomicBool::new(false));
    let (tx, rx) = oneshot::channel();
    let job = Job { request: valid, cancel: cancel.clone(), deadline: started + s.budget, reply: tx };
    if let Err(e) = s.pool.submit(job) {
        return error(StatusCode::SERVICE_UNAVAILABLE, e.to_string(), None);
    }
    let budget_msg = || format!("request exceeded the {:.0} s budget", s.budget.as_secs_f64());
    let result = match tokio::time::timeout(s.budget, rx).await {
        Ok(Ok(r)) => r,
        Ok(Err(_)) => return error(StatusCode::INTERNAL_SERVER_ERROR, "worker dropped the job", None),
        Err(_) => {
            cancel.store(true, Ordering::Relaxed);
            return error(StatusCode::SERVICE_UNAVAILABLE, budget_msg(), None);
        }
    };
    let image = match result {
        Ok(img) => img,
        Err(Error::Cancelled(_)) => return error(StatusCode::SERVICE_UNAVAILABLE, budget_msg(), None),
        Err(Error::Compatibility(m)) => return error(StatusCode::BAD_REQUEST, m, Some("base")),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    };
    let encoded = match encode_png_b64(&image) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
    };
    let model = match &options.branch {
        Some(b) => format!("{}+{b}", options.base),
        None => options.base.clone(),
    };
    let resp = InpaintResponse { image: encoded, timing_ms: started.elapsed().as_millis() as u64, options, model };
    (StatusCode::OK, Json(resp)).into_response()
}
