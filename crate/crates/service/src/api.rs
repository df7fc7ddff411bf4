//! HTTP API over [`Service`].
//!
//! Searches and approvals answer `202 Accepted` with the session as it
//! stands; the pipeline continues in the background and clients poll
//! `GET /v1/search/{id}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use needle_core::{GuideId, ImageId};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::{SearchRequest, Service, ServiceError};

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(self.0.body())).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking service work off the async executor.
async fn blocking<T: Send + 'static>(
    svc: &Arc<Service>,
    f: impl FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
) -> ApiResult<T> {
    let svc = svc.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(ServiceError::Io(std::io::Error::other(e.to_string()))))?
        .map_err(ApiError)
}

/// JSON body parsing with the service's error shape. An empty body reads
/// as `{}`.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    let raw: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { bytes };
    serde_json::from_slice(raw).map_err(|e| ApiError(ServiceError::BadRequest(format!("malformed request body: {e}"))))
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/datasets/{id}/index", post(start_index))
        .route("/v1/jobs/{job_id}", get(job))
        .route("/v1/search", post(search))
        .route("/v1/search/{query_id}", get(session))
        .route("/v1/search/{query_id}/guides", get(guides))
        .route("/v1/search/{query_id}/guides/approve", post(approve))
        .route("/v1/search/{query_id}/feedback", post(feedback))
        .route("/v1/weights", get(weights))
        .route("/images/{id}", get(image))
        .fallback(|| async { ApiError(ServiceError::not_found("route", "")) })
        .with_state(svc)
}

#[derive(Deserialize, Default)]
struct IndexBody {
    #[serde(default)]
    force: bool,
}

#[derive(Deserialize, Default)]
struct ForceQuery {
    #[serde(default)]
    force: Option<bool>,
}

async fn start_index(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<ForceQuery>,
    raw: Bytes,
) -> ApiResult<Response> {
    let b: IndexBody = body(&raw)?;
    let force = q.force.unwrap_or(false) || b.force;
    let svc2 = svc.clone();
    let job = blocking(&svc, move |_| svc2.start_index(&id, force)).await?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn job(State(svc): State<Arc<Service>>, Path(job_id): Path<String>) -> ApiResult<Response> {
    Ok(Json(svc.job(&job_id)?).into_response())
}

async fn search(State(svc): State<Arc<Service>>, raw: Bytes) -> ApiResult<Response> {
    let req: SearchRequest = body(&raw)?;
    let view = blocking(&svc, move |s| s.start_search(req)).await?;
    let id = view.query_id.clone();
    let bg = svc.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = bg.run_search(&id) {
            log::warn!("search {id}: {e}");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(view)).into_response())
}

async fn session(State(svc): State<Arc<Service>>, Path(query_id): Path<String>) -> ApiResult<Response> {
    Ok(Json(svc.session(&query_id)?).into_response())
}

async fn guides(State(svc): State<Arc<Service>>, Path(query_id): Path<String>) -> ApiResult<Response> {
    Ok(Json(svc.guides(&query_id)?).into_response())
}

#[derive(Deserialize)]
struct ApproveBody {
    keep: Vec<GuideId>,
}

async fn approve(State(svc): State<Arc<Service>>, Path(query_id): Path<String>, raw: Bytes) -> ApiResult<Response> {
    let b: ApproveBody = body(&raw)?;
    let id = query_id.clone();
    let view = blocking(&svc, move |s| s.approve_guides(&id, &b.keep)).await?;
    let bg = svc.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = bg.resume_search(&query_id) {
            log::warn!("search {query_id}: {e}");
        }
    });
    Ok((StatusCode::ACCEPTED, Json(view)).into_response())
}

#[derive(Deserialize)]
struct FeedbackBody {
    irrelevant: Vec<ImageId>,
}

async fn feedback(State(svc): State<Arc<Service>>, Path(query_id): Path<String>, raw: Bytes) -> ApiResult<Response> {
    let b: FeedbackBody = body(&raw)?;
    let out = blocking(&svc, move |s| s.submit_feedback(&query_id, &b.irrelevant)).await?;
    Ok(Json(out).into_response())
}

async fn weights(State(svc): State<Arc<Service>>) -> Json<crate::WeightsView> {
    Json(svc.weights())
}

#[derive(Deserialize, Default)]
struct ImageQuery {
    dataset: Option<String>,
    size: Option<u32>,
}

async fn image(State(svc): State<Arc<Service>>, Path(id): Path<u64>, Query(q): Query<ImageQuery>) -> ApiResult<Response> {
    let img = blocking(&svc, move |s| s.image(q.dataset.as_deref(), ImageId(id), q.size)).await?;
    Ok((
        [(header::CONTENT_TYPE, img.content_type), (header::CACHE_CONTROL, "max-age=3600")],
        img.bytes.as_ref().clone(),
    )
        .into_response())
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve_on(
    svc: Arc<Service>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await
}

/// Binds the configured address and serves until Ctrl-C. Blocks.
pub fn run(svc: Arc<Service>) -> Result<(), ServiceError> {
    let addr: SocketAddr = svc
        .config()
        .listen
        .parse()
        .map_err(|e| ServiceError::Config(format!("listen address {:?}: {e}", svc.config().listen)))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        serve_on(svc, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(())
}
