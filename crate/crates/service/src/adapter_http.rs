//! Serves any in-process [`Embedder`] or [`Generator`] over the adapter wire
//! protocol. Used to expose the mocks to other processes and by the golden
//! protocol tests.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
pub use axum::Router;
use needle_core::adapter::{
    decode_png_b64, encode_png_b64, AdapterErrorKind, AdapterKind, EmbedRequest, EmbedResponse, Embedder, ErrorBody,
    GenerateRequest, GenerateResponse, GeneratedImage, Generator, InfoResponse, Raster, VectorPayload,
};
use needle_core::AdapterError;

/// Largest accepted request body.
const MAX_BODY: usize = 256 << 20;

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            code: code.into(),
            message: message.into(),
        }),
    )
        .into_response()
}

fn adapter_failure(e: AdapterError) -> Response {
    match e.kind {
        AdapterErrorKind::Rejected(_) => error(StatusCode::BAD_REQUEST, "rejected", e.to_string()),
        _ => error(StatusCode::INTERNAL_SERVER_ERROR, "adapter_error", e.to_string()),
    }
}

#[allow(clippy::result_large_err)]
fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()))
}

pub fn embedder_router(embedder: Arc<dyn Embedder>) -> Router {
    Router::new()
        .route("/v1/info", get(embedder_info))
        .route("/v1/embed", post(embed))
        .layer(axum::extract::DefaultBodyLimit::max(MAX_BODY))
        .with_state(embedder)
}

pub fn generator_router(generator: Arc<dyn Generator>) -> Router {
    Router::new()
        .route("/v1/info", get(generator_info))
        .route("/v1/generate", post(generate))
        .layer(axum::extract::DefaultBodyLimit::max(MAX_BODY))
        .with_state(generator)
}

async fn embedder_info(State(e): State<Arc<dyn Embedder>>) -> Json<InfoResponse> {
    let d = e.descriptor();
    Json(InfoResponse {
        kind: AdapterKind::Embedder,
        id: d.embedder_id.clone(),
        dim: Some(d.dim),
    })
}

async fn generator_info(State(g): State<Arc<dyn Generator>>) -> Json<InfoResponse> {
    Json(InfoResponse {
        kind: AdapterKind::Generator,
        id: g.descriptor().generator_id.clone(),
        dim: None,
    })
}

async fn embed(State(e): State<Arc<dyn Embedder>>, body: Bytes) -> Response {
    let req: EmbedRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let d = e.descriptor();
    if req.embedder_id != d.embedder_id {
        return error(
            StatusCode::BAD_REQUEST,
            "unknown_embedder",
            format!("this adapter serves {:?}, not {:?}", d.embedder_id, req.embedder_id),
        );
    }
    let mut rasters = Vec::with_capacity(req.images.len());
    for img in &req.images {
        match decode_png_b64(&img.png_b64) {
            Ok(r) => rasters.push(r),
            Err(err) => return error(StatusCode::BAD_REQUEST, "bad_image", format!("image {:?}: {err}", img.id)),
        }
    }
    let dim = d.dim;
    let ids: Vec<String> = req.images.into_iter().map(|i| i.id).collect();
    let run = tokio::task::spawn_blocking(move || {
        let refs: Vec<&Raster> = rasters.iter().collect();
        e.embed(&refs)
    });
    match run.await {
        Ok(Ok(vectors)) => Json(EmbedResponse {
            dim,
            vectors: ids
                .into_iter()
                .zip(vectors)
                .map(|(id, values)| VectorPayload { id, values })
                .collect(),
        })
        .into_response(),
        Ok(Err(err)) => adapter_failure(err),
        Err(join) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", join.to_string()),
    }
}

async fn generate(State(g): State<Arc<dyn Generator>>, body: Bytes) -> Response {
    let req: GenerateRequest = match parse(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    if req.count == 0 || req.width == 0 || req.height == 0 {
        return error(StatusCode::BAD_REQUEST, "bad_request", "count, width and height must be positive");
    }
    let run = tokio::task::spawn_blocking(move || g.generate(&req.prompt, req.count, (req.width, req.height), req.seed));
    match run.await {
        Ok(Ok(images)) => Json(GenerateResponse {
            images: images
                .iter()
                .map(|(seed, r)| GeneratedImage {
                    seed: *seed,
                    png_b64: encode_png_b64(r),
                })
                .collect(),
        })
        .into_response(),
        Ok(Err(err)) => adapter_failure(err),
        Err(join) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", join.to_string()),
    }
}

/// Serves an adapter router on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

