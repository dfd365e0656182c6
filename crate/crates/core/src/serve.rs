//! Read-only HTTP API over one checkpoint and an index of its eval split.
//!
//! | route                          | response                                              |
//! |--------------------------------|-------------------------------------------------------|
//! | `GET /api/health`              | `{status, checkpoint_id, index_size}`                 |
//! | `GET /api/gallery?limit&offset`| `[{id, class_label, aux_color_label, thumb_url}]`     |
//! | `GET /api/image/{id}`          | PNG                                                   |
//! | `POST /api/retrieve`           | `{neighbors, query_embedding_norm, elapsed_ms}`       |
//! | `GET /api/augment/{id}?kind&theta` | PNG of the augmented input                        |
//!
//! Requests arriving before the checkpoint has loaded get 503.

use crate::augment::{self, parse_theta, AugmentKind, AugmentParams};
use crate::checkpoint::{checkpoint_id, Checkpoint};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::eval::{execute_retrieve, RetrievalIndex, RetrieveRequest};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;
use tower_http::cors::CorsLayer;

pub const DEFAULT_GALLERY_LIMIT: usize = 48;
pub const MAX_GALLERY_LIMIT: usize = 1000;

/// Everything a request can read. Never mutated after construction.
pub struct ServeState {
    pub checkpoint: Checkpoint,
    pub checkpoint_id: String,
    pub images: Vec<LabeledImage>,
    pub index: RetrievalIndex,
}

impl ServeState {
    /// Rebuilds the eval split from the checkpoint and embeds it unless `index` is given.
    pub fn new(checkpoint: Checkpoint, checkpoint_id: String, index: Option<RetrievalIndex>) -> Result<Self> {
        let images = checkpoint.config.dataset.load()?.eval;
        let index = match index {
            Some(i) => {
                if i.len() != images.len() {
                    return Err(Error::validation(
                        "index",
                        format!("index has {} keys, eval split has {}", i.len(), images.len()),
                    ));
                }
                i
            }
            None => RetrievalIndex::of_images(&checkpoint, &images, "eval split, clean images")?,
        };
        Ok(Self {
            checkpoint,
            checkpoint_id,
            images,
            index,
        })
    }

    pub fn load(ck_path: &Path, index_path: Option<&Path>) -> Result<Self> {
        let bytes = std::fs::read(ck_path).map_err(|e| Error::io(ck_path, e))?;
        let ck = Checkpoint::from_bytes(&bytes).map_err(|e| Error::format(ck_path, e.to_string()))?;
        let id = checkpoint_id(&bytes);
        let index = index_path.map(|p| RetrievalIndex::load(p, &id)).transpose()?;
        Self::new(ck, id, index)
    }

    fn image(&self, id: usize) -> Result<&LabeledImage> {
        self.images.get(id).ok_or_else(|| Error::NotFound {
            what: format!("image {id}"),
        })
    }
}

/// Shared handle; empty until loading finishes.
#[derive(Clone, Default)]
pub struct AppState(Arc<OnceLock<ServeState>>);

impl AppState {
    pub fn loading() -> Self {
        Self::default()
    }

    pub fn ready(state: ServeState) -> Self {
        let s = Self::default();
        s.set(state);
        s
    }

    /// Installs the loaded state. Later calls are ignored.
    pub fn set(&self, state: ServeState) {
        if self.0.set(state).is_err() {
            log::warn!("server state was already loaded");
        }
    }

    fn get(&self) -> std::result::Result<&ServeState, ApiError> {
        self.0.get().ok_or(ApiError::Loading)
    }
}

enum ApiError {
    Loading,
    BadBody(String),
    Core(Error),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::Core(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::Loading => (
                StatusCode::SERVICE_UNAVAILABLE,
                json!({"status": "loading", "error": "checkpoint is still loading"}),
            ),
            ApiError::BadBody(msg) => (StatusCode::BAD_REQUEST, json!({"error": msg})),
            ApiError::Core(e) => {
                let status = match &e {
                    Error::Validation { .. } | Error::Usage(_) | Error::Shape { .. } => StatusCode::BAD_REQUEST,
                    Error::NotFound { .. } => StatusCode::NOT_FOUND,
                    Error::Domain { .. } | Error::NonFinite(_) => StatusCode::UNPROCESSABLE_ENTITY,
                    Error::Format { .. } | Error::Checkpoint(_) | Error::Io { .. } => {
                        StatusCode::INTERNAL_SERVER_ERROR
                    }
                };
                let field = match &e {
                    Error::Validation { field, .. } => Some(field.clone()),
                    _ => None,
                };
                (status, json!({"error": e.to_string(), "field": field}))
            }
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn thumb_url(id: usize) -> String {
    format!("/api/image/{id}")
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn health(State(app): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let s = app.get()?;
    Ok(Json(json!({
        "status": "ok",
        "checkpoint_id": s.checkpoint_id,
        "index_size": s.index.len(),
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GalleryQuery {
    limit: Option<usize>,
    offset: Option<usize>,
}

#[derive(Serialize)]
struct GalleryItem {
    id: usize,
    class_label: usize,
    aux_color_label: usize,
    thumb_url: String,
}

async fn gallery(
    State(app): State<AppState>,
    q: std::result::Result<Query<GalleryQuery>, QueryRejection>,
) -> ApiResult<Json<Vec<GalleryItem>>> {
    let s = app.get()?;
    let Query(q) = q.map_err(|e| ApiError::BadBody(e.body_text()))?;
    let limit = q.limit.unwrap_or(DEFAULT_GALLERY_LIMIT);
    if limit == 0 || limit > MAX_GALLERY_LIMIT {
        return Err(Error::validation("limit", format!("must be in 1..={MAX_GALLERY_LIMIT}")).into());
    }
    let offset = q.offset.unwrap_or(0);
    Ok(Json(
        s.images
            .iter()
            .enumerate()
            .skip(offset)
            .take(limit)
            .map(|(id, li)| GalleryItem {
                id,
                class_label: li.class_label,
                aux_color_label: li.aux_color_label,
                thumb_url: thumb_url(id),
            })
            .collect(),
    ))
}

async fn image(State(app): State<AppState>, UrlPath(id): UrlPath<usize>) -> ApiResult<Response> {
    let s = app.get()?;
    Ok(png(s.image(id)?.image.to_png()))
}

#[derive(Serialize)]
struct NeighborOut {
    id: usize,
    distance: f64,
    thumb_url: String,
}

async fn retrieve(
    State(app): State<AppState>,
    body: std::result::Result<Json<RetrieveRequest>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let s = app.get()?;
    let Json(req) = body.map_err(|e| ApiError::BadBody(e.body_text()))?;
    let t = Instant::now();
    let r = execute_retrieve(&s.checkpoint, &s.index, &s.images, &req)?;
    let neighbors: Vec<NeighborOut> = r
        .neighbors
        .iter()
        .map(|n| NeighborOut {
            id: n.id,
            distance: n.distance,
            thumb_url: thumb_url(n.id),
        })
        .collect();
    Ok(Json(json!({
        "neighbors": neighbors,
        "query_embedding_norm": r.query_embedding_norm,
        "w_m": r.w_m,
        "elapsed_ms": t.elapsed().as_secs_f64() * 1e3,
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentQuery {
    kind: Option<String>,
    theta: Option<String>,
}

async fn augment_image(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<usize>,
    q: std::result::Result<Query<AugmentQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let s = app.get()?;
    let Query(q) = q.map_err(|e| ApiError::BadBody(e.body_text()))?;
    let li = s.image(id)?;
    let kind: AugmentKind = q.kind.as_deref().ok_or_else(|| Error::validation("kind", "required"))?.parse()?;
    let theta = parse_theta(q.theta.as_deref().ok_or_else(|| Error::validation("theta", "required"))?)?;
    let p = AugmentParams::new(kind, theta)?;
    Ok(png(augment::apply(&li.image, &p)?.to_png()))
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/gallery", get(gallery))
        .route("/api/image/{id}", get(image))
        .route("/api/retrieve", post(retrieve))
        .route("/api/augment/{id}", get(augment_image))
        .layer(CorsLayer::permissive())
        .with_state(app)
}

/// Binds `addr`, answers 503 while the checkpoint loads, then serves until ctrl-c.
/// A failed load shuts the server down and returns the error.
pub fn serve_blocking(addr: std::net::SocketAddr, ck_path: PathBuf, index_path: Option<PathBuf>) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("listening on http://{addr}");
        let app = AppState::loading();
        let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<Error>();
        let loader = app.clone();
        tokio::task::spawn_blocking(move || match ServeState::load(&ck_path, index_path.as_deref()) {
            Ok(s) => {
                log::info!("loaded checkpoint {} with {} indexed images", s.checkpoint_id, s.index.len());
                loader.set(s);
            }
            Err(e) => {
                let _ = fail_tx.send(e);
            }
        });
        let failure = Arc::new(std::sync::Mutex::new(None));
        let slot = failure.clone();
        let shutdown = async move {
            tokio::select! {
                r = fail_rx => {
                    if let Ok(e) = r {
                        *slot.lock().expect("unpoisoned") = Some(e);
                    } else {
                        std::future::pending::<()>().await;
                    }
                }
                _ = tokio::signal::ctrl_c() => log::info!("shutting down"),
            }
        };
        axum::serve(listener, router(app))
            .with_graceful_shutdown(shutdown)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        let e = failure.lock().expect("unpoisoned").take();
        match e {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })
}
