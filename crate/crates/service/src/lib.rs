//! HTTP front end: vehicle recognition plus the review-queue endpoints used
//! by the annotation console.
//!
//! Recognition runs on the blocking pool against read-only models, so it
//! never waits on review traffic. All queue mutations go through one mutex
//! around [`ReviewStore`].

pub mod config;
mod recognize;
pub mod review;

use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mmcr::manifest::{Granularity, LabelVocabulary};
use mmcr::model::{load_model, ClassifierModel};
use mmcr::preprocess::{Detector, FullFrameDetector};
use mmcr::prune::{ReviewItem, ReviewStatus};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::trace::{DefaultMakeSpan, DefaultOnResponse, TraceLayer};
use tracing::Level;

pub use config::ServiceConfig;
pub use recognize::{recognize_image, ColorEntry, MakeModelEntry, Recognition, Vehicle, RECOGNITION_SCHEMA};
pub use review::{Clock, ManualClock, ReviewStore, SystemClock, VerdictError};

#[derive(Error, Debug)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] mmcr::Error),
    #[error("{path}: expected a {expected} model, found a {found} model")]
    WrongGranularity {
        path: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server stopped: {0}")]
    Serve(#[source] std::io::Error),
}

pub struct Models {
    pub make_model: Option<ClassifierModel>,
    pub color: Option<ClassifierModel>,
}

struct Inner {
    models: Models,
    detector: Arc<dyn Detector>,
    review: Option<Mutex<ReviewStore>>,
    vocabulary: Option<Arc<LabelVocabulary>>,
    clock: Arc<dyn Clock>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn load_checked(path: &Path, color: bool) -> Result<ClassifierModel, ServiceError> {
    let m = load_model(path)?;
    let g = m.vocabulary().granularity();
    if (g == Granularity::Color) != color {
        return Err(ServiceError::WrongGranularity {
            path: path.display().to_string(),
            expected: if color { "color" } else { "make/model" },
            found: g.as_str(),
        });
    }
    Ok(m)
}

impl AppState {
    pub fn new(models: Models, review: Option<ReviewStore>, clock: Arc<dyn Clock>) -> Self {
        // Relabels are checked against the vocabulary of the model that
        // produced the queue: the first loaded model knowing every proposed
        // label, make/model preferred.
        let vocabulary = review.as_ref().and_then(|store| {
            [&models.make_model, &models.color]
                .into_iter()
                .flatten()
                .map(|m| m.vocabulary())
                .find(|v| store.items().iter().all(|it| v.index_of(&it.proposed_label).is_some()))
                .cloned()
        });
        Self {
            inner: Arc::new(Inner {
                models,
                detector: Arc::new(FullFrameDetector),
                review: review.map(Mutex::new),
                vocabulary,
                clock,
            }),
        }
    }

    pub fn from_config(config: &ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let make_model = config
            .make_model_model
            .as_deref()
            .map(|p| load_checked(p, false))
            .transpose()?;
        let color = config.color_model.as_deref().map(|p| load_checked(p, true)).transpose()?;
        let review = config
            .queue
            .as_deref()
            .map(|p| ReviewStore::open(p, config.lease()))
            .transpose()?;
        Ok(Self::new(Models { make_model, color }, review, clock))
    }

    pub fn models(&self) -> &Models {
        &self.inner.models
    }
}

pub fn router(state: AppState, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/recognize", post(recognize))
        .route("/v1/vocabulary", get(vocabulary))
        .route("/v1/review/next", get(review_next))
        .route("/v1/review/{id}", get(review_get))
        .route("/v1/review/{id}/verdict", post(review_verdict))
        .route("/v1/images/{id}", get(image))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .layer(
            TraceLayer::new_for_http()
                .make_span_with(DefaultMakeSpan::new().level(Level::INFO))
                .on_response(DefaultOnResponse::new().level(Level::INFO)),
        )
        .with_state(state)
}

/// Binds `config.listen`, calls `on_bound` with the actual address, then
/// serves until the process stops.
pub async fn serve(
    config: &ServiceConfig,
    state: AppState,
    on_bound: impl FnOnce(std::net::SocketAddr),
) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
    let addr = listener.local_addr().map_err(ServiceError::Serve)?;
    on_bound(addr);
    axum::serve(listener, router(state, config.max_body_bytes))
        .await
        .map_err(ServiceError::Serve)
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    existing: Option<ReviewItem>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            existing: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": { "code": self.code, "message": self.message } });
        if let Some(item) = self.existing {
            body["existing"] = serde_json::to_value(ItemView::from(&item)).unwrap_or_default();
        }
        (self.status, Json(body)).into_response()
    }
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    let m = &state.inner.models;
    Json(json!({
        "status": "ok",
        "make_model_loaded": m.make_model.is_some(),
        "color_loaded": m.color.is_some(),
        "queue_loaded": state.inner.review.is_some(),
    }))
}

#[derive(Deserialize)]
struct RecognizeQuery {
    top_k: Option<usize>,
}

async fn recognize(
    State(state): State<AppState>,
    Query(q): Query<RecognizeQuery>,
    body: Bytes,
) -> Result<Json<Recognition>, ApiError> {
    let top_k = q.top_k.unwrap_or(5);
    if top_k == 0 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "top_k must be at least 1"));
    }
    let m = &state.inner.models;
    if m.make_model.is_none() && m.color.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model is loaded"));
    }
    let img = image::load_from_memory(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_image", format!("cannot decode image: {e}")))?
        .to_rgb8();
    let st = state.clone();
    let doc = tokio::task::spawn_blocking(move || {
        let m = &st.inner.models;
        recognize_image(&img, m.make_model.as_ref(), m.color.as_ref(), st.inner.detector.as_ref(), top_k)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    doc.map(Json).map_err(|e| match e.kind() {
        mmcr::ErrorKind::Internal => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        _ => ApiError::new(StatusCode::BAD_REQUEST, "bad_image", e.to_string()),
    })
}

async fn vocabulary(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let v = state.inner.vocabulary.as_ref().ok_or_else(|| {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "vocabulary_not_loaded", "no review vocabulary is loaded")
    })?;
    Ok(Json(json!({
        "granularity": v.granularity(),
        "digest": v.digest(),
        "classes": v.classes(),
    })))
}

#[derive(Serialize)]
struct ItemView<'a> {
    #[serde(flatten)]
    item: &'a ReviewItem,
    image_url: String,
}

impl<'a> From<&'a ReviewItem> for ItemView<'a> {
    fn from(item: &'a ReviewItem) -> Self {
        Self {
            item,
            image_url: format!("/v1/images/{}", item.id),
        }
    }
}

fn store(state: &AppState) -> Result<&Mutex<ReviewStore>, ApiError> {
    state
        .inner
        .review
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "queue_not_loaded", "no review queue is loaded"))
}

#[derive(Deserialize)]
struct NextQuery {
    count: Option<usize>,
}

async fn review_next(
    State(state): State<AppState>,
    Query(q): Query<NextQuery>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let now = state.inner.clock.now();
    let items = store(&state)?.lock().unwrap().next(q.count.unwrap_or(1), now);
    let views: Vec<ItemView> = items.iter().map(ItemView::from).collect();
    Ok(Json(json!({ "items": views })))
}

fn not_found(id: &str) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no review item {id:?}"))
}

async fn review_get(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let item = store(&state)?.lock().unwrap().get(&id).cloned().ok_or_else(|| not_found(&id))?;
    Ok(Json(serde_json::to_value(ItemView::from(&item)).unwrap_or_default()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictBody {
    status: String,
    #[serde(default)]
    verdict_label: Option<String>,
    annotator: String,
}

async fn review_verdict(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    store(&state)?;
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_verdict", m);
    let body: VerdictBody = serde_json::from_slice(&body).map_err(|e| unprocessable(e.to_string()))?;
    let status: ReviewStatus = body.status.parse().map_err(unprocessable)?;
    // the append syncs to disk, so keep it off the async workers
    let st = state.clone();
    let id2 = id.clone();
    let result = tokio::task::spawn_blocking(move || {
        let vocab = st.inner.vocabulary.as_deref();
        let mut store = st.inner.review.as_ref().expect("checked above").lock().unwrap();
        store.verdict(&id2, status, body.verdict_label, &body.annotator, vocab)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    match result {
        Ok(item) => Ok(Json(serde_json::to_value(ItemView::from(&item)).unwrap_or_default())),
        Err(VerdictError::NotFound) => Err(not_found(&id)),
        Err(VerdictError::Invalid(m)) => Err(unprocessable(m)),
        Err(VerdictError::Conflict(existing)) => Err(ApiError {
            existing: Some(*existing),
            ..ApiError::new(StatusCode::CONFLICT, "conflict", format!("item {id:?} already has a verdict"))
        }),
        Err(VerdictError::Storage(m)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", m)),
    }
}

async fn image(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let path = store(&state)?.lock().unwrap().get(&id).map(|it| it.path.clone()).ok_or_else(|| not_found(&id))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "image_missing", format!("{}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
