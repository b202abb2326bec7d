//! HTTP service over one gallery directory.
//!
//! Readers take a snapshot of the gallery under a brief read lock; a reader
//! that finds the lock held for writing gets 503 Busy. Enrollment is
//! serialized, runs on a private copy, persists it, and only then swaps it
//! in, so no request ever sees a half-written gallery.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use texid::{Gallery, PipelineConfig};
use tokio::sync::{Mutex, RwLock};

use crate::error::{ApiError, ErrorCode};
use crate::service::{self, EnrollResponse, HealthResponse, ProductResponse, MAX_IMAGE_BYTES};

pub struct AppState {
    gallery: RwLock<Arc<Gallery>>,
    writer: Mutex<()>,
    dir: PathBuf,
    cfg: PipelineConfig,
}

impl AppState {
    pub fn open(dir: impl Into<PathBuf>, cfg: PipelineConfig) -> Result<Self, ApiError> {
        let dir = dir.into();
        let gallery = service::open_gallery(&dir, &cfg)?;
        Ok(Self {
            gallery: RwLock::new(Arc::new(gallery)),
            writer: Mutex::new(()),
            dir,
            cfg,
        })
    }

    /// Holds the gallery exclusively, as an enrollment swap does.
    #[doc(hidden)]
    pub async fn lock_exclusive(&self) -> tokio::sync::RwLockWriteGuard<'_, Arc<Gallery>> {
        self.gallery.write().await
    }

    fn snapshot(&self) -> Result<Arc<Gallery>, ApiError> {
        self.gallery
            .try_read()
            .map(|g| Arc::clone(&g))
            .map_err(|_| ApiError::new(ErrorCode::Busy, "gallery is being updated"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.code.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/enroll", post(enroll))
        .route("/verify", post(verify))
        .route("/search", post(search))
        .route("/product/{id}", get(product))
        .route("/health", get(health))
        // room for the multipart framing around a maximal image
        .layer(DefaultBodyLimit::max(MAX_IMAGE_BYTES + 64 * 1024))
        .with_state(state)
}

pub async fn serve(bind: &str, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Default)]
struct Form {
    image: Option<Vec<u8>>,
    fields: Vec<(String, String)>,
}

impl Form {
    fn take_image(&mut self) -> Result<Vec<u8>, ApiError> {
        self.image
            .take()
            .ok_or_else(|| ApiError::bad_request("missing multipart field \"image\""))
    }

    /// Removes and returns field `name`.
    fn take(&mut self, name: &str) -> Option<String> {
        let i = self.fields.iter().position(|(k, _)| k == name)?;
        Some(self.fields.remove(i).1)
    }

    fn reject_rest(&self) -> Result<(), ApiError> {
        match self.fields.first() {
            Some((k, _)) => Err(ApiError::bad_request(format!("unexpected field {k:?}"))),
            None => Ok(()),
        }
    }
}

async fn read_form(mp: Result<Multipart, MultipartRejection>) -> Result<Form, ApiError> {
    let mut mp = mp.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let mut form = Form::default();
    let read_err = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(ErrorCode::BadImage, format!("image exceeds {MAX_IMAGE_BYTES} bytes"))
        } else {
            ApiError::bad_request(e.body_text())
        }
    };
    while let Some(field) = mp.next_field().await.map_err(read_err)? {
        let name = field.name().unwrap_or_default().to_string();
        if name == "image" {
            form.image = Some(field.bytes().await.map_err(read_err)?.to_vec());
        } else {
            let value = field.text().await.map_err(read_err)?;
            form.fields.push((name, value));
        }
    }
    Ok(form)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?
}

fn parse_bool(name: &str, v: &str) -> Result<bool, ApiError> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(ApiError::bad_request(format!("{name} must be true or false"))),
    }
}

async fn enroll(
    State(st): State<Arc<AppState>>,
    mp: Result<Multipart, MultipartRejection>,
) -> Result<Json<EnrollResponse>, ApiError> {
    let mut form = read_form(mp).await?;
    let image = form.take_image()?;
    let metadata = service::parse_metadata(form.fields.iter().map(|(k, v)| (k.as_str(), v.as_str())));

    let _writer = st.writer.lock().await;
    let mut next = (*st.gallery.read().await.clone()).clone();
    let job = Arc::clone(&st);
    let (resp, next) = blocking(move || {
        let r = service::enroll(&mut next, &job.dir, &image, metadata, &job.cfg)?;
        Ok((r, next))
    })
    .await?;
    *st.gallery.write().await = Arc::new(next);
    Ok(Json(resp))
}

async fn verify(
    State(st): State<Arc<AppState>>,
    mp: Result<Multipart, MultipartRejection>,
) -> Result<Json<texid::VerifyResult>, ApiError> {
    let mut form = read_form(mp).await?;
    let image = form.take_image()?;
    let id = form
        .take("id")
        .ok_or_else(|| ApiError::bad_request("missing field \"id\""))?;
    let boost = match form.take("boost") {
        Some(v) => parse_bool("boost", &v)?,
        None => false,
    };
    form.reject_rest()?;
    let gallery = st.snapshot()?;
    let cfg = st.cfg.clone();
    let r = blocking(move || service::verify(&gallery, &image, &id, boost, &cfg)).await?;
    Ok(Json(r))
}

async fn search(
    State(st): State<Arc<AppState>>,
    mp: Result<Multipart, MultipartRejection>,
) -> Result<Json<texid::SearchResult>, ApiError> {
    let mut form = read_form(mp).await?;
    let image = form.take_image()?;
    let k = match form.take("k") {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| ApiError::bad_request("k must be a positive integer"))?,
        None => crate::DEFAULT_K,
    };
    form.reject_rest()?;
    let gallery = st.snapshot()?;
    let cfg = st.cfg.clone();
    let r = blocking(move || service::search_gallery(&gallery, &image, k, &cfg)).await?;
    Ok(Json(r))
}

async fn product(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ProductResponse>, ApiError> {
    Ok(Json(service::product(&*st.snapshot()?, &id)?))
}

async fn health(State(st): State<Arc<AppState>>) -> Result<Json<HealthResponse>, ApiError> {
    Ok(Json(service::health(&*st.snapshot()?)))
}
