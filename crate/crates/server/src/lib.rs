//! HTTP service over a pipeline data directory: persisted batches, their
//! count slices and voxel attributions, per-series views, and the
//! annotation log.

pub mod payload;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use ctqc::error::Error as CoreError;
use ctqc::ssim::TemplateId;
use ctqc::superimpose::{
    binarize, read_log, record_annotation, AnnotationLog, AnnotationRecord, BatchManifest, DataDir, SuperimposedBatch,
    ThresholdParams, Verdict,
};
use ctqc::volume::{load_volume, Volume};

use payload::{Layer, LayerData, SliceMeta, SlicePayload};

/// Brain window, HU.
pub const DEFAULT_WINDOW: f64 = 80.0;
pub const DEFAULT_LEVEL: f64 = 40.0;
const VOLUME_CACHE: usize = 8;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    /// Refuse annotation writes.
    pub read_only: bool,
    /// Allowed UI origin; any origin when unset.
    pub cors_origin: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("{e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct LoadedBatch {
    batch: SuperimposedBatch,
    manifest: BatchManifest,
}

struct Inner {
    data: DataDir,
    read_only: bool,
    cors_origin: Option<String>,
    log: Option<AnnotationLog>,
    /// Records in log order; replaying the log reproduces it.
    annotations: Mutex<Vec<AnnotationRecord>>,
    batches: RwLock<HashMap<String, Arc<LoadedBatch>>>,
    volumes: Mutex<Vec<(PathBuf, Arc<Volume>)>>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn open(config: ServerConfig) -> Result<Self, CoreError> {
        let data = DataDir::new(&config.data_dir);
        if !data.root().is_dir() {
            return Err(CoreError::InvalidParameter(format!(
                "data directory {} does not exist",
                data.root().display()
            )));
        }
        let log_path = data.annotation_log_path();
        let annotations = read_log(&log_path)?;
        let log = if config.read_only {
            None
        } else {
            Some(AnnotationLog::open(log_path)?)
        };
        Ok(AppState {
            inner: Arc::new(Inner {
                data,
                read_only: config.read_only,
                cors_origin: config.cors_origin,
                log,
                annotations: Mutex::new(annotations),
                batches: RwLock::new(HashMap::new()),
                volumes: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn data_dir(&self) -> &Path {
        self.inner.data.root()
    }

    pub fn annotations(&self) -> Vec<AnnotationRecord> {
        self.inner.annotations.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn manifest(&self, batch_id: &str) -> ApiResult<BatchManifest> {
        let dir = self
            .inner
            .data
            .batch_dir(batch_id)
            .map_err(|_| ApiError::not_found(format!("unknown batch {batch_id:?}")))?;
        if !dir.join("members.json").exists() {
            return Err(ApiError::not_found(format!("unknown batch {batch_id:?}")));
        }
        self.inner.data.read_manifest(batch_id).map_err(ApiError::internal)
    }

    /// Cached while the stored manifest is unchanged.
    fn batch(&self, batch_id: &str) -> ApiResult<Arc<LoadedBatch>> {
        let manifest = self.manifest(batch_id)?;
        if let Some(b) = self
            .inner
            .batches
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(batch_id)
        {
            if b.manifest == manifest {
                return Ok(b.clone());
            }
        }
        let (batch, manifest) = self.inner.data.load_batch(batch_id).map_err(ApiError::internal)?;
        let loaded = Arc::new(LoadedBatch { batch, manifest });
        self.inner
            .batches
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(batch_id.to_string(), loaded.clone());
        Ok(loaded)
    }

    fn volume(&self, path: &Path) -> ApiResult<Arc<Volume>> {
        let mut cache = self.inner.volumes.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(i) = cache.iter().position(|(p, _)| p == path) {
            let hit = cache.remove(i);
            let v = hit.1.clone();
            cache.push(hit);
            return Ok(v);
        }
        drop(cache);
        let v = Arc::new(load_volume(path).map_err(ApiError::internal)?);
        let mut cache = self.inner.volumes.lock().unwrap_or_else(|p| p.into_inner());
        if cache.len() >= VOLUME_CACHE {
            cache.remove(0);
        }
        cache.push((path.to_path_buf(), v.clone()));
        Ok(v)
    }

    /// The first persisted batch, by id, that lists the series.
    fn batch_of_series(&self, series_id: &str) -> ApiResult<BatchManifest> {
        self.inner
            .data
            .list_batches()
            .map_err(ApiError::internal)?
            .into_iter()
            .find(|m| m.members.iter().any(|s| s.series_id == series_id))
            .ok_or_else(|| ApiError::not_found(format!("series {series_id:?} is not in any batch")))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub batch_id: String,
    pub template_id: TemplateId,
    pub member_count: usize,
    pub z_extent: usize,
    pub dims: [usize; 3],
}

async fn list_batches(State(s): State<AppState>) -> ApiResult<Json<Vec<BatchSummary>>> {
    blocking(move || {
        let batches = s.inner.data.list_batches().map_err(ApiError::internal)?;
        Ok(Json(
            batches
                .into_iter()
                .map(|m| BatchSummary {
                    batch_id: m.batch_id,
                    template_id: m.template_id,
                    member_count: m.members.len(),
                    z_extent: m.dims[2],
                    dims: m.dims,
                })
                .collect(),
        ))
    })
    .await
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Binary,
    Json,
}

#[derive(Debug, Deserialize)]
struct BatchSliceQuery {
    #[serde(default)]
    format: Format,
}

fn respond(payload: SlicePayload, format: Format) -> Response {
    match format {
        Format::Json => Json(payload.to_json()).into_response(),
        Format::Binary => (
            [(
                header::CONTENT_TYPE,
                HeaderValue::from_static("application/octet-stream"),
            )],
            payload.to_binary(),
        )
            .into_response(),
    }
}

fn check_z(z: usize, nz: usize) -> ApiResult<()> {
    if z >= nz {
        return Err(ApiError::bad_request(format!("z {z} outside 0..{nz}")));
    }
    Ok(())
}

/// Slice `z` of a `[x, y, z]` array, `x` fastest.
fn plane<T: Copy>(a: &ndarray::Array3<T>, z: usize) -> Vec<T> {
    let s = a.index_axis(ndarray::Axis(2), z);
    s.t().iter().copied().collect()
}

async fn batch_slice(
    State(s): State<AppState>,
    UrlPath((batch_id, z)): UrlPath<(String, usize)>,
    Query(q): Query<BatchSliceQuery>,
) -> ApiResult<Response> {
    blocking(move || {
        let b = s.batch(&batch_id)?;
        let [nx, ny, nz] = b.batch.grid().dims();
        check_z(z, nz)?;
        let payload = SlicePayload {
            meta: SliceMeta {
                batch_id: Some(batch_id),
                z,
                dims: [nx, ny],
                ..SliceMeta::default()
            },
            layers: vec![Layer {
                name: "counts",
                data: LayerData::U16(plane(b.batch.count_volume(), z)),
            }],
        };
        Ok(respond(payload, q.format))
    })
    .await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelMembers {
    pub batch_id: String,
    pub voxel: [usize; 3],
    pub series_ids: Vec<String>,
}

async fn batch_voxel(
    State(s): State<AppState>,
    UrlPath((batch_id, x, y, z)): UrlPath<(String, usize, usize, usize)>,
) -> ApiResult<Json<VoxelMembers>> {
    blocking(move || {
        let b = s.batch(&batch_id)?;
        let ids = b
            .batch
            .query_voxel(x, y, z)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(Json(VoxelMembers {
            voxel: [x, y, z],
            series_ids: ids.into_iter().map(str::to_string).collect(),
            batch_id,
        }))
    })
    .await
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesView {
    MaskOnTemplate,
    Registered,
}

impl std::str::FromStr for SeriesView {
    type Err = ApiError;

    fn from_str(s: &str) -> ApiResult<Self> {
        match s {
            "mask_on_template" => Ok(SeriesView::MaskOnTemplate),
            "registered" => Ok(SeriesView::Registered),
            _ => Err(ApiError::bad_request(format!(
                "unknown view {s:?}; expected mask_on_template or registered"
            ))),
        }
    }
}

#[derive(Debug, Deserialize)]
struct SeriesSliceQuery {
    view: Option<String>,
    window: Option<f64>,
    level: Option<f64>,
    #[serde(default)]
    format: Format,
}

/// Grey value in `0..=255` of `v` under a CT window.
pub fn apply_window(v: f32, window: f64, level: f64) -> u8 {
    let lo = level - window / 2.0;
    let g = ((v as f64 - lo) / window * 255.0).round();
    if g.is_nan() {
        0
    } else {
        g.clamp(0.0, 255.0) as u8
    }
}

/// Linear map of the volume's finite range onto `0..=255`.
fn greyscale(v: &Volume, z: usize) -> Vec<u8> {
    let (lo, hi) = v.finite_range().unwrap_or((0.0, 0.0));
    let span = (hi - lo) as f64;
    plane(v.data(), z)
        .into_iter()
        .map(|a| {
            if span <= 0.0 || !a.is_finite() {
                0
            } else {
                ((a - lo) as f64 / span * 255.0).round() as u8
            }
        })
        .collect()
}

async fn series_slice(
    State(s): State<AppState>,
    UrlPath((series_id, z)): UrlPath<(String, usize)>,
    Query(q): Query<SeriesSliceQuery>,
) -> ApiResult<Response> {
    let view: SeriesView = q.view.as_deref().unwrap_or("registered").parse()?;
    let window = q.window.unwrap_or(DEFAULT_WINDOW);
    let level = q.level.unwrap_or(DEFAULT_LEVEL);
    if !(window > 0.0 && window.is_finite() && level.is_finite()) {
        return Err(ApiError::bad_request(format!(
            "invalid window {window} / level {level}"
        )));
    }
    blocking(move || {
        let manifest = s.batch_of_series(&series_id)?;
        let member = manifest
            .members
            .iter()
            .find(|m| m.series_id == series_id)
            .expect("batch_of_series checked membership");
        let registered = s.volume(&s.inner.data.root().join(&member.registered))?;
        let [nx, ny, nz] = registered.dims();
        check_z(z, nz)?;
        let mut meta = SliceMeta {
            series_id: Some(series_id.clone()),
            batch_id: Some(manifest.batch_id.clone()),
            z,
            dims: [nx, ny],
            ..SliceMeta::default()
        };
        let layers = match view {
            SeriesView::Registered => {
                meta.view = Some("registered".into());
                meta.window = Some([window, level]);
                let grey = plane(registered.data(), z)
                    .into_iter()
                    .map(|a| apply_window(a, window, level))
                    .collect();
                vec![Layer {
                    name: "registered",
                    data: LayerData::U8(grey),
                }]
            }
            SeriesView::MaskOnTemplate => {
                meta.view = Some("mask_on_template".into());
                let mask = binarize(
                    &registered,
                    &ThresholdParams {
                        thresh: manifest.threshold_hu,
                    },
                );
                let template = s.volume(&s.inner.data.template_path(manifest.template_id))?;
                if template.dims() != registered.dims() {
                    return Err(ApiError::internal(format!(
                        "template {} and series {series_id} differ in shape",
                        manifest.template_id
                    )));
                }
                vec![
                    Layer {
                        name: "mask",
                        data: LayerData::U8(plane(mask.data(), z).into_iter().map(u8::from).collect()),
                    },
                    Layer {
                        name: "template",
                        data: LayerData::U8(greyscale(&template, z)),
                    },
                ]
            }
        };
        Ok(respond(SlicePayload { meta, layers }, q.format))
    })
    .await
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRequest {
    pub batch_id: String,
    pub series_id: String,
    pub voxel: [usize; 3],
    pub verdict: Verdict,
    #[serde(default)]
    pub comment: String,
    #[serde(default)]
    pub inspector: Option<String>,
}

async fn post_annotation(
    State(s): State<AppState>,
    body: Result<Json<AnnotationRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<AnnotationRecord>)> {
    if s.inner.read_only {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "the service is read-only"));
    }
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    blocking(move || {
        let b = s.batch(&req.batch_id)?;
        let log = s.inner.log.as_ref().expect("writable service has a log");
        // one writer at a time keeps the log and the in-memory state in the same order
        let mut state = s.inner.annotations.lock().unwrap_or_else(|p| p.into_inner());
        let record = record_annotation(
            log,
            &b.batch,
            &req.series_id,
            req.voxel,
            req.verdict,
            &req.comment,
            req.inspector.as_deref().unwrap_or("inspector"),
        )
        .map_err(|e| match e {
            CoreError::UnknownSeries { .. } => ApiError::not_found(e.to_string()),
            CoreError::VoxelOutOfBounds { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            other => ApiError::internal(other),
        })?;
        state.push(record.clone());
        log::info!(
            "{} {:?} {} in {}",
            record.inspector,
            record.verdict,
            record.series_id,
            record.batch_id
        );
        Ok((StatusCode::CREATED, Json(record)))
    })
    .await
}

async fn list_annotations(State(s): State<AppState>) -> Json<Vec<AnnotationRecord>> {
    Json(s.annotations())
}

fn cors(origin: Option<&str>) -> CorsLayer {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => layer.allow_origin(AllowOrigin::exact(o)),
        None => layer.allow_origin(Any),
    }
}

pub fn router(state: AppState) -> Router {
    let cors = cors(state.inner.cors_origin.as_deref());
    Router::new()
        .route("/batches", get(list_batches))
        .route("/batches/{id}/slice/{z}", get(batch_slice))
        .route("/batches/{id}/voxel/{x}/{y}/{z}", get(batch_voxel))
        .route("/series/{id}/slice/{z}", get(series_slice))
        .route("/annotations", get(list_annotations).post(post_annotation))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "serving {} on http://{}{}",
        state.data_dir().display(),
        listener.local_addr()?,
        if state.inner.read_only { " (read-only)" } else { "" }
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// Runs the service on a fresh multi-threaded runtime until interrupted.
pub fn serve_blocking(config: ServerConfig, addr: SocketAddr) -> Result<(), Box<dyn std::error::Error>> {
    let state = AppState::open(config)?;
    tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_maps_level_to_mid_grey() {
        assert_eq!(apply_window(40.0, 80.0, 40.0), 128);
        assert_eq!(apply_window(0.0, 80.0, 40.0), 0);
        assert_eq!(apply_window(80.0, 80.0, 40.0), 255);
        assert_eq!(apply_window(-1000.0, 80.0, 40.0), 0);
        assert_eq!(apply_window(f32::NAN, 80.0, 40.0), 0);
    }

    #[test]
    fn plane_is_x_fastest() {
        let a = ndarray::Array3::from_shape_fn((3, 2, 2), |(x, y, z)| (x + 10 * y + 100 * z) as u16);
        assert_eq!(plane(&a, 1), vec![100, 101, 102, 110, 111, 112]);
    }

    #[test]
    fn views_parse() {
        assert_eq!("registered".parse::<SeriesView>().unwrap(), SeriesView::Registered);
        assert!("axial".parse::<SeriesView>().is_err());
    }
}
