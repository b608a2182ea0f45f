//! REST service for the annotation loop: list target studies, fetch slices,
//! store extreme-point clicks and run point-conditioned inference.
//!
//! Routes:
//!
//! * `GET /healthz`
//! * `GET /studies`
//! * `GET /studies/{id}/slices/{axis}/{index}` (PNG)
//! * `GET /studies/{id}/extreme-points`
//! * `PUT /studies/{id}/extreme-points`
//! * `POST /studies/{id}/infer`
//!
//! Annotations live in `<data-dir>/annotations/` as `<id>.json` (the point-set
//! schema) plus `<id>.meta.json` (status, annotator, timestamps).

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};
use crate::extreme::{mxa, Axis, ExtremePointSet, PointSetPayload, PointSource, Slot};
use crate::rle::RleMask;
use crate::trainer::{infer, AccessContext, DataAccess, Trainer};
use crate::volume::{binarize, resample_mask, window_normalize, Shape3, Spacing3, Volume};

pub const ANNOTATION_DIR: &str = "annotations";
pub const DEFAULT_ANNOTATOR: &str = "anonymous";
pub const ANNOTATOR_HEADER: &str = "x-annotator";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStatus {
    None,
    InProgress,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMeta {
    pub study_id: String,
    pub annotator: String,
    pub status: AnnotationStatus,
    pub created_at: String,
    pub updated_at: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(flatten)]
    pub meta: AnnotationMeta,
    pub points: PointSetPayload,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: String,
    pub shape: Shape3,
    pub spacing_mm: Spacing3,
    pub status: AnnotationStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub study_id: String,
    pub mask: RleMask,
    /// Heatmaps came from stored clicks or from the heatmap network.
    pub heatmap_source: PointSource,
    /// MXA of the returned mask against the stored points; absent without
    /// points or for an empty mask.
    pub mxa_mm: Option<f64>,
    pub empty: bool,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub trace_id: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            trace_id: None,
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn unprocessable(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, msg)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        let id = format!("trace-{:08x}", NEXT.fetch_add(1, Ordering::Relaxed));
        log::error!("{id}: {e}");
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
            trace_id: Some(id),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message, "trace_id": self.trace_id });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct StudyEntry {
    volume: PathBuf,
    /// Points shipped with the corpus, used when nothing was annotated.
    corpus_ps: Option<PathBuf>,
}

pub struct ServiceState {
    data_dir: PathBuf,
    studies: HashMap<String, StudyEntry>,
    order: Vec<String>,
    trainer: Option<Mutex<Trainer>>,
    window: (f32, f32),
    volumes: Mutex<HashMap<String, Arc<Volume>>>,
    write_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    access: DataAccess,
}

impl ServiceState {
    /// Open `<data_dir>/manifest.json` and optionally a checkpoint.
    pub fn open(data_dir: &Path, ckpt: Option<&Path>) -> Result<Self> {
        let manifest = CorpusManifest::load(&data_dir.join("manifest.json"))?;
        let trainer = ckpt.map(Trainer::load).transpose()?;
        Self::from_parts(data_dir, &manifest, trainer)
    }

    pub fn from_parts(data_dir: &Path, manifest: &CorpusManifest, trainer: Option<Trainer>) -> Result<Self> {
        let ann = data_dir.join(ANNOTATION_DIR);
        fs::create_dir_all(&ann).map_err(|e| Error::io(&ann, e))?;
        let mut studies = HashMap::new();
        for s in &manifest.target_ps_studies {
            studies.insert(
                s.study_id.clone(),
                StudyEntry {
                    volume: manifest.resolve(&s.volume),
                    corpus_ps: Some(manifest.resolve(&s.ps)),
                },
            );
        }
        for s in &manifest.target_unlabelled_studies {
            studies.insert(
                s.study_id.clone(),
                StudyEntry {
                    volume: manifest.resolve(&s.volume),
                    corpus_ps: None,
                },
            );
        }
        let mut order: Vec<String> = studies.keys().cloned().collect();
        order.sort();
        Ok(Self {
            data_dir: data_dir.to_path_buf(),
            studies,
            order,
            window: trainer
                .as_ref()
                .map_or(crate::phantom::DEFAULT_WINDOW_HU, |t| t.config.window_hu),
            trainer: trainer.map(Mutex::new),
            volumes: Mutex::new(HashMap::new()),
            write_locks: Mutex::new(HashMap::new()),
            access: DataAccess::untracked(AccessContext::Service),
        })
    }

    fn entry(&self, id: &str) -> ApiResult<&StudyEntry> {
        self.studies
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown study {id}")))
    }

    fn volume(&self, id: &str) -> ApiResult<Arc<Volume>> {
        let entry = self.entry(id)?;
        if let Some(v) = self.volumes.lock().expect("volume cache").get(id) {
            return Ok(v.clone());
        }
        let v = Arc::new(self.access.volume(&entry.volume, id).map_err(ApiError::internal)?);
        self.volumes.lock().expect("volume cache").insert(id.to_string(), v.clone());
        Ok(v)
    }

    fn points_path(&self, id: &str) -> PathBuf {
        self.data_dir.join(ANNOTATION_DIR).join(format!("{id}.json"))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.data_dir.join(ANNOTATION_DIR).join(format!("{id}.meta.json"))
    }

    /// Stored annotation, falling back to the corpus point set.
    fn annotation(&self, id: &str) -> ApiResult<Option<AnnotationRecord>> {
        let entry = self.entry(id)?;
        let pp = self.points_path(id);
        if pp.exists() {
            let text = fs::read_to_string(&pp).map_err(|e| ApiError::internal(Error::io(&pp, e)))?;
            let points: PointSetPayload = serde_json::from_str(&text).map_err(ApiError::internal)?;
            let mp = self.meta_path(id);
            let text = fs::read_to_string(&mp).map_err(|e| ApiError::internal(Error::io(&mp, e)))?;
            let meta: AnnotationMeta = serde_json::from_str(&text).map_err(ApiError::internal)?;
            return Ok(Some(AnnotationRecord { meta, points }));
        }
        if let Some(ps) = &entry.corpus_ps {
            let set = self.access.points(ps).map_err(ApiError::internal)?;
            let stamp = fs::metadata(ps)
                .and_then(|m| m.modified())
                .map(|t| chrono::DateTime::<chrono::Utc>::from(t).to_rfc3339())
                .unwrap_or_default();
            return Ok(Some(AnnotationRecord {
                meta: AnnotationMeta {
                    study_id: id.to_string(),
                    annotator: "corpus".to_string(),
                    status: AnnotationStatus::Complete,
                    created_at: stamp.clone(),
                    updated_at: stamp,
                },
                points: set.to_payload(),
            }));
        }
        Ok(None)
    }

    fn write_lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.write_locks
            .lock()
            .expect("lock table")
            .entry(id.to_string())
            .or_default()
            .clone()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Canonical bytes of a point payload: slot order, pretty JSON.
fn canonical(mut p: PointSetPayload) -> Result<(PointSetPayload, String)> {
    if p.points.len() == 6 {
        let set = ExtremePointSet::try_from(p.clone())?;
        return Ok((set.to_payload(), set.to_json()?));
    }
    p.points.sort_by_key(|pt| pt.slot().index());
    let json = serde_json::to_string_pretty(&p)?;
    Ok((p, json))
}

async fn healthz(State(s): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "checkpoint_loaded": s.trainer.is_some() }))
}

async fn list_studies(State(s): State<Arc<ServiceState>>) -> ApiResult<Json<Vec<StudySummary>>> {
    let out = tokio::task::spawn_blocking(move || -> ApiResult<Vec<StudySummary>> {
        s.order
            .iter()
            .map(|id| {
                let v = s.volume(id)?;
                let status = s.annotation(id)?.map_or(AnnotationStatus::None, |r| r.meta.status);
                Ok(StudySummary {
                    study_id: id.clone(),
                    shape: v.shape(),
                    spacing_mm: v.spacing_mm,
                    status,
                })
            })
            .collect()
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(out))
}

/// Windowed 8-bit slice: `x` slices are (y, z) images, `y` slices (x, z),
/// `z` slices (x, y); the first listed axis runs along image columns.
pub fn slice_png(v: &Volume, axis: Axis, index: usize, window: (f32, f32)) -> Result<Vec<u8>> {
    let shape = v.shape();
    if index >= shape[axis.index()] {
        return Err(Error::invalid(format!("index {index} outside axis {axis} of {shape:?}")));
    }
    let w = window_normalize(v, window.0, window.1)?;
    let (cols, rows) = match axis {
        Axis::X => (shape[1], shape[2]),
        Axis::Y => (shape[0], shape[2]),
        Axis::Z => (shape[0], shape[1]),
    };
    let img = image::GrayImage::from_fn(cols as u32, rows as u32, |c, r| {
        let (c, r) = (c as usize, r as usize);
        let ijk = match axis {
            Axis::X => [index, c, r],
            Axis::Y => [c, index, r],
            Axis::Z => [c, r, index],
        };
        image::Luma([to_u8(w.voxels[ijk])])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("PNG encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

/// `[0, 1]` to `[0, 255]`, halves rounded up.
pub fn to_u8(x: f32) -> u8 {
    (x as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

async fn get_slice(
    State(s): State<Arc<ServiceState>>,
    UrlPath((id, axis, index)): UrlPath<(String, String, usize)>,
) -> ApiResult<Response> {
    let axis = Axis::parse(&axis).ok_or_else(|| ApiError::not_found(format!("unknown axis {axis}")))?;
    let window = s.window;
    let png = tokio::task::spawn_blocking(move || -> ApiResult<Vec<u8>> {
        let v = s.volume(&id)?;
        if index >= v.shape()[axis.index()] {
            return Err(ApiError::not_found(format!("slice {index} outside axis {axis}")));
        }
        slice_png(&v, axis, index, window).map_err(ApiError::internal)
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_points(State(s): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<AnnotationRecord>> {
    tokio::task::spawn_blocking(move || s.annotation(&id)?.ok_or_else(|| ApiError::not_found(format!("no annotation for {id}"))))
        .await
        .map_err(ApiError::internal)?
        .map(Json)
}

async fn put_points(
    State(s): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    Json(payload): Json<PointSetPayload>,
) -> ApiResult<Json<AnnotationRecord>> {
    let annotator = headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or(DEFAULT_ANNOTATOR)
        .to_string();
    tokio::task::spawn_blocking(move || store_points(&s, &id, payload, annotator))
        .await
        .map_err(ApiError::internal)?
        .map(Json)
}

fn store_points(s: &ServiceState, id: &str, payload: PointSetPayload, annotator: String) -> ApiResult<AnnotationRecord> {
    let v = s.volume(id)?;
    if payload.study_id != id {
        return Err(ApiError::unprocessable(format!(
            "payload study id {:?} does not match {id:?}",
            payload.study_id
        )));
    }
    if payload.source != PointSource::HumanClick {
        return Err(ApiError::unprocessable("annotations must have source human_click"));
    }
    if payload.points.is_empty() {
        return Err(ApiError::unprocessable("an annotation needs at least one point"));
    }
    if (0..3).any(|a| (payload.spacing_mm[a] - v.spacing_mm[a]).abs() > 1e-6 * v.spacing_mm[a]) {
        return Err(ApiError::unprocessable(format!(
            "spacing {:?} differs from the volume's {:?}",
            payload.spacing_mm, v.spacing_mm
        )));
    }
    payload
        .validate(Some(v.shape()))
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let (points, json) = canonical(payload).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let status = if points.points.len() == Slot::ALL.len() {
        AnnotationStatus::Complete
    } else {
        AnnotationStatus::InProgress
    };

    let lock = s.write_lock(id);
    let _guard = lock.lock().expect("study lock");
    let pp = s.points_path(id);
    let mp = s.meta_path(id);
    let previous = if pp.exists() && mp.exists() {
        let old = fs::read_to_string(&pp).map_err(|e| ApiError::internal(Error::io(&pp, e)))?;
        let meta: AnnotationMeta = serde_json::from_str(
            &fs::read_to_string(&mp).map_err(|e| ApiError::internal(Error::io(&mp, e)))?,
        )
        .map_err(ApiError::internal)?;
        Some((old, meta))
    } else {
        None
    };
    if let Some((old, meta)) = &previous {
        if *old == json && meta.annotator == annotator {
            return Ok(AnnotationRecord {
                meta: meta.clone(),
                points,
            });
        }
    }
    let now = chrono::Utc::now().to_rfc3339();
    let meta = AnnotationMeta {
        study_id: id.to_string(),
        annotator,
        status,
        created_at: previous.map_or_else(|| now.clone(), |(_, m)| m.created_at),
        updated_at: now,
    };
    write_atomic(&pp, json.as_bytes()).map_err(ApiError::internal)?;
    let meta_json = serde_json::to_string_pretty(&meta).map_err(ApiError::internal)?;
    write_atomic(&mp, meta_json.as_bytes()).map_err(ApiError::internal)?;
    Ok(AnnotationRecord { meta, points })
}

async fn post_infer(State(s): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<InferResponse>> {
    if s.trainer.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"));
    }
    tokio::task::spawn_blocking(move || run_inference(&s, &id))
        .await
        .map_err(ApiError::internal)?
        .map(Json)
}

/// Segment a study: stored clicks condition the network when complete,
/// otherwise the heatmap network supplies the heatmaps.
pub fn run_inference(s: &ServiceState, id: &str) -> ApiResult<InferResponse> {
    let Some(trainer) = s.trainer.as_ref() else {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"));
    };
    let v = s.volume(id)?;
    let points = match s.annotation(id)? {
        Some(r) if r.meta.status == AnnotationStatus::Complete => {
            Some(ExtremePointSet::try_from(r.points).map_err(ApiError::internal)?)
        }
        Some(_) => return Err(ApiError::unprocessable("annotation is incomplete; inference needs all six points")),
        None => None,
    };
    let trainer = trainer.lock().expect("model");
    if trainer.models.h.is_none() && points.is_none() {
        return Err(ApiError::unprocessable("this checkpoint needs extreme points for inference"));
    }
    let inf = infer(&trainer, &v, points.as_ref()).map_err(ApiError::internal)?;
    let model_mask = binarize(&inf.prob_model, trainer.config.threshold).map_err(ApiError::internal)?;
    drop(trainer);
    let mut mask = resample_mask(&model_mask, v.shape()).map_err(ApiError::internal)?;
    mask.spacing_mm = v.spacing_mm;
    mask.study_id = id.to_string();
    let empty = mask.is_empty();
    let mxa_mm = match (&points, empty) {
        (Some(p), false) => Some(mxa(&mask, p).map_err(ApiError::internal)?),
        _ => None,
    };
    Ok(InferResponse {
        study_id: id.to_string(),
        mask: RleMask::encode(&mask),
        heatmap_source: inf.heat_source,
        mxa_mm,
        empty,
    })
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/studies", get(list_studies))
        .route("/studies/{id}/slices/{axis}/{index}", get(get_slice))
        .route("/studies/{id}/extreme-points", get(get_points).put(put_points))
        .route("/studies/{id}/infer", post(post_infer))
        .with_state(state)
}

/// Serve on `0.0.0.0:port` until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, port: u16) -> Result<()> {
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("0.0.0.0:{port}"), e))?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io("server", e))
}
