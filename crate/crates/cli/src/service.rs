//! HTTP API for the studio UI.
//!
//! | Method | Path                 | Body / result                                  |
//! |--------|----------------------|------------------------------------------------|
//! | GET    | `/api/health`        | `{status, preset}`                             |
//! | POST   | `/api/inpaint`       | `{image, mask, prompt, steps?, guidance?, w?, seed?, negative_prompt?}` → `{job_id}` |
//! | GET    | `/api/jobs/{id}`     | job record                                     |
//! | POST   | `/api/mask/simulate` | `{seg, kind, seed}` → `{mask, kind}`           |
//!
//! Images travel as base64 PNG. Jobs run one at a time on a dedicated
//! worker thread in submission order. The job table is in memory, keeps the
//! latest 100 jobs and is cleared on restart.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use painter_core::branch::PreservationScale;
use painter_core::maskgen::{gen_box_mask, gen_irregular_mask, sample_mask, MaskGenParams, MaskKind};
use painter_core::pipeline::{InpaintRequest, InpaintSettings, Inpainter, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use painter_core::raster::BinaryMask;
use painter_core::PainterError;

use crate::wire::{image_from_b64, image_to_b64, mask_from_b64, mask_to_b64};

pub const JOB_CAPACITY: usize = 100;
const BODY_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

/// Request parameters as stored with a job (images omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub settings: InpaintSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub image: String,
    pub seconds: f64,
    pub settings: InpaintSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub state: JobState,
    pub request: JobRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<JobResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Bounded job table; the oldest entry is dropped when full.
#[derive(Debug, Default)]
struct JobTable {
    order: VecDeque<String>,
    jobs: HashMap<String, Job>,
}

impl JobTable {
    fn insert(&mut self, job: Job) {
        while self.order.len() >= JOB_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.jobs.remove(&old);
            }
        }
        self.order.push_back(job.id.clone());
        self.jobs.insert(job.id.clone(), job);
    }

    fn update(&mut self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs.get_mut(id) {
            f(job);
        }
    }
}

struct Shared {
    preset: String,
    jobs: Mutex<JobTable>,
    queue: Mutex<mpsc::Sender<(String, InpaintRequest)>>,
    next_id: AtomicU64,
}

impl Shared {
    fn jobs(&self) -> MutexGuard<'_, JobTable> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// Start the single inference worker for `model`.
    pub fn new(model: Arc<dyn Inpainter>) -> Self {
        let (tx, rx) = mpsc::channel::<(String, InpaintRequest)>();
        let shared = Arc::new(Shared {
            preset: model.preset().to_owned(),
            jobs: Mutex::new(JobTable::default()),
            queue: Mutex::new(tx),
            next_id: AtomicU64::new(1),
        });
        let weak = Arc::downgrade(&shared);
        std::thread::Builder::new()
            .name("inpaint-worker".into())
            .spawn(move || {
                for (id, req) in rx {
                    let Some(shared) = weak.upgrade() else { break };
                    shared.jobs().update(&id, |j| j.state = JobState::Running);
                    log::info!("job {id} running");
                    let outcome = model.inpaint(&req).and_then(|res| {
                        Ok(JobResult {
                            image: image_to_b64(&res.image)?,
                            seconds: res.seconds,
                            settings: res.settings,
                        })
                    });
                    shared.jobs().update(&id, |j| match outcome {
                        Ok(r) => {
                            j.state = JobState::Done;
                            j.result = Some(r);
                        }
                        Err(e) => {
                            log::warn!("job {id} failed: {e}");
                            j.state = JobState::Failed;
                            j.error = Some(e.to_string());
                        }
                    });
                }
            })
            .expect("spawn worker thread");
        Self(shared)
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.0.jobs().jobs.get(id).cloned()
    }

    fn submit(&self, req: InpaintRequest) -> Result<String, ApiError> {
        let id = format!("job-{:06}", self.0.next_id.fetch_add(1, Ordering::Relaxed));
        let job = Job {
            id: id.clone(),
            state: JobState::Queued,
            request: JobRequest {
                width: req.image.width(),
                height: req.image.height(),
                settings: req.settings(),
            },
            result: None,
            error: None,
        };
        self.0.jobs().insert(job);
        self.0
            .queue
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .send((id.clone(), req))
            .map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, "inference worker has stopped".into()))?;
        Ok(id)
    }
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<PainterError> for ApiError {
    fn from(e: PainterError) -> Self {
        let code = match e {
            PainterError::EmptyMask => StatusCode::UNPROCESSABLE_ENTITY,
            PainterError::ModelNotLoaded(_) => StatusCode::SERVICE_UNAVAILABLE,
            PainterError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(code, e.to_string())
    }
}

#[derive(Debug, Deserialize)]
pub struct InpaintBody {
    pub image: String,
    pub mask: String,
    pub prompt: String,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
    pub w: Option<f64>,
    pub seed: Option<u64>,
    pub negative_prompt: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct SimulateBody {
    pub seg: String,
    pub kind: String,
    #[serde(default)]
    pub seed: u64,
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "preset": state.0.preset }))
}

async fn submit_inpaint(State(state): State<AppState>, Json(body): Json<InpaintBody>) -> Result<Json<serde_json::Value>, ApiError> {
    let image = image_from_b64(&body.image)?;
    let mask = mask_from_b64(&body.mask)?;
    let mut req = InpaintRequest::new(image, mask, body.prompt);
    req.steps = body.steps.unwrap_or(DEFAULT_STEPS);
    req.guidance = body.guidance.unwrap_or(DEFAULT_GUIDANCE);
    req.w = PreservationScale::new(body.w.unwrap_or(1.0))?;
    req.seed = body.seed.unwrap_or(0);
    req.negative_prompt = body.negative_prompt.unwrap_or_default();
    req.validate()?;
    let id = state.submit(req)?;
    Ok(Json(json!({ "job_id": id })))
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Job>, ApiError> {
    state
        .job(&id)
        .map(Json)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no job `{id}`")))
}

/// Mask generation by name: `box`, `irr`, `seg` or `mix` (a random kind
/// drawn with the training mixture).
pub fn generate_mask(seg: &BinaryMask, kind: &str, seed: u64) -> painter_core::Result<(BinaryMask, MaskKind)> {
    let params = MaskGenParams { seed, ..Default::default() };
    let mut rng = params.rng();
    match kind.to_ascii_lowercase().as_str() {
        "box" => Ok((gen_box_mask(seg, &params, &mut rng)?, MaskKind::Box)),
        "irr" => Ok((gen_irregular_mask(seg, &params, &mut rng)?, MaskKind::Irr)),
        "seg" if seg.is_empty() => Err(PainterError::EmptyMask),
        "seg" => Ok((seg.clone(), MaskKind::Seg)),
        "mix" => {
            let k: f64 = rng.random();
            sample_mask(seg, k, &params, &mut rng)
        }
        other => Err(PainterError::domain(format!("kind must be box, irr, seg or mix, not `{other}`"))),
    }
}

async fn simulate(Json(body): Json<SimulateBody>) -> Result<Json<serde_json::Value>, ApiError> {
    let seg = mask_from_b64(&body.seg)?;
    let (mask, kind) = generate_mask(&seg, &body.kind, body.seed)?;
    Ok(Json(json!({ "mask": mask_to_b64(&mask)?, "kind": kind })))
}

/// The API router, optionally serving static UI assets for other paths.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/inpaint", post(submit_inpaint))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/mask/simulate", post(simulate))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Bind and serve until ctrl-c.
pub async fn serve(model: Arc<dyn Inpainter>, addr: std::net::SocketAddr, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let app = router(AppState::new(model), static_dir);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
