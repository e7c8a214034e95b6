//! HTTP/JSON service over one trained model and its dataset.
//!
//! Handlers share the immutable model; generation runs on the blocking pool
//! behind a semaphore, and results are cached by a content hash of the
//! request so retries are idempotent.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use latentcf_api as api;
use latentcf_core::agent::{OutcomeVariable, OutcomeVector};
use latentcf_core::counterfactual::{generate, CFMethod, CFQuery, CFResult, CaseLibrary, GeneratorConfig, OutcomeSource};
use latentcf_core::dataset::{decode_observation, FeatureSchema, FeatureTensor, TrajectoryDataset};
use latentcf_core::envs::Observation;
use latentcf_core::experiments::{epsilon_for, EpsilonPolicy};
use latentcf_core::jvae::{JointVae, LatentPoint, TrainMode};
use latentcf_core::measures::{AnomalyThreshold, Sign, ValiditySpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{message}")]
    NotFound { code: &'static str, message: String },
    #[error("{message}")]
    InvalidSpec {
        message: String,
        detail: Option<serde_json::Value>,
    },
    #[error("{message}")]
    GenerationFailed {
        code: &'static str,
        message: String,
        detail: Option<serde_json::Value>,
    },
    #[error("{0}")]
    BadRequest(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("invalid port setting: {0}")]
    Port(String),
}

impl ServiceError {
    fn invalid(message: impl Into<String>) -> Self {
        ServiceError::InvalidSpec {
            message: message.into(),
            detail: None,
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound { .. } => StatusCode::NOT_FOUND,
            ServiceError::InvalidSpec { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::GenerationFailed { .. } => StatusCode::CONFLICT,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) | ServiceError::Port(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn body(&self) -> api::ApiError {
        let (code, detail) = match self {
            ServiceError::NotFound { code, .. } => (*code, None),
            ServiceError::InvalidSpec { detail, .. } => ("invalid-spec", detail.clone()),
            ServiceError::GenerationFailed { code, detail, .. } => (*code, detail.clone()),
            ServiceError::BadRequest(_) => ("bad-request", None),
            ServiceError::Internal(_) | ServiceError::Port(_) => ("internal", None),
        };
        api::ApiError {
            code: code.to_string(),
            message: self.to_string(),
            detail,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if let ServiceError::Internal(m) = &self {
            tracing::error!(error = %m, "request failed");
        }
        (self.status(), Json(self.body())).into_response()
    }
}

impl From<JsonRejection> for ServiceError {
    fn from(r: JsonRejection) -> Self {
        ServiceError::InvalidSpec {
            message: format!("malformed request body: {}", r.body_text()),
            detail: None,
        }
    }
}

impl From<QueryRejection> for ServiceError {
    fn from(r: QueryRejection) -> Self {
        ServiceError::BadRequest(r.body_text())
    }
}

/// Reads the port from [`api::PORT_ENV`], falling back to the default.
pub fn port_from_env() -> Result<u16, ServiceError> {
    match std::env::var(api::PORT_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| ServiceError::Port(format!("{}='{v}' is not a port", api::PORT_ENV))),
        Err(std::env::VarError::NotPresent) => Ok(api::DEFAULT_PORT),
        Err(e) => Err(ServiceError::Port(e.to_string())),
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub generator: GeneratorConfig,
    pub epsilon: EpsilonPolicy,
    /// Generations allowed to run at once.
    pub max_concurrent: usize,
    pub threshold: Option<AnomalyThreshold>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            epsilon: EpsilonPolicy::default(),
            max_concurrent: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            threshold: None,
        }
    }
}

struct StoredResult {
    response: api::CounterfactualResponse,
    path: Vec<LatentPoint>,
}

pub struct ServiceState {
    model: JointVae,
    data: TrajectoryDataset,
    library: CaseLibrary,
    config: ServiceConfig,
    digest: String,
    cache: Mutex<HashMap<String, Arc<StoredResult>>>,
    permits: Semaphore,
}

pub type SharedState = Arc<ServiceState>;

impl ServiceState {
    pub fn new(model: JointVae, data: TrajectoryDataset, config: ServiceConfig) -> Result<SharedState, ServiceError> {
        if model.schema != data.schema {
            return Err(ServiceError::Internal("model and dataset schemas differ".into()));
        }
        let library = CaseLibrary::from_training_split(&data).map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(Arc::new(Self {
            digest: model.weight_digest(),
            permits: Semaphore::new(config.max_concurrent.max(1)),
            model,
            data,
            library,
            config,
            cache: Mutex::new(HashMap::new()),
        }))
    }

    pub fn cached_results(&self) -> usize {
        self.cache.lock().map(|c| c.len()).unwrap_or(0)
    }
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/frames", get(list_frames))
        .route("/api/frames/{id}", get(frame_detail))
        .route("/api/counterfactual", post(counterfactual))
        .route("/api/path/{result_id}/{step}", get(path_step))
        .with_state(state)
}

/// Serves until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: SharedState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

fn outcomes(y: &OutcomeVector) -> api::Outcomes {
    api::Outcomes {
        value: y.value,
        confidence: y.confidence,
        riskiness: y.riskiness,
    }
}

fn sign_to_api(s: Sign) -> api::Sign {
    match s {
        Sign::Positive => api::Sign::Positive,
        Sign::Negative => api::Sign::Negative,
    }
}

fn sign_from_api(s: api::Sign) -> Sign {
    match s {
        api::Sign::Positive => Sign::Positive,
        api::Sign::Negative => Sign::Negative,
    }
}

pub fn observation_view(obs: &Observation, schema: &FeatureSchema) -> api::ObservationView {
    match obs {
        Observation::Grid {
            width,
            kinds,
            strengths,
            ..
        } => api::ObservationView::Grid {
            kinds: kinds.chunks(*width).map(|r| r.to_vec()).collect(),
            strengths: strengths.chunks(*width).map(|r| r.to_vec()).collect(),
        },
        Observation::Vector { values } => api::ObservationView::Vector {
            names: schema.numeric.iter().map(|c| c.name.clone()).collect(),
            values: values.clone(),
        },
    }
}

fn view_of(t: &FeatureTensor, schema: &FeatureSchema) -> Result<api::ObservationView, ServiceError> {
    let obs = decode_observation(t, schema).map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(observation_view(&obs, schema))
}

fn split_name(state: &ServiceState, id: usize) -> String {
    if state.data.is_train(id) { "train" } else { "test" }.to_string()
}

async fn model_info(State(state): State<SharedState>) -> Json<api::ModelInfo> {
    let schema = &state.model.schema;
    Json(api::ModelInfo {
        env: schema.env.to_string(),
        height: schema.height,
        width: schema.width,
        legend: schema.categorical.first().map(|l| l.vocabulary.clone()).unwrap_or_default(),
        numeric: schema
            .numeric
            .iter()
            .map(|c| api::NumericInfo {
                name: c.name.clone(),
                min: c.min,
                max: c.max,
                width: c.width,
            })
            .collect(),
        outcome_variables: OutcomeVariable::ALL.iter().map(|v| v.name().to_string()).collect(),
        methods: CFMethod::ALL.iter().map(|m| m.name().to_string()).collect(),
        latent_dim: state.model.latent_dim(),
        mode: match state.model.mode() {
            TrainMode::Joint => "joint",
            TrainMode::ReconOnly => "recon-only",
        }
        .to_string(),
        model_digest: state.digest.clone(),
        frame_count: state.data.frames.len(),
        anomaly_threshold: state.config.threshold.map(|t| t.threshold),
    })
}

#[derive(Debug, Deserialize, Serialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn list_frames(
    State(state): State<SharedState>,
    q: Result<Query<PageQuery>, QueryRejection>,
) -> Result<Json<api::FramePage>, ServiceError> {
    let Query(q) = q?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
    let total = state.data.frames.len();
    let frames = (offset.min(total)..(offset.saturating_add(limit)).min(total))
        .map(|id| {
            let f = &state.data.frames[id];
            api::FrameSummary {
                id,
                episode: f.episode,
                step: f.step,
                split: split_name(&state, id),
                outcome: outcomes(&f.outcome),
            }
        })
        .collect();
    Ok(Json(api::FramePage {
        offset,
        limit,
        total,
        frames,
    }))
}

fn unknown_frame(id: usize, total: usize) -> ServiceError {
    ServiceError::NotFound {
        code: "unknown-frame",
        message: format!("frame {id} does not exist ({total} frames)"),
    }
}

async fn frame_detail(State(state): State<SharedState>, Path(id): Path<usize>) -> Result<Json<api::FrameDetail>, ServiceError> {
    let f = state
        .data
        .frames
        .get(id)
        .ok_or_else(|| unknown_frame(id, state.data.frames.len()))?;
    Ok(Json(api::FrameDetail {
        id,
        episode: f.episode,
        step: f.step,
        split: split_name(&state, id),
        action: f.action,
        reward: f.reward,
        outcome: outcomes(&f.outcome),
        raw_outcome: outcomes(&f.raw_outcome),
        observation: view_of(&f.features, &state.data.schema)?,
    }))
}

fn resolve_generator(base: &GeneratorConfig, p: Option<&api::GenerationParams>) -> Result<GeneratorConfig, ServiceError> {
    let mut g = *base;
    if let Some(p) = p {
        g.n_alphas = p.n_alphas.unwrap_or(g.n_alphas);
        g.lambda_points = p.lambda_points.unwrap_or(g.lambda_points);
        g.lambda_max = p.lambda_max.unwrap_or(g.lambda_max);
        g.lambda1 = p.lambda1.unwrap_or(g.lambda1);
        g.lambda2 = p.lambda2.unwrap_or(g.lambda2);
        g.max_steps = p.max_steps.unwrap_or(g.max_steps);
        g.plausibility = p.plausibility.unwrap_or(g.plausibility);
    }
    g.validate().map_err(|e| ServiceError::invalid(e.to_string()))?;
    Ok(g)
}

/// Hex sha256 over the canonical request content and the model digest.
fn result_id(frame: usize, spec: &ValiditySpec, method: CFMethod, generator: &GeneratorConfig, digest: &str) -> String {
    let key = serde_json::json!({
        "frame": frame,
        "variable": spec.variable,
        "sign": spec.sign.value(),
        "epsilon": spec.epsilon,
        "method": method.name(),
        "generator": generator,
        "model": digest,
    });
    let mut h = Sha256::new();
    h.update(key.to_string().as_bytes());
    hex::encode(&h.finalize()[..16])
}

fn build_response(
    state: &ServiceState,
    id: String,
    frame: usize,
    query: &CFQuery,
    r: &CFResult,
) -> Result<api::CounterfactualResponse, ServiceError> {
    let schema = &state.data.schema;
    let qv = view_of(&query.x_q, schema)?;
    let cv = view_of(&r.x_c, schema)?;
    let diff_mask = qv.diff_mask(&cv).unwrap_or_default();
    Ok(api::CounterfactualResponse {
        result_id: id,
        frame_id: frame,
        method: r.method.name().to_string(),
        variable: query.spec.variable.name().to_string(),
        sign: sign_to_api(query.spec.sign),
        epsilon: query.spec.epsilon,
        valid: r.valid,
        degenerate: r.degenerate,
        outcome_source: match r.outcome_source {
            OutcomeSource::Stored => "stored",
            OutcomeSource::Predicted => "predicted",
        }
        .to_string(),
        steps: r.steps,
        alpha: r.alpha,
        lambda: r.lambda,
        y_q: outcomes(&query.y_q),
        y_c: outcomes(&r.y_c),
        query: qv,
        counterfactual: cv,
        diff_mask,
        quality: api::Quality {
            odiff: r.quality.odiff,
            anomaly: r.quality.anomaly,
            anomalous: state.config.threshold.map(|t| t.is_anomalous(r.quality.anomaly)),
        },
        path_outcomes: r.path_outcomes.iter().map(outcomes).collect(),
        nun_frame: r.nun_frame,
        note: r.note.clone(),
    })
}

/// Validates the request and runs the generator synchronously.
fn run_generation(state: &ServiceState, req: &api::CounterfactualRequest) -> Result<Arc<StoredResult>, ServiceError> {
    let total = state.data.frames.len();
    let frame = state.data.frames.get(req.frame_id).ok_or_else(|| unknown_frame(req.frame_id, total))?;
    let variable: OutcomeVariable = req.variable.parse().map_err(ServiceError::invalid)?;
    let method: CFMethod = req.method.parse().map_err(ServiceError::invalid)?;
    let epsilon = match req.epsilon {
        Some(e) => e,
        None => epsilon_for(&state.data, variable, &state.config.epsilon).map_err(|e| ServiceError::invalid(e.to_string()))?,
    };
    let spec = ValiditySpec::numeric(variable, sign_from_api(req.sign), epsilon).map_err(|e| ServiceError::invalid(e.to_string()))?;
    let y = frame.outcome.get(variable);
    let target = y + spec.sign.value() * epsilon;
    if !(-1.0..=1.0).contains(&target) {
        return Err(ServiceError::InvalidSpec {
            message: format!(
                "no room for a {} change of {epsilon:.3} in {variable}: query value {y:.3} would need {target:.3}, outside [-1, 1]",
                spec.sign
            ),
            detail: Some(serde_json::json!({ "y_q": y, "epsilon": epsilon, "target": target })),
        });
    }
    let generator = resolve_generator(&state.config.generator, req.params.as_ref())?;
    let id = result_id(req.frame_id, &spec, method, &generator, &state.digest);
    if let Some(hit) = state.cache.lock().map_err(|_| ServiceError::Internal("cache poisoned".into()))?.get(&id) {
        return Ok(hit.clone());
    }
    let query = CFQuery {
        frame: Some(req.frame_id),
        x_q: frame.features.clone(),
        y_q: frame.outcome,
        spec,
    };
    let result = match generate(&state.model, &query, &state.library, method, &generator) {
        Ok(Some(r)) => r,
        Ok(None) => {
            return Err(ServiceError::GenerationFailed {
                code: "nun-not-found",
                message: format!("no training frame has {variable} changed by {} at least {epsilon:.3}", spec.sign),
                detail: None,
            })
        }
        Err(latentcf_core::Error::Traversal { step, reason, .. }) => {
            return Err(ServiceError::GenerationFailed {
                code: "traversal-failed",
                message: format!("traversal failed at step {step}: {reason}"),
                detail: Some(serde_json::json!({ "step": step })),
            })
        }
        Err(e) => return Err(ServiceError::Internal(e.to_string())),
    };
    let stored = Arc::new(StoredResult {
        response: build_response(state, id.clone(), req.frame_id, &query, &result)?,
        path: result.path,
    });
    state
        .cache
        .lock()
        .map_err(|_| ServiceError::Internal("cache poisoned".into()))?
        .insert(id, stored.clone());
    Ok(stored)
}

/// Runs one request on the calling thread, sharing the cache. Used by the
/// CLI when no server is involved.
pub fn generate_blocking(state: &ServiceState, req: &api::CounterfactualRequest) -> Result<api::CounterfactualResponse, ServiceError> {
    Ok(run_generation(state, req)?.response.clone())
}

async fn counterfactual(
    State(state): State<SharedState>,
    body: Result<Json<api::CounterfactualRequest>, JsonRejection>,
) -> Result<Json<api::CounterfactualResponse>, ServiceError> {
    let Json(req) = body?;
    let _permit = state
        .permits
        .acquire()
        .await
        .map_err(|_| ServiceError::Internal("worker pool closed".into()))?;
    let st = state.clone();
    let stored = tokio::task::spawn_blocking(move || run_generation(&st, &req))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(stored.response.clone()))
}

async fn path_step(
    State(state): State<SharedState>,
    Path((result_id, step)): Path<(String, usize)>,
) -> Result<Json<api::PathStep>, ServiceError> {
    let stored = state
        .cache
        .lock()
        .map_err(|_| ServiceError::Internal("cache poisoned".into()))?
        .get(&result_id)
        .cloned()
        .ok_or_else(|| ServiceError::NotFound {
            code: "unknown-result",
            message: format!("no cached result '{result_id}'"),
        })?;
    let z = stored.path.get(step).ok_or_else(|| ServiceError::NotFound {
        code: "unknown-step",
        message: format!("step {step} is past the end of a {}-point path", stored.path.len()),
    })?;
    let st = state.clone();
    let z = z.clone();
    let (observation, outcome) = tokio::task::spawn_blocking(move || -> Result<_, ServiceError> {
        let x = st.model.decode_projected(&z).map_err(|e| ServiceError::Internal(e.to_string()))?;
        let y = st.model.predict_outcomes(&z).map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok((view_of(&x, &st.data.schema)?, outcomes(&y)))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(api::PathStep {
        result_id,
        step,
        latent: stored.path[step].0.clone(),
        outcome,
        observation,
    }))
}
