use crate::hub::{CategoryEntry, Hub, Phase};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::Json;
use loopid_core::annotation::{AnnotationError, LabelOutcome, QueueCounts, TaskId, TaskStatus, Verdict};
use loopid_core::pipeline::{period_dir, REPORT_FILE};
use loopid_core::{CategoryId, SampleId, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::sync::Arc;

const DEFAULT_ANNOTATOR: &str = "console";
const MAX_CLAIM: usize = 200;

pub(crate) type AppState = Arc<Hub>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: None,
        }
    }

    fn no_session() -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "no_active_period",
            "no period is open for annotation",
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({ "code": self.code, "message": self.message });
        if let Some(d) = self.detail {
            error["detail"] = d;
        }
        (
            self.status,
            Json(json!({ "schema_version": SCHEMA_VERSION, "error": error })),
        )
            .into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let (status, code) = match &e {
            AnnotationError::UnknownTask(_) | AnnotationError::NotInBatch(_) => (StatusCode::NOT_FOUND, "not_found"),
            AnnotationError::Immutable { .. } | AnnotationError::AlreadyLabeled { .. } => {
                (StatusCode::CONFLICT, "immutable")
            }
            AnnotationError::Claimed { .. } => (StatusCode::CONFLICT, "claimed_by_other"),
            AnnotationError::VerdictConflict { .. } => (StatusCode::CONFLICT, "verdict_conflict"),
            AnnotationError::Expired { .. } => (StatusCode::GONE, "expired"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Rejects `/api` requests without the configured bearer token.
pub(crate) async fn require_token(State(hub): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &hub.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

fn annotator_id(headers: &HeaderMap, explicit: Option<String>) -> String {
    explicit
        .or_else(|| {
            headers
                .get("x-annotator")
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        })
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| DEFAULT_ANNOTATOR.into())
}

#[derive(Serialize)]
pub struct TaskView {
    pub task_id: TaskId,
    pub sample_id: SampleId,
    pub period: u32,
    pub model_prediction: CategoryId,
    pub model_prediction_name: String,
    pub energy: f64,
    pub projection: [f64; 2],
    pub status: TaskStatus,
    pub lease_until_ms: Option<u64>,
}

#[derive(Serialize)]
pub struct TasksResponse {
    pub schema_version: u32,
    pub state: Phase,
    pub period: Option<u32>,
    pub tasks: Vec<TaskView>,
}

#[derive(Deserialize)]
pub struct TasksQuery {
    status: Option<String>,
    limit: Option<usize>,
    annotator: Option<String>,
}

/// Claims a batch of pending tasks for the caller.
pub(crate) async fn claim_tasks(
    State(hub): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<TasksQuery>,
) -> ApiResult<TasksResponse> {
    if q.status.as_deref().is_some_and(|s| s != "pending") {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "bad_status",
            "only status=pending can be claimed",
        ));
    }
    let who = annotator_id(&headers, q.annotator);
    let s = hub.state.lock();
    let Some(session) = &s.session else {
        return Ok(Json(TasksResponse {
            schema_version: SCHEMA_VERSION,
            state: s.phase,
            period: s.period,
            tasks: vec![],
        }));
    };
    let queue = s.queue.as_ref().expect("session has a queue");
    let claimed = queue.lock().claim(&who, q.limit.unwrap_or(10).min(MAX_CLAIM))?;
    let name = |c: CategoryId| {
        session
            .categories
            .iter()
            .find(|e| e.id == c)
            .map(|e| e.name.clone())
            .unwrap_or_default()
    };
    let tasks = claimed
        .into_iter()
        .map(|t| TaskView {
            task_id: t.task_id,
            sample_id: t.sample_id,
            period: t.period,
            model_prediction: t.model_prediction,
            model_prediction_name: name(t.model_prediction),
            energy: t.energy,
            projection: session.projections.get(&t.sample_id).copied().unwrap_or([0.0, 0.0]),
            status: t.status,
            lease_until_ms: t.lease_until_ms,
        })
        .collect();
    Ok(Json(TasksResponse {
        schema_version: SCHEMA_VERSION,
        state: s.phase,
        period: Some(session.period),
        tasks,
    }))
}

#[derive(Deserialize)]
pub struct LabelBody {
    pub category: CategoryId,
    pub annotator: Option<String>,
}

#[derive(Serialize)]
pub struct LabelResponse {
    pub schema_version: u32,
    pub task_id: TaskId,
    pub outcome: LabelOutcome,
    pub period_counts: QueueCounts,
}

pub(crate) async fn label_task(
    State(hub): State<AppState>,
    headers: HeaderMap,
    Path(task_id): Path<TaskId>,
    Json(body): Json<LabelBody>,
) -> ApiResult<LabelResponse> {
    let who = annotator_id(&headers, body.annotator);
    let s = hub.state.lock();
    let queue = s.queue.as_ref().ok_or_else(ApiError::no_session)?;
    let mut q = queue.lock();
    let period = q.task(task_id)?.period;
    let already = q.task(task_id)?.assigned_label == Some(body.category);
    if !already {
        let Some(session) = s.session.as_ref().filter(|x| x.period == period) else {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "period_closed",
                format!("task {task_id} belongs to period {period}, which is not open"),
            ));
        };
        if !session.categories.iter().any(|c| c.id == body.category) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "unknown_category",
                format!("category {} is not in the label list", body.category),
            ));
        }
    }
    let outcome = q.apply_label(task_id, body.category, Some(&who))?;
    Ok(Json(LabelResponse {
        schema_version: SCHEMA_VERSION,
        task_id,
        outcome,
        period_counts: q.counts_for_period(period),
    }))
}

#[derive(Serialize)]
pub struct SpotCheckSummary {
    pub batch_id: String,
    pub size: usize,
    pub verdicts: usize,
    pub agreement_rate: Option<f64>,
}

#[derive(Serialize)]
pub struct PeriodResponse {
    pub schema_version: u32,
    pub state: Phase,
    pub period: Option<u32>,
    pub counts: Option<QueueCounts>,
    /// The queue is drained, so `POST /api/periods/advance` will be accepted.
    pub advance_ready: bool,
    pub categories: Vec<CategoryEntry>,
    pub tau: Option<f64>,
    pub temperature: Option<f64>,
    pub seconds_left: Option<f64>,
    pub spot_check: Option<SpotCheckSummary>,
    /// Periods that have a report, ascending.
    pub reports: Vec<u32>,
}

fn report_periods(hub: &Hub) -> Vec<u32> {
    let Some(out) = &hub.out else { return vec![] };
    (1..)
        .take_while(|&p| period_dir(out, p).join(REPORT_FILE).is_file())
        .collect()
}

pub(crate) async fn current_period(State(hub): State<AppState>) -> ApiResult<PeriodResponse> {
    let reports = report_periods(&hub);
    let s = hub.state.lock();
    let counts = match (&s.queue, s.period) {
        (Some(q), Some(p)) => Some(q.lock().counts_for_period(p)),
        _ => None,
    };
    let session = s.session.as_ref();
    Ok(Json(PeriodResponse {
        schema_version: SCHEMA_VERSION,
        state: s.phase,
        period: s.period,
        advance_ready: session.is_some() && counts.is_some_and(|c| c.pending == 0 && c.claimed == 0),
        counts,
        categories: session.map(|x| x.categories.clone()).unwrap_or_default(),
        tau: session.map(|x| x.tau),
        temperature: session.map(|x| x.temperature),
        seconds_left: session.map(|x| {
            x.deadline
                .saturating_duration_since(std::time::Instant::now())
                .as_secs_f64()
        }),
        spot_check: session.and_then(|x| x.spot_check.as_ref()).map(|b| {
            let b = b.lock();
            SpotCheckSummary {
                batch_id: b.batch_id.clone(),
                size: b.sample_ids.len(),
                verdicts: b.verdicts.len(),
                agreement_rate: b.agreement_rate(),
            }
        }),
        reports,
    }))
}

#[derive(Serialize)]
pub struct AdvanceResponse {
    pub schema_version: u32,
    pub period: u32,
    pub state: Phase,
}

pub(crate) async fn advance(State(hub): State<AppState>) -> Result<(StatusCode, Json<AdvanceResponse>), ApiError> {
    let mut s = hub.state.lock();
    let Some(p) = s.period else {
        return Err(ApiError::no_session());
    };
    if s.advance == Some(p) {
        // repeated request for a period already advanced
        return Ok((
            StatusCode::ACCEPTED,
            Json(AdvanceResponse {
                schema_version: SCHEMA_VERSION,
                period: p,
                state: s.phase,
            }),
        ));
    }
    if s.session.is_none() {
        return Err(ApiError::no_session());
    }
    let counts = s
        .queue
        .as_ref()
        .expect("session has a queue")
        .lock()
        .counts_for_period(p);
    if counts.pending + counts.claimed > 0 {
        let mut e = ApiError::new(
            StatusCode::CONFLICT,
            "queue_not_drained",
            format!("{} tasks still need labels", counts.pending + counts.claimed),
        );
        e.detail = Some(serde_json::to_value(counts).expect("counts serialize"));
        return Err(e);
    }
    s.advance = Some(p);
    hub.changed.notify_all();
    Ok((
        StatusCode::ACCEPTED,
        Json(AdvanceResponse {
            schema_version: SCHEMA_VERSION,
            period: p,
            state: Phase::Updating,
        }),
    ))
}

#[derive(Serialize)]
pub struct SpotCheckSample {
    pub sample_id: SampleId,
    pub predicted_category: CategoryId,
    pub predicted_name: String,
    pub projection: [f64; 2],
}

#[derive(Serialize)]
pub struct SpotCheckNext {
    pub schema_version: u32,
    pub period: Option<u32>,
    pub batch_id: Option<String>,
    pub sample: Option<SpotCheckSample>,
    pub remaining: usize,
    pub size: usize,
}

pub(crate) async fn spotcheck_next(State(hub): State<AppState>) -> ApiResult<SpotCheckNext> {
    let s = hub.state.lock();
    let empty = SpotCheckNext {
        schema_version: SCHEMA_VERSION,
        period: s.period,
        batch_id: None,
        sample: None,
        remaining: 0,
        size: 0,
    };
    let Some(session) = &s.session else {
        return Ok(Json(empty));
    };
    let Some(batch) = &session.spot_check else {
        return Ok(Json(empty));
    };
    let b = batch.lock();
    let sample = b.next_pending().map(|id| {
        let pred = b.predictions[&id];
        SpotCheckSample {
            sample_id: id,
            predicted_category: pred,
            predicted_name: session
                .categories
                .iter()
                .find(|c| c.id == pred)
                .map(|c| c.name.clone())
                .unwrap_or_default(),
            projection: session.projections.get(&id).copied().unwrap_or([0.0, 0.0]),
        }
    });
    Ok(Json(SpotCheckNext {
        schema_version: SCHEMA_VERSION,
        period: Some(session.period),
        batch_id: Some(b.batch_id.clone()),
        sample,
        remaining: b.sample_ids.len() - b.verdicts.len(),
        size: b.sample_ids.len(),
    }))
}

#[derive(Serialize)]
pub struct VerdictResponse {
    pub schema_version: u32,
    pub sample_id: SampleId,
    pub remaining: usize,
    pub agreement_rate: Option<f64>,
}

pub(crate) async fn spotcheck_verdict(
    State(hub): State<AppState>,
    Path(sample_id): Path<SampleId>,
    Json(verdict): Json<Verdict>,
) -> ApiResult<VerdictResponse> {
    let s = hub.state.lock();
    let session = s.session.as_ref().ok_or_else(ApiError::no_session)?;
    let batch = session
        .spot_check
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_spot_check", "this period has no spot check"))?;
    if let Verdict::Corrected { label } = verdict {
        if !session.categories.iter().any(|c| c.id == label) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "unknown_category",
                format!("category {label} is not in the label list"),
            ));
        }
    }
    let mut b = batch.lock();
    b.record(sample_id, verdict)?;
    Ok(Json(VerdictResponse {
        schema_version: SCHEMA_VERSION,
        sample_id,
        remaining: b.sample_ids.len() - b.verdicts.len(),
        agreement_rate: b.agreement_rate(),
    }))
}

/// The stored report, passed through unchanged (it carries its own schema_version).
pub(crate) async fn report(State(hub): State<AppState>, Path(period): Path<u32>) -> Result<Response, ApiError> {
    let missing = || {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "no_report",
            format!("no report for period {period}"),
        )
    };
    let out = hub.out.as_ref().ok_or_else(missing)?;
    let bytes = match std::fs::read(period_dir(out, period).join(REPORT_FILE)) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(missing()),
        Err(e) => return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string())),
    };
    if let Err(e) = serde_json::from_slice::<Value>(&bytes) {
        return Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "corrupt_report",
            e.to_string(),
        ));
    }
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

pub(crate) async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}
