//! HTTP surface.
//!
//! | route | |
//! |---|---|
//! | `POST /api/cases` | multipart `image`, `clinic`, `patient`, `eye`; answers 202 with the job |
//! | `GET /api/jobs/{id}` | job state |
//! | `GET /api/cases/{id}` | the case report once the job is done |
//! | `GET /api/cases/{id}/overlay.png` | rendered findings |
//! | `GET /api/cases?clinic&from&to&state&offset&limit` | worklist |
//! | `POST /api/cases/{id}/review`, `GET` likewise | clinician confirm or override |
//! | `GET /api/health` | liveness and queue counts |
//!
//! Reviews are an extension for the clinician front end and not part of the
//! automated diagnosis.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, Utc};
use drscreen_core::PIPELINE_VERSION;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use uuid::Uuid;

use crate::error::ServiceError;
use crate::model::{CaseMetadata, CaseSummary, Eye, Job, JobState, ReviewDecision};
use crate::store::{CaseFilter, LoadIssue};
use crate::worker::{Service, ServiceConfig};

type ApiResult<T> = Result<T, ServiceError>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) | ServiceError::NoReview(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) | ServiceError::Transition { .. } => StatusCode::CONFLICT,
            ServiceError::Validation(_) | ServiceError::JobFailed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::PayloadTooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

/// Multipart framing allowance on top of the image limit.
const FORM_SLACK: usize = 64 * 1024;

pub fn router(service: Arc<Service>) -> Router {
    let limit = service.max_upload() + FORM_SLACK;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/cases", post(submit).get(list))
        .route("/api/jobs/{id}", get(job))
        .route("/api/cases/{id}", get(report))
        .route("/api/cases/{id}/overlay.png", get(overlay))
        .route("/api/cases/{id}/review", post(review).get(stored_review))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(service)
}

async fn health(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "version": PIPELINE_VERSION,
        "config_fingerprint": svc.pipeline().fingerprint(),
        "jobs": svc.store().counts(),
    }))
}

fn form_error(limit: usize) -> impl Fn(MultipartError) -> ServiceError + Copy {
    move |e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ServiceError::PayloadTooLarge(limit)
        } else {
            ServiceError::Validation(e.body_text())
        }
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Io(std::io::Error::other(e)))?
}

#[derive(Serialize)]
struct Submitted {
    job_id: Uuid,
    job: Job,
}

async fn submit(State(svc): State<Arc<Service>>, mut form: Multipart) -> ApiResult<(StatusCode, Json<Submitted>)> {
    let mut image: Option<Bytes> = None;
    let (mut clinic, mut patient, mut eye) = (None, None, None);
    let form_error = form_error(svc.max_upload());
    while let Some(field) = form.next_field().await.map_err(form_error)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => image = Some(field.bytes().await.map_err(form_error)?),
            "clinic" => clinic = Some(field.text().await.map_err(form_error)?),
            "patient" => patient = Some(field.text().await.map_err(form_error)?),
            "eye" => eye = Some(field.text().await.map_err(form_error)?),
            _ => {}
        }
    }
    let missing: Vec<&str> = [("image", image.is_none()), ("clinic", clinic.is_none()), ("patient", patient.is_none()), ("eye", eye.is_none())]
        .into_iter()
        .filter(|(_, absent)| *absent)
        .map(|(n, _)| n)
        .collect();
    if !missing.is_empty() {
        return Err(ServiceError::Validation(format!("missing fields: {}", missing.join(", "))));
    }
    let metadata = CaseMetadata { clinic: clinic.unwrap(), patient: patient.unwrap(), eye: eye.unwrap().parse::<Eye>()? };
    let image = image.unwrap();
    let job = blocking(move || svc.submit(metadata, &image)).await?;
    Ok((StatusCode::ACCEPTED, Json(Submitted { job_id: job.id, job })))
}

#[derive(Serialize)]
struct JobView {
    #[serde(flatten)]
    job: Job,
    metadata: CaseMetadata,
}

async fn job(State(svc): State<Arc<Service>>, Path(id): Path<Uuid>) -> ApiResult<Json<JobView>> {
    let r = svc.store().record(id)?;
    Ok(Json(JobView { job: r.job, metadata: r.metadata }))
}

async fn report(State(svc): State<Arc<Service>>, Path(id): Path<Uuid>) -> ApiResult<Response> {
    let bytes = svc.store().report_json(id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn overlay(State(svc): State<Arc<Service>>, Path(id): Path<Uuid>) -> ApiResult<Response> {
    let bytes = svc.store().overlay(id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    pub clinic: Option<String>,
    pub from: Option<String>,
    pub to: Option<String>,
    /// A job state, or `accepted` / `rejected` for finished analyses.
    pub state: Option<String>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

/// RFC 3339 instant or a bare date; a bare `to` date covers the whole day.
fn parse_bound(text: &str, end_of_day: bool) -> ApiResult<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(text) {
        return Ok(t.with_timezone(&Utc));
    }
    let day = NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .map_err(|_| ServiceError::Validation(format!("bad date {text:?}")))?;
    let t = if end_of_day { day.and_hms_nano_opt(23, 59, 59, 999_999_999) } else { day.and_hms_opt(0, 0, 0) };
    Ok(t.expect("valid time of day").and_utc())
}

#[derive(Clone, Copy)]
enum StateFilter {
    Job(JobState),
    Accepted(bool),
    Reviewed,
}

impl StateFilter {
    fn parse(text: &str) -> ApiResult<Self> {
        Ok(match text {
            "queued" => Self::Job(JobState::Queued),
            "running" => Self::Job(JobState::Running),
            "done" => Self::Job(JobState::Done),
            "failed" => Self::Job(JobState::Failed),
            "accepted" => Self::Accepted(true),
            "rejected" => Self::Accepted(false),
            "reviewed" => Self::Reviewed,
            other => return Err(ServiceError::Validation(format!("unknown state filter {other:?}"))),
        })
    }

    fn matches(self, s: &CaseSummary) -> bool {
        match self {
            Self::Job(state) => s.state == state,
            Self::Accepted(a) => s.outcome.as_ref().is_some_and(|o| o.accepted == a),
            Self::Reviewed => s.reviewed,
        }
    }
}

#[derive(Serialize)]
struct Page {
    total: usize,
    offset: usize,
    limit: usize,
    items: Vec<CaseSummary>,
}

async fn list(State(svc): State<Arc<Service>>, Query(q): Query<ListQuery>) -> ApiResult<Json<Page>> {
    let filter = CaseFilter {
        clinic: q.clinic.clone(),
        from: q.from.as_deref().map(|t| parse_bound(t, false)).transpose()?,
        to: q.to.as_deref().map(|t| parse_bound(t, true)).transpose()?,
    };
    let mut items = svc.store().list(&filter);
    if let Some(state) = q.state.as_deref().map(StateFilter::parse).transpose()? {
        items.retain(|s| state.matches(s));
    }
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    let total = items.len();
    let items = items.into_iter().skip(offset).take(limit).collect();
    Ok(Json(Page { total, offset, limit, items }))
}

async fn review(
    State(svc): State<Arc<Service>>,
    Path(id): Path<Uuid>,
    Json(decision): Json<ReviewDecision>,
) -> ApiResult<Response> {
    let (review, created) = blocking(move || svc.store().review(id, decision, Utc::now())).await?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(review)).into_response())
}

async fn stored_review(State(svc): State<Arc<Service>>, Path(id): Path<Uuid>) -> ApiResult<Response> {
    Ok(Json(svc.store().stored_review(id)?).into_response())
}

/// A running HTTP server with its worker pool.
pub struct Server {
    pub addr: SocketAddr,
    service: Arc<Service>,
    stop: oneshot::Sender<()>,
    handle: JoinHandle<std::io::Result<()>>,
}

impl Server {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub async fn start(cfg: ServiceConfig, addr: SocketAddr) -> crate::error::Result<(Self, Vec<LoadIssue>)> {
        let (service, issues) = Service::start(cfg)?;
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = oneshot::channel::<()>();
        let app = router(service.clone());
        let handle = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await
        });
        Ok((Self { addr, service, stop, handle }, issues))
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    /// Stops accepting requests and halts the workers.
    pub async fn stop(self) {
        let _ = self.stop.send(());
        let _ = self.handle.await;
        self.service.shutdown();
    }
}
