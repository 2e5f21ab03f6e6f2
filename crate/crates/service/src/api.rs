//! The `/v1` HTTP API.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nbeval_core::interactions::{self, DatasetDescriptor};
use nbeval_core::protocol::{PredictionSubmission, RunStatus};
use nbeval_core::SplitConfig;
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::CorsLayer;
use uuid::Uuid;

use crate::error::ApiError;
use crate::model::{
    unix_now, wire_log, ConfigRecord, CreateJob, CreateRun, DatasetRecord, JobRecord, ResultsResponse,
    UnlabeledResponse,
};
use crate::state::AppState;

type ApiResult<T> = Result<T, ApiError>;
type AppRef = State<Arc<AppState>>;

const MAX_UPLOAD_BYTES: usize = 1 << 30;

/// JSON body whose parse failures are reported as 400 in the API's error format.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(value)) => Ok(ApiJson(value)),
            Err(rejection) => Err(ApiError::malformed(rejection.body_text())),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let v1 = Router::new()
        .route("/datasets", post(create_dataset).get(list_datasets))
        .route("/datasets/{id}", get(get_dataset).delete(delete_dataset))
        .route("/configs", post(create_config).get(list_configs))
        .route("/configs/{id}", get(get_config).delete(delete_config))
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/training-data", get(training_data))
        .route("/runs/{id}/unlabeled", get(unlabeled))
        .route("/runs/{id}/predictions", post(predictions))
        .route("/runs/{id}/results", get(results))
        .route("/runs/{id}/report", get(report))
        .route("/runs/{id}/abort", post(abort))
        .route("/jobs", post(create_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job));
    Router::new()
        .route("/health", get(health))
        .nest("/v1", v1)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn require_token(State(state): AppRef, req: Request, next: Next) -> Response {
    let writes = matches!(
        *req.method(),
        Method::POST | Method::PUT | Method::PATCH | Method::DELETE
    );
    if let (true, Some(token)) = (writes, state.token()) {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token) {
            return ApiError::unauthorized().into_response();
        }
    }
    next.run(req).await
}

fn run_id(raw: &str) -> ApiResult<Uuid> {
    Uuid::parse_str(raw).map_err(|_| ApiError::not_found("UnknownRun", format!("unknown run {raw}")))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_dataset(State(state): AppRef, mut form: Multipart) -> ApiResult<(StatusCode, Json<DatasetRecord>)> {
    let mut descriptor: Option<DatasetDescriptor> = None;
    let mut name: Option<String> = None;
    let mut file_name: Option<String> = None;
    let mut data: Option<Vec<u8>> = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::malformed(e.body_text()))?
    {
        match field.name() {
            Some("descriptor") => {
                let text = field.text().await.map_err(|e| ApiError::malformed(e.body_text()))?;
                let parsed =
                    serde_json::from_str(&text).map_err(|e| ApiError::malformed(format!("descriptor: {e}")))?;
                descriptor = Some(parsed);
            }
            Some("name") => name = Some(field.text().await.map_err(|e| ApiError::malformed(e.body_text()))?),
            Some("file") => {
                file_name = field.file_name().map(str::to_string);
                data = Some(
                    field
                        .bytes()
                        .await
                        .map_err(|e| ApiError::malformed(e.body_text()))?
                        .to_vec(),
                );
            }
            _ => {}
        }
    }
    let data = data.ok_or_else(|| ApiError::malformed("multipart field \"file\" is required"))?;
    let mut descriptor = descriptor.unwrap_or_else(|| DatasetDescriptor::canonical(""));
    if let Some(name) = name.or(file_name).filter(|_| descriptor.name.is_empty()) {
        descriptor.name = name;
    }

    let worker_descriptor = descriptor.clone();
    let ingested = tokio::task::spawn_blocking(move || interactions::ingest(&worker_descriptor, data.as_slice()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    let (t_min, t_max) = ingested.log.span().unwrap_or((0, 0));
    let record = DatasetRecord {
        id: Uuid::new_v4().to_string(),
        name: descriptor.name.clone(),
        n_interactions: ingested.accepted,
        n_users: ingested.log.users().len(),
        n_items: ingested.log.items().len(),
        t_min,
        t_max,
        rejected: ingested.rejected,
        rejections: ingested.rejections,
        created_at: unix_now(),
        descriptor,
    };
    let worker_state = state.clone();
    let worker_record = record.clone();
    tokio::task::spawn_blocking(move || worker_state.add_dataset(worker_record, ingested.log))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn list_datasets(State(state): AppRef) -> Json<Vec<DatasetRecord>> {
    Json(state.datasets())
}

async fn get_dataset(State(state): AppRef, Path(id): Path<String>) -> ApiResult<Json<DatasetRecord>> {
    Ok(Json(state.dataset(&id)?))
}

async fn delete_dataset(State(state): AppRef, Path(id): Path<String>) -> ApiResult<StatusCode> {
    state.delete_dataset(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn create_config(
    State(state): AppRef,
    ApiJson(config): ApiJson<SplitConfig>,
) -> ApiResult<(StatusCode, Json<ConfigRecord>)> {
    config
        .validate()
        .map_err(|e| ApiError::validation(e.code(), e.to_string()))?;
    let record = ConfigRecord {
        id: Uuid::new_v4().to_string(),
        config,
        created_at: unix_now(),
    };
    state.add_config(record.clone())?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn list_configs(State(state): AppRef) -> Json<Vec<ConfigRecord>> {
    Json(state.configs())
}

async fn get_config(State(state): AppRef, Path(id): Path<String>) -> ApiResult<Json<ConfigRecord>> {
    Ok(Json(state.config(&id)?))
}

async fn delete_config(State(state): AppRef, Path(id): Path<String>) -> ApiResult<StatusCode> {
    state.delete_config(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn create_run(
    State(state): AppRef,
    ApiJson(body): ApiJson<CreateRun>,
) -> ApiResult<(StatusCode, Json<RunStatus>)> {
    let worker = state.clone();
    let status = tokio::task::spawn_blocking(move || -> ApiResult<RunStatus> {
        let ctx = worker.context_for(&body.dataset_id, &body.config_id)?;
        let id = worker.registry().register_with(ctx, body.metadata)?;
        Ok(worker.registry().status(id)?)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))??;
    Ok((StatusCode::CREATED, Json(status)))
}

async fn list_runs(State(state): AppRef) -> Json<Vec<RunStatus>> {
    Json(state.registry().list())
}

async fn get_run(State(state): AppRef, Path(id): Path<String>) -> ApiResult<Json<RunStatus>> {
    Ok(Json(state.registry().status(run_id(&id)?)?))
}

#[derive(Debug, Deserialize)]
struct TrainingQuery {
    format: Option<String>,
}

async fn training_data(
    State(state): AppRef,
    Path(id): Path<String>,
    Query(q): Query<TrainingQuery>,
) -> ApiResult<Response> {
    let log = state.registry().get_training_data(run_id(&id)?)?;
    Ok(match q.format.as_deref() {
        Some("json") => Json(wire_log(&log)).into_response(),
        _ => ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], log.to_csv_string()).into_response(),
    })
}

async fn unlabeled(State(state): AppRef, Path(id): Path<String>) -> ApiResult<Json<UnlabeledResponse>> {
    let id = run_id(&id)?;
    let response = state.registry().with_run(id, |run, _| {
        let requests = run.get_unlabeled_data()?;
        let window_index = run.phase().window().unwrap_or_default();
        Ok(UnlabeledResponse {
            run_id: id,
            window_index,
            requests,
        })
    })?;
    Ok(Json(response))
}

async fn predictions(
    State(state): AppRef,
    Path(id): Path<String>,
    ApiJson(submission): ApiJson<PredictionSubmission>,
) -> ApiResult<Json<serde_json::Value>> {
    let id = run_id(&id)?;
    let scores = state.registry().submit_prediction(id, submission)?;
    Ok(Json(json!({
        "run_id": id,
        "accepted": true,
        "provisional": scores,
    })))
}

async fn results(State(state): AppRef, Path(id): Path<String>) -> ApiResult<Json<ResultsResponse>> {
    let id = run_id(&id)?;
    let response = state.registry().with_run(id, |run, sink| {
        let release = run.get_results(sink)?;
        Ok(ResultsResponse::new(id, release, run.phase()))
    })?;
    Ok(Json(response))
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    #[serde(default)]
    partial: bool,
    format: Option<String>,
}

async fn report(State(state): AppRef, Path(id): Path<String>, Query(q): Query<ReportQuery>) -> ApiResult<Response> {
    let report = state.registry().get_report(run_id(&id)?, q.partial)?;
    let csv = |body: String| ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response();
    Ok(match q.format.as_deref() {
        Some("csv") => csv(report.to_csv()),
        Some("series") => csv(report.to_series_csv()),
        Some("json") | None => ([(header::CONTENT_TYPE, "application/json")], report.to_json()).into_response(),
        Some(other) => return Err(ApiError::malformed(format!("unknown report format {other:?}"))),
    })
}

#[derive(Debug, Default, Deserialize)]
struct AbortBody {
    #[serde(default)]
    reason: Option<String>,
}

async fn abort(State(state): AppRef, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<RunStatus>> {
    let id = run_id(&id)?;
    let body: AbortBody = if body.iter().all(u8::is_ascii_whitespace) {
        AbortBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::malformed(e.to_string()))?
    };
    let reason = body.reason.unwrap_or_else(|| "aborted by client".into());
    state.registry().abort(id, &reason)?;
    Ok(Json(state.registry().status(id)?))
}

async fn create_job(
    State(state): AppRef,
    ApiJson(body): ApiJson<CreateJob>,
) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    Ok((StatusCode::ACCEPTED, Json(state.submit_job(body)?)))
}

async fn list_jobs(State(state): AppRef) -> Json<Vec<JobRecord>> {
    Json(state.jobs())
}

async fn get_job(State(state): AppRef, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    Ok(Json(state.job(&id)?))
}
