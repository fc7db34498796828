//! REST API under `/api/v1`. Handlers run engine operations on the blocking
//! pool; every body is JSON. See the README for the route table.

use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Engine, EngineError, JobSpec};
use crate::gateway::proxy::{spawn_server, ServerHandle};
use crate::ideation::{HumanAnnotation, Rating};
use crate::meta::ReviewRating;
use crate::reporting::ReportKind;

type Shared = Arc<Engine>;

fn status_of(e: &EngineError) -> StatusCode {
    match e {
        EngineError::NotFound { .. } => StatusCode::NOT_FOUND,
        EngineError::Invalid(_) | EngineError::Meta(crate::meta::MetaError::InvalidId(_)) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        EngineError::RunsPending { .. } => StatusCode::CONFLICT,
        EngineError::Planning(crate::planning::PlanningError::Invalid { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(json!({ "error": message }))).into_response()
}

async fn blocking<T, F>(engine: Shared, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Shared) -> Result<T, EngineError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&engine)).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => error_response(status_of(&e), e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn auth(State(engine): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = engine.api_token() {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return error_response(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into());
        }
    }
    next.run(req).await
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Deserialize)]
struct IdeaFilter {
    rating: Option<Rating>,
}

async fn list_ideas(State(e): State<Shared>, Query(f): Query<IdeaFilter>) -> Response {
    blocking(e, move |e| {
        let ideas = e.triage_export();
        Ok(match f.rating {
            Some(r) => ideas.into_iter().filter(|i| i.rating == r).collect(),
            None => ideas,
        })
    })
    .await
}

async fn get_idea(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.idea(&id)).await
}

#[derive(Debug, Deserialize)]
struct AnnotationBody {
    rating: Rating,
    #[serde(default)]
    notes: String,
    #[serde(default)]
    conditioning_text: String,
}

async fn annotate(State(e): State<Shared>, Path(id): Path<String>, Json(body): Json<AnnotationBody>) -> Response {
    blocking(e, move |e| {
        e.annotate(HumanAnnotation {
            idea_id: id,
            rating: body.rating,
            notes: body.notes,
            conditioning_text: body.conditioning_text,
        })
    })
    .await
}

async fn list_plans(State(e): State<Shared>) -> Response {
    blocking(e, |e| e.plans()).await
}

/// `{"idea_id": ...}` asks the planner; adding `"text"` stores a hand-written
/// plan instead.
#[derive(Debug, Deserialize)]
struct PlanBody {
    idea_id: String,
    text: Option<String>,
}

async fn create_plan(State(e): State<Shared>, Json(body): Json<PlanBody>) -> Response {
    blocking(e, move |e| match body.text {
        Some(text) => e.import_plan(&body.idea_id, &text),
        None => {
            let plan = e.plan(&body.idea_id)?;
            e.plan_view(&plan.id)
        }
    })
    .await
}

async fn get_plan(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.plan_view(&id)).await
}

async fn validate_plan(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.validate(&id)).await
}

async fn get_meta(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.stored_meta(&id)).await
}

async fn run_meta(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.meta(&id)).await
}

async fn list_jobs(State(e): State<Shared>) -> Response {
    blocking(e, |e| Ok(e.jobs())).await
}

async fn create_job(State(e): State<Shared>, Json(spec): Json<JobSpec>) -> Response {
    blocking(e, move |e| {
        let ticket = e.enqueue(spec)?;
        e.start_scheduler();
        Ok(ticket)
    })
    .await
}

async fn get_job(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.job_view(&id)).await
}

#[derive(Debug, Deserialize)]
struct RunFilter {
    plan_id: Option<String>,
}

async fn list_runs(State(e): State<Shared>, Query(f): Query<RunFilter>) -> Response {
    blocking(e, move |e| Ok(e.runs(f.plan_id.as_deref()))).await
}

async fn get_run(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.run_view(&id)).await
}

async fn run_record(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.run_record(&id)).await
}

#[derive(Debug, Serialize)]
struct ReportBody {
    run_id: String,
    kind: ReportKind,
    document: String,
    figures: Vec<crate::reporting::FigureRef>,
}

async fn get_report(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| {
        let r = e.report(&id)?;
        Ok(ReportBody {
            run_id: r.run_id,
            kind: r.kind,
            document: r.document,
            figures: r.figures,
        })
    })
    .await
}

async fn get_summary(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.summary(&id)).await
}

async fn get_review(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    blocking(e, move |e| e.review(&id)).await
}

async fn add_rating(State(e): State<Shared>, Path(id): Path<String>, Json(r): Json<ReviewRating>) -> Response {
    blocking(e, move |e| e.add_rating(&id, r)).await
}

#[derive(Debug, Deserialize)]
struct InternalBody {
    reviewer_id: String,
    passed: bool,
    #[serde(default)]
    notes: String,
}

async fn set_internal(State(e): State<Shared>, Path(id): Path<String>, Json(b): Json<InternalBody>) -> Response {
    blocking(e, move |e| e.set_internal(&id, &b.reviewer_id, b.passed, &b.notes)).await
}

async fn scheduler(State(e): State<Shared>) -> Response {
    blocking(e, |e| Ok(e.scheduler_stats())).await
}

pub fn router(engine: Arc<Engine>) -> Router {
    let api = Router::new()
        .route("/ideas", get(list_ideas))
        .route("/ideas/{id}", get(get_idea))
        .route("/ideas/{id}/annotation", post(annotate))
        .route("/plans", get(list_plans).post(create_plan))
        .route("/plans/{id}", get(get_plan))
        .route("/plans/{id}/validate", post(validate_plan))
        .route("/plans/{id}/meta", get(get_meta).post(run_meta))
        .route("/jobs", get(list_jobs).post(create_job))
        .route("/jobs/{id}", get(get_job))
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/record", get(run_record))
        .route("/runs/{id}/report", get(get_report))
        .route("/runs/{id}/summary", get(get_summary))
        .route("/reviews/{id}", get(get_review))
        .route("/reviews/{id}/ratings", post(add_rating))
        .route("/reviews/{id}/internal", post(set_internal))
        .route("/scheduler", get(scheduler))
        .layer(middleware::from_fn_with_state(engine.clone(), auth))
        .route("/health", get(health))
        .with_state(engine);
    Router::new().nest("/api/v1", api)
}

/// Serve the API on a background thread; the scheduler is started first.
pub fn listen(bind: &str, engine: Arc<Engine>) -> std::io::Result<ServerHandle> {
    engine.start_scheduler();
    spawn_server("api", bind, router(engine))
}
