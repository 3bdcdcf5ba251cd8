//! The JSON API under `/api/v1`.

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forge_core::registry::Stage;
use forge_core::serving::PipelineStage;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{json, Value};

use crate::auth::Principal;
use crate::error::ApiError;
use crate::platform::Platform;

pub const API_PREFIX: &str = "/api/v1";
/// Multipart field carrying the bundle archive.
pub const BUNDLE_FIELD: &str = "bundle";

type AppState = Arc<Platform>;
type ApiResult = Result<Response, ApiError>;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

pub fn router(platform: Arc<Platform>) -> Router {
    let body_limit = platform.config().bundle_limits.max_bundle_bytes as usize + (1 << 20);
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/competitions", get(list_competitions).post(create_competition))
        .route("/competitions/{id}", get(get_competition))
        .route("/competitions/{id}/template", get(template))
        .route("/competitions/{id}/teams", get(list_teams).post(join_team))
        .route("/competitions/{id}/submissions", post(submit))
        .route("/competitions/{id}/leaderboard", get(leaderboard))
        .route("/submissions/{id}", get(submission))
        .route("/harvest/{bundle_id}", post(harvest))
        .route("/models", get(list_models))
        .route("/models/{*path}", get(model_get).post(model_post))
        .route("/services", get(dashboard))
        .route("/pipelines", get(list_pipelines).post(compose_pipeline))
        .route("/pipelines/{id}", get(get_pipeline))
        .route("/pipelines/{id}/predict", post(pipeline_predict))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(platform);
    Router::new().nest(API_PREFIX, api)
}

/// Runs blocking platform work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("handler panicked: {e}")))?
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let token = value.strip_prefix("Bearer ").or_else(|| value.strip_prefix("bearer "))?;
    Some(token.trim().to_owned())
}

async fn authenticate(p: &AppState, headers: &HeaderMap) -> Result<Principal, ApiError> {
    let p = p.clone();
    let token = bearer(headers);
    blocking(move || p.authenticate(token.as_deref())).await
}

/// Authenticates if a token is present; an invalid token is still an error.
async fn maybe_authenticate(p: &AppState, headers: &HeaderMap) -> Result<Option<Principal>, ApiError> {
    if bearer(headers).is_none() {
        return Ok(None);
    }
    authenticate(p, headers).await.map(Some)
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

fn json_response(status: StatusCode, value: &impl Serialize) -> ApiResult {
    Ok((status, Json(value)).into_response())
}

fn ok(value: &impl Serialize) -> ApiResult {
    json_response(StatusCode::OK, value)
}

/// `{"output": <raw>}` with the model's bytes untouched.
fn output_response(raw: &RawValue) -> Response {
    let body = format!("{{\"output\":{}}}", raw.get());
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn list_competitions(State(p): State<AppState>) -> ApiResult {
    ok(&blocking(move || p.competitions()).await?)
}

async fn create_competition(State(p): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    let row = blocking(move || {
        let spec = parse_body(&body)?;
        p.create_competition(spec, &actor)
    })
    .await?;
    json_response(
        StatusCode::CREATED,
        &json!({"competition_id": row.spec.competition_id, "template_ref": row.template_ref}),
    )
}

async fn get_competition(State(p): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let actor = maybe_authenticate(&p, &headers).await?;
    ok(&blocking(move || p.competition(&id, actor.as_ref())).await?)
}

async fn template(State(p): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let name = format!("attachment; filename=\"{id}-template.zip\"");
    let bytes = blocking(move || p.template(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/zip".to_owned()), (header::CONTENT_DISPOSITION, name)], bytes).into_response())
}

#[derive(Deserialize)]
struct JoinTeam {
    team_id: String,
}

async fn join_team(State(p): State<AppState>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    ok(&blocking(move || {
        let req: JoinTeam = parse_body(&body)?;
        p.join_team(&id, &req.team_id, &actor)
    })
    .await?)
}

async fn list_teams(State(p): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    authenticate(&p, &headers).await?;
    ok(&blocking(move || p.teams(&id)).await?)
}

async fn submit(State(p): State<AppState>, headers: HeaderMap, Path(id): Path<String>, mut multipart: Multipart) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    let mut blob = None;
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        if field.name() == Some(BUNDLE_FIELD) {
            blob = Some(field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?);
        }
    }
    let blob = blob.ok_or_else(|| ApiError::bad_request(format!("multipart field {BUNDLE_FIELD:?} is missing")))?;
    json_response(StatusCode::ACCEPTED, &blocking(move || p.submit(&id, &blob, &actor)).await?)
}

async fn leaderboard(State(p): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(&blocking(move || p.leaderboard(&id)).await?)
}

async fn submission(State(p): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    ok(&blocking(move || p.submission(&id, &actor)).await?)
}

async fn harvest(State(p): State<AppState>, headers: HeaderMap, Path(bundle_id): Path<String>) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    ok(&blocking(move || p.harvest(&bundle_id, &actor)).await?)
}

#[derive(Deserialize)]
struct ModelQuery {
    stage: Option<String>,
    prefix: Option<String>,
}

fn parse_stage(s: &str) -> Result<Stage, ApiError> {
    Stage::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown stage {s:?}")))
}

async fn list_models(State(p): State<AppState>, headers: HeaderMap, Query(q): Query<ModelQuery>) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    ok(&blocking(move || {
        let stage = q.stage.as_deref().map(parse_stage).transpose()?;
        p.models(stage, q.prefix.as_deref(), &actor)
    })
    .await?)
}

/// Splits `{name}/{version}[/{action}]`. Model names contain '/', so the
/// version is found from the right.
pub fn parse_model_path(path: &str) -> Option<(String, u32, Option<String>)> {
    let path = path.trim_matches('/');
    let (head, last) = path.rsplit_once('/')?;
    if let Ok(version) = last.parse::<u32>() {
        return (!head.is_empty()).then(|| (head.to_owned(), version, None));
    }
    let (name, version) = head.rsplit_once('/')?;
    let version = version.parse::<u32>().ok()?;
    (!name.is_empty()).then(|| (name.to_owned(), version, Some(last.to_owned())))
}

fn model_route(path: &str) -> Result<(String, u32, Option<String>), ApiError> {
    parse_model_path(path).ok_or_else(|| ApiError::not_found("NOT_FOUND", format!("no route for /models/{path}")))
}

async fn model_get(State(p): State<AppState>, headers: HeaderMap, Path(path): Path<String>) -> ApiResult {
    let (name, version, action) = model_route(&path)?;
    let actor = authenticate(&p, &headers).await?;
    match action.as_deref() {
        None => ok(&blocking(move || p.model(&name, version, &actor)).await?),
        Some("openapi.json") => {
            let bytes = blocking(move || p.api_doc(&name, version, &actor)).await?;
            Ok(([(header::CONTENT_TYPE, "application/json")], Body::from(bytes)).into_response())
        }
        Some("health") => {
            let status = blocking(move || p.health(&name, version, &actor)).await?;
            ok(&json!({"status": status}))
        }
        Some(other) => Err(ApiError::not_found("NOT_FOUND", format!("no GET route for {other}"))),
    }
}

#[derive(Deserialize)]
struct PredictBody {
    input: Value,
}

#[derive(Deserialize)]
struct PromoteBody {
    to_stage: String,
}

#[derive(Deserialize)]
struct EvaluateBody {
    dataset_id: String,
}

async fn model_post(State(p): State<AppState>, headers: HeaderMap, Path(path): Path<String>, body: Bytes) -> ApiResult {
    let (name, version, action) = model_route(&path)?;
    let actor = authenticate(&p, &headers).await?;
    match action.as_deref() {
        Some("predict") => {
            let raw = blocking(move || {
                let req: PredictBody = parse_body(&body)?;
                p.predict(&name, version, &req.input, &actor)
            })
            .await?;
            Ok(output_response(&raw))
        }
        Some("promote") => ok(&blocking(move || {
            let req: PromoteBody = parse_body(&body)?;
            p.promote(&name, version, parse_stage(&req.to_stage)?, &actor)
        })
        .await?),
        Some("serve") => ok(&blocking(move || p.serve(&name, version, &actor)).await?),
        Some("stop") => ok(&blocking(move || p.stop(&name, version, &actor)).await?),
        Some("evaluate") => {
            let record = blocking(move || {
                let req: EvaluateBody = parse_body(&body)?;
                p.reevaluate(&name, version, &req.dataset_id, &actor)
            })
            .await?;
            json_response(StatusCode::ACCEPTED, &record)
        }
        _ => Err(ApiError::not_found("NOT_FOUND", format!("no POST route for /models/{path}"))),
    }
}

async fn dashboard(State(p): State<AppState>, headers: HeaderMap) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    ok(&blocking(move || p.dashboard(&actor)).await?)
}

#[derive(Deserialize)]
struct ComposeBody {
    stages: Vec<PipelineStage>,
}

async fn compose_pipeline(State(p): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    let descriptor = blocking(move || {
        let req: ComposeBody = parse_body(&body)?;
        p.compose_pipeline(req.stages, &actor)
    })
    .await?;
    json_response(StatusCode::CREATED, &descriptor)
}

async fn list_pipelines(State(p): State<AppState>, headers: HeaderMap) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    ok(&blocking(move || p.pipelines(&actor)).await?)
}

async fn get_pipeline(State(p): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    ok(&blocking(move || p.pipeline(&id, &actor)).await?)
}

async fn pipeline_predict(State(p): State<AppState>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let actor = authenticate(&p, &headers).await?;
    let raw = blocking(move || {
        let req: PredictBody = parse_body(&body)?;
        p.invoke_pipeline(&id, &req.input, &actor)
    })
    .await?;
    Ok(output_response(&raw))
}
