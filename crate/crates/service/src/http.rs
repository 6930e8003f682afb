//! JSON-over-HTTP routes.

use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use xedge_core::augment::SampleId;

use crate::store::sniff_media_type;
use crate::{DecisionRequest, JobScope, ServiceError, ServiceState};

/// Seconds a client should wait before re-polling a pending bundle.
pub const RETRY_AFTER_SECS: u64 = 1;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Pending(_) => StatusCode::ACCEPTED,
            ServiceError::ReadOnly(_) => StatusCode::FORBIDDEN,
            ServiceError::Invalid(_) | ServiceError::EmptyLog(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut resp = if let ServiceError::Pending(id) = &self {
            (status, Json(json!({"status": "pending", "sample": id}))).into_response()
        } else {
            (status, Json(json!({"error": self.to_string()}))).into_response()
        };
        if status == StatusCode::ACCEPTED {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(RETRY_AFTER_SECS));
        }
        resp
    }
}

fn parse_sample(id: &str) -> Result<SampleId, ServiceError> {
    id.parse().map_err(|_| ServiceError::NotFound(format!("sample {id}")))
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(e.to_string()))
}

async fn list_samples(State(state): State<ServiceState>) -> Response {
    Json(state.list_samples()).into_response()
}

async fn sample_bundle(State(state): State<ServiceState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(state.get_sample_bundle(parse_sample(&id)?)?).into_response())
}

async fn record_decision(State(state): State<ServiceState>, body: Bytes) -> Result<Response, ServiceError> {
    let req: DecisionRequest = parse_json(&body)?;
    let recorded = tokio::task::spawn_blocking(move || state.record_decision(req))
        .await
        .map_err(|e| ServiceError::Failed(e.to_string()))??;
    let status = if recorded.created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(recorded.ack)).into_response())
}

async fn list_decisions(State(state): State<ServiceState>) -> Response {
    let (head, entries) = state.decisions();
    Json(json!({"head": head, "entries": entries})).into_response()
}

async fn trigger_job(State(state): State<ServiceState>, body: Bytes) -> Result<Response, ServiceError> {
    let scope: JobScope = parse_json(&body)?;
    let job = state.trigger_reevaluation(scope)?;
    let mut resp = (StatusCode::ACCEPTED, Json(&job)).into_response();
    let location = HeaderValue::from_str(&format!("/jobs/{}", job.id)).expect("job ids are ASCII");
    resp.headers_mut().insert(header::LOCATION, location);
    Ok(resp)
}

async fn get_job(State(state): State<ServiceState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(state.get_job(&id)?).into_response())
}

async fn latest_report(State(state): State<ServiceState>) -> Result<Response, ServiceError> {
    let bytes = state.latest_report()?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn artifact(State(state): State<ServiceState>, Path(digest): Path<String>) -> Result<Response, ServiceError> {
    let bytes = state.store().get(&digest)?;
    let headers = [
        (header::CONTENT_TYPE, sniff_media_type(&bytes)),
        (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
    ];
    Ok((headers, bytes).into_response())
}

async fn health() -> Response {
    Json(json!({"status": "ok"})).into_response()
}

async fn require_token(State(state): State<ServiceState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config().token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token);
        if !ok {
            return ServiceError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

fn cors(state: &ServiceState) -> CorsLayer {
    let origins = &state.config().cors_origins;
    let allow = if origins.is_empty() {
        AllowOrigin::from(Any)
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION])
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/samples", get(list_samples))
        .route("/samples/{id}/bundle", get(sample_bundle))
        .route("/decisions", post(record_decision).get(list_decisions))
        .route("/jobs/reevaluate", post(trigger_job))
        .route("/jobs/{id}", get(get_job))
        .route("/reports/latest", get(latest_report))
        .route("/artifacts/{digest}", get(artifact))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/health", get(health))
        .layer(cors(&state))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: ServiceState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
