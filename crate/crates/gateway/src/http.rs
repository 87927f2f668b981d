//! axum router over [`Service`]. Every handler runs its filesystem work on
//! the blocking pool and answers with a JSON body; failures use
//! `{"error": {"code", "message"}}`.

use std::collections::{BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, patch, post};
use axum::Router;
use recall_core::domain::parse_timezone;
use serde::Serialize;
use serde_json::json;

use crate::error::GatewayError;
use crate::service::{now_utc_ms, ConsentPatch, Service, StreamKind};

type Params = Query<HashMap<String, String>>;

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json_response(status, &self.body())
    }
}

fn json_response<T: Serialize>(status: StatusCode, value: &T) -> Response {
    match serde_json::to_vec(value) {
        Ok(body) => (status, [(header::CONTENT_TYPE, "application/json")], body).into_response(),
        Err(e) => GatewayError::Internal(e.to_string()).into_response(),
    }
}

async fn blocking<T, F>(service: Arc<Service>, status: StatusCode, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Service) -> Result<T, GatewayError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&service)).await {
        Ok(Ok(v)) => json_response(status, &v),
        Ok(Err(e)) => e.into_response(),
        Err(e) => GatewayError::Internal(e.to_string()).into_response(),
    }
}

fn int_param(params: &HashMap<String, String>, key: &str) -> Result<Option<i64>, GatewayError> {
    params
        .get(key)
        .map(|v| v.trim().parse().map_err(|_| GatewayError::BadRequest(format!("`{key}` must be an integer, got `{v}`"))))
        .transpose()
}

fn required_range(params: &HashMap<String, String>) -> Result<(i64, i64), GatewayError> {
    match (int_param(params, "from")?, int_param(params, "to")?) {
        (Some(f), Some(t)) => Ok((f, t)),
        _ => Err(GatewayError::BadRequest("`from` and `to` are required".into())),
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/consent", patch(update_consent))
        .route("/sessions/{id}/ingest/{stream}", post(ingest))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/timeline", get(timeline))
        .route("/sessions/{id}/stats", get(stats))
        .route("/sessions/{id}/range", delete(delete_range))
        .route("/query", get(query))
        .route("/retention/apply", post(apply_retention))
        .fallback(not_found)
        .with_state(service)
}

async fn not_found(uri: Uri) -> Response {
    GatewayError::NotFound(uri.path().to_string()).into_response()
}

async fn create_session(State(s): State<Arc<Service>>, body: Bytes) -> Response {
    blocking(s, StatusCode::CREATED, move |s| {
        let text = std::str::from_utf8(&body).map_err(|e| GatewayError::BadRequest(e.to_string()))?;
        s.create_session(text)
    })
    .await
}

async fn list_sessions(State(s): State<Arc<Service>>) -> Response {
    blocking(s, StatusCode::OK, |s| s.list_sessions()).await
}

async fn get_session(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    blocking(s, StatusCode::OK, move |s| s.session(&id)).await
}

async fn update_consent(State(s): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(s, StatusCode::OK, move |s| {
        let patch: ConsentPatch =
            serde_json::from_slice(&body).map_err(|e| GatewayError::BadRequest(format!("consent body: {e}")))?;
        s.update_consent(&id, patch)
    })
    .await
}

async fn ingest(State(s): State<Arc<Service>>, Path((id, stream)): Path<(String, String)>, body: Bytes) -> Response {
    blocking(s, StatusCode::OK, move |s| {
        let kind: StreamKind = stream.parse()?;
        s.ingest(&id, kind, &body)
    })
    .await
}

async fn finalize(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    blocking(s, StatusCode::OK, move |s| s.finalize(&id)).await
}

async fn query(State(s): State<Arc<Service>>, Query(params): Params) -> Response {
    blocking(s, StatusCode::OK, move |s| {
        let text = params.get("q").map(String::as_str).unwrap_or("");
        let sessions: Option<BTreeSet<String>> = params.get("sessions").map(|v| {
            v.split(',').map(str::trim).filter(|id| !id.is_empty()).map(str::to_string).collect()
        });
        let limit = match params.get("limit") {
            Some(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Some(n),
                _ => return Err(GatewayError::BadRequest(format!("`limit` must be a positive integer, got `{v}`"))),
            },
            None => None,
        };
        let tz = params.get("tz").map(|t| parse_timezone(t)).transpose()?;
        s.query(text, sessions, limit, tz)
    })
    .await
}

async fn timeline(State(s): State<Arc<Service>>, Path(id): Path<String>, Query(params): Params) -> Response {
    blocking(s, StatusCode::OK, move |s| s.timeline(&id, int_param(&params, "from")?, int_param(&params, "to")?)).await
}

async fn stats(State(s): State<Arc<Service>>, Path(id): Path<String>, Query(params): Params) -> Response {
    blocking(s, StatusCode::OK, move |s| s.stats(&id, int_param(&params, "from")?, int_param(&params, "to")?)).await
}

async fn delete_session(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    blocking(s, StatusCode::OK, move |s| {
        s.delete_session(&id)?;
        Ok(json!({ "session_id": id, "deleted": true }))
    })
    .await
}

async fn delete_range(State(s): State<Arc<Service>>, Path(id): Path<String>, Query(params): Params) -> Response {
    blocking(s, StatusCode::OK, move |s| {
        let (from, to) = required_range(&params)?;
        let removed = s.delete_range(&id, from, to)?;
        Ok(json!({ "session_id": id, "from": from, "to": to, "removed": removed }))
    })
    .await
}

async fn apply_retention(State(s): State<Arc<Service>>, Query(params): Params) -> Response {
    blocking(s, StatusCode::OK, move |s| {
        let now = int_param(&params, "now")?.unwrap_or_else(now_utc_ms);
        let removed = s.apply_retention(now)?;
        Ok(json!({ "now_utc": now, "removed": removed }))
    })
    .await
}

/// Binds and serves until ctrl-c.
pub async fn serve(service: Arc<Service>, addr: &str) -> Result<(), GatewayError> {
    let bind_err = |reason: String| GatewayError::Bind { addr: addr.to_string(), reason };
    let sock: SocketAddr = addr.parse().map_err(|_| bind_err("not a socket address".into()))?;
    let listener = tokio::net::TcpListener::bind(sock).await.map_err(|e| bind_err(e.to_string()))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
