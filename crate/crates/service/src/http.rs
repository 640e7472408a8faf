//! HTTP endpoints: callback-style ingest for LoRaWAN and Sigfox, and the
//! reading query API.

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::Deserialize;
use serde_json::{json, Value};

use meterhub::config::ConnectorSpec;
use meterhub::connectors::{ingest_lorawan, ingest_sigfox, DispatchOutcome, Dispatcher, IngestError};
use meterhub::model::{RawUplink, TechnologyKind};
use meterhub::store::{self, Store};

#[derive(Clone)]
pub struct AppState {
    pub dispatcher: Dispatcher,
    pub store: Option<Arc<Store>>,
    /// Serializes dispatch so uplinks are processed in arrival order.
    order: Arc<Mutex<()>>,
}

impl AppState {
    pub fn new(dispatcher: Dispatcher, store: Option<Arc<Store>>) -> AppState {
        AppState {
            dispatcher,
            store,
            order: Arc::new(Mutex::new(())),
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": message.into()}))).into_response()
}

fn ingest_error(e: IngestError) -> Response {
    let status = StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::BAD_REQUEST);
    error(status, e.to_string())
}

async fn ingest(state: AppState, body: Bytes, parse: fn(&Value) -> Result<RawUplink, IngestError>) -> Response {
    let doc: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")),
    };
    let uplink = match parse(&doc) {
        Ok(u) => u,
        Err(e) => return ingest_error(e),
    };
    let outcome = tokio::task::spawn_blocking(move || {
        let _turn = state.order.lock().unwrap_or_else(|e| e.into_inner());
        state.dispatcher.dispatch(&uplink)
    })
    .await;
    let body = match outcome {
        Ok(DispatchOutcome::Published(readings)) => json!({"status": "accepted", "readings": readings.len()}),
        Ok(DispatchOutcome::Heartbeat) => json!({"status": "accepted", "readings": 0}),
        Ok(DispatchOutcome::DeadLettered(letter)) => {
            json!({"status": "accepted", "readings": 0, "dead_letter": letter.reason})
        }
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    (StatusCode::OK, Json(body)).into_response()
}

async fn ingest_lorawan_handler(State(state): State<AppState>, body: Bytes) -> Response {
    ingest(state, body, ingest_lorawan).await
}

async fn ingest_sigfox_handler(State(state): State<AppState>, body: Bytes) -> Response {
    ingest(state, body, ingest_sigfox).await
}

#[derive(Debug, Deserialize)]
pub struct RangeParams {
    from: Option<String>,
    to: Option<String>,
    bucket: Option<i64>,
}

fn parse_time(text: Option<&str>, default: DateTime<Utc>) -> Result<DateTime<Utc>, String> {
    match text {
        None => Ok(default),
        Some(t) => DateTime::parse_from_rfc3339(t)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|_| format!("bad timestamp {t:?}")),
    }
}

fn no_store() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no store configured")
}

async fn readings_handler(
    State(state): State<AppState>,
    Path(device): Path<String>,
    Query(params): Query<RangeParams>,
) -> Response {
    let Some(store) = &state.store else {
        return no_store();
    };
    let range = parse_time(params.from.as_deref(), DateTime::<Utc>::MIN_UTC)
        .and_then(|from| parse_time(params.to.as_deref(), DateTime::<Utc>::MAX_UTC).map(|to| (from, to)));
    let (from, to) = match range {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let mut q = store::Query::new(&device, from, to);
    q.bucket_s = params.bucket;
    match store.query(&q) {
        Ok(rows) => Json(rows).into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn latest_handler(State(state): State<AppState>, Path(device): Path<String>) -> Response {
    let Some(store) = &state.store else {
        return no_store();
    };
    match store.latest(&device) {
        Some(r) => Json(r).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no readings for {device}")),
    }
}

async fn health() -> &'static str {
    "ok"
}

/// Routes for the configured callback connectors plus the read API.
pub fn router(state: AppState, connectors: &[ConnectorSpec]) -> Router {
    let mut app = Router::new()
        .route("/health", get(health))
        .route("/devices/:id/readings", get(readings_handler))
        .route("/devices/:id/latest", get(latest_handler));
    for c in connectors.iter().filter(|c| c.is_http()) {
        app = match c.technology {
            TechnologyKind::Lorawan => app.route(&c.listen_path(), post(ingest_lorawan_handler)),
            TechnologyKind::Sigfox => app.route(&c.listen_path(), post(ingest_sigfox_handler)),
            _ => app,
        };
    }
    app.with_state(state)
}
