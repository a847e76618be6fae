//! HTTP/JSON front end over [`bonik_core::gateway::Dapp`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bonik_core::gateway::{Dapp, GatewayError, ProtocolMessage};
use bonik_core::nlu::{NluError, NluRequest};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        ApiError {
            status: StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl From<NluError> for ApiError {
    fn from(e: NluError) -> Self {
        let (status, code) = match e {
            NluError::Unauthorized => (StatusCode::UNAUTHORIZED, "UNAUTHORIZED"),
            NluError::EmptyUtterance => (StatusCode::BAD_REQUEST, "PROTOCOL_ERROR"),
            NluError::OutOfTurn => (StatusCode::CONFLICT, "OUT_OF_TURN"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        ApiError { status, code, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| GatewayError::Protocol(format!("malformed body: {e}")).into())
}

fn bearer(headers: &HeaderMap) -> Result<String, ApiError> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| GatewayError::ReloginRequired.into())
}

/// Runs a blocking gateway call off the async workers.
async fn blocking<T, F>(dapp: &Arc<Dapp>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Dapp) -> Result<T, ApiError> + Send + 'static,
{
    let dapp = Arc::clone(dapp);
    tokio::task::spawn_blocking(move || f(&dapp))
        .await
        .map_err(|e| ApiError::from(GatewayError::Internal(e.to_string())))?
        .map(Json)
}

async fn register(State(dapp): State<Arc<Dapp>>, body: Bytes) -> ApiResult<ProtocolMessage> {
    let msg: ProtocolMessage = parse_body(&body)?;
    blocking(&dapp, move |d| Ok(d.handle_register(&msg)?)).await
}

async fn login(State(dapp): State<Arc<Dapp>>, body: Bytes) -> ApiResult<ProtocolMessage> {
    let msg: ProtocolMessage = parse_body(&body)?;
    blocking(&dapp, move |d| Ok(d.handle_login(&msg)?)).await
}

async fn chat(State(dapp): State<Arc<Dapp>>, body: Bytes) -> ApiResult<ProtocolMessage> {
    let msg: ProtocolMessage = parse_body(&body)?;
    blocking(&dapp, move |d| Ok(d.handle_chat(&msg)?)).await
}

async fn nlu(State(dapp): State<Arc<Dapp>>, body: Bytes) -> ApiResult<bonik_core::nlu::NluResponse> {
    let req: NluRequest = parse_body(&body)?;
    blocking(&dapp, move |d| Ok(d.nlu().handle(&req)?)).await
}

#[derive(Deserialize)]
struct HistoryQuery {
    account: Option<String>,
}

async fn history(
    State(dapp): State<Arc<Dapp>>,
    headers: HeaderMap,
    Query(q): Query<HistoryQuery>,
) -> ApiResult<bonik_core::gateway::HistoryView> {
    let sid = bearer(&headers)?;
    blocking(&dapp, move |d| Ok(d.explorer_history(&sid, q.account.as_deref())?)).await
}

async fn block(
    State(dapp): State<Arc<Dapp>>,
    headers: HeaderMap,
    Path(height): Path<String>,
) -> ApiResult<bonik_core::gateway::BlockView> {
    let sid = bearer(&headers)?;
    let height: u64 = height.parse().map_err(|_| GatewayError::Protocol("block height must be an integer".into()))?;
    blocking(&dapp, move |d| Ok(d.explorer_block(&sid, height)?)).await
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub height: u64,
}

async fn health(State(dapp): State<Arc<Dapp>>) -> ApiResult<Health> {
    blocking(&dapp, |d| Ok(Health { status: "ok".into(), height: d.network().height() })).await
}

/// The gateway's public key and MSP certificate, so clients can seal M1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayKey {
    pub public_key: bonik_core::crypto::PublicKey,
    pub certificate: bonik_core::network::Certificate,
}

async fn gateway_key(State(dapp): State<Arc<Dapp>>) -> Json<GatewayKey> {
    Json(GatewayKey { public_key: *dapp.gateway_public_key(), certificate: dapp.gateway_certificate().clone() })
}

async fn not_found() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, code: "NOT_FOUND", message: "no such endpoint".into() }
}

pub fn router(dapp: Arc<Dapp>) -> Router {
    Router::new()
        .route("/api/register", post(register))
        .route("/api/login", post(login))
        .route("/api/chat", post(chat))
        .route("/api/nlu", post(nlu))
        .route("/api/explorer/history", get(history))
        .route("/api/explorer/block/{height}", get(block))
        .route("/api/health", get(health))
        .route("/api/gateway-key", get(gateway_key))
        .fallback(not_found)
        .with_state(dapp)
}

/// Serves until the future resolves, sweeping expired nonces and sessions
/// once a minute.
pub async fn serve(
    listener: TcpListener,
    dapp: Arc<Dapp>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let dapp = Arc::clone(&dapp);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(std::time::Duration::from_secs(60));
            loop {
                tick.tick().await;
                dapp.sweep();
            }
        })
    };
    let result = axum::serve(listener, router(Arc::clone(&dapp))).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    dapp.shutdown();
    result
}
