//! HTTP metering proxy for calls made by experiment code.
//!
//! Experiment programs receive the proxy address and a per-run token in their
//! environment (`LLM_PROXY_URL`, `LLM_PROXY_TOKEN`) and POST chat-completion
//! requests to `/v1/chat/completions` with the token in `X-Run-Token` (or as a
//! bearer token). The token selects the run's ledger; the call is attributed
//! to the run's current debug iteration.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::RngCore;
use serde::Serialize;
use tokio::sync::oneshot;
use tracing::{info, warn};

use super::http::{ChatChoice, ChatRequest, ChatResponse, ChatUsage, ErrorBody, ErrorDetail};
use super::provider::{CallContext, CompletionRequest, DecodingParams, Message, Role, Stage};
use super::{BudgetLimit, Caller, Gateway, GatewayError};

pub const TOKEN_HEADER: &str = "x-run-token";
pub const ENV_PROXY_URL: &str = "LLM_PROXY_URL";
pub const ENV_PROXY_TOKEN: &str = "LLM_PROXY_TOKEN";

/// Token → ledger id map shared between the proxy and whoever launches runs.
#[derive(Clone, Default)]
pub struct RunCredentials {
    inner: Arc<RwLock<HashMap<String, String>>>,
}

impl RunCredentials {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mint a fresh random token for `ledger`.
    pub fn issue(&self, ledger: &str) -> String {
        let mut bytes = [0u8; 16];
        rand::rng().fill_bytes(&mut bytes);
        let token = hex::encode(bytes);
        self.insert(&token, ledger);
        token
    }

    pub fn insert(&self, token: &str, ledger: &str) {
        self.inner
            .write()
            .unwrap()
            .insert(token.to_string(), ledger.to_string());
    }

    pub fn revoke(&self, token: &str) {
        self.inner.write().unwrap().remove(token);
    }

    pub fn resolve(&self, token: &str) -> Option<String> {
        self.inner.read().unwrap().get(token).cloned()
    }
}

#[derive(Clone)]
struct ProxyState {
    gateway: Arc<Gateway>,
    credentials: RunCredentials,
}

pub fn router(gateway: Arc<Gateway>, credentials: RunCredentials) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/v1/usage", get(usage))
        .with_state(ProxyState {
            gateway,
            credentials,
        })
}

fn error(status: StatusCode, kind: &str, message: String, limit: Option<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: ErrorDetail {
                kind: kind.into(),
                message,
                limit,
            },
        }),
    )
        .into_response()
}

fn token_from(headers: &HeaderMap) -> Option<String> {
    if let Some(v) = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) {
        return Some(v.trim().to_string());
    }
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(|v| v.trim().to_string())
}

fn authorize(state: &ProxyState, headers: &HeaderMap) -> Option<String> {
    token_from(headers).and_then(|t| state.credentials.resolve(&t))
}

fn unauthorized() -> Response {
    error(
        StatusCode::UNAUTHORIZED,
        "unauthorized",
        "missing or unknown run token".into(),
        None,
    )
}

async fn chat_completions(
    State(state): State<ProxyState>,
    headers: HeaderMap,
    Json(body): Json<ChatRequest>,
) -> Response {
    let Some(ledger) = authorize(&state, &headers) else {
        return unauthorized();
    };
    let gateway = state.gateway.clone();
    let model = body.model.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let iteration = gateway.current_iteration(&ledger)?;
        gateway.complete(CompletionRequest {
            ctx: CallContext {
                ledger,
                iteration,
                stage: Stage::Experiment,
                attempt: None,
                caller: Caller::ExperimentCode,
            },
            model: body.model,
            messages: body.messages,
            params: DecodingParams {
                temperature: body.temperature,
                max_output_tokens: body.max_tokens,
            },
        })
    })
    .await;
    let completion = match outcome {
        Ok(Ok(c)) => c,
        Ok(Err(e)) => return gateway_error(e),
        Err(join) => {
            return error(
                StatusCode::INTERNAL_SERVER_ERROR,
                "internal",
                join.to_string(),
                None,
            )
        }
    };
    let usage = &completion.usage;
    Json(ChatResponse {
        id: usage.call_id.clone(),
        object: "chat.completion".into(),
        model,
        choices: vec![ChatChoice {
            index: 0,
            message: Message {
                role: Role::Assistant,
                content: completion.text.clone(),
            },
            finish_reason: if usage.truncated { "length" } else { "stop" }.into(),
        }],
        usage: ChatUsage {
            prompt_tokens: usage.input_tokens,
            completion_tokens: usage.output_tokens,
            total_tokens: usage.input_tokens + usage.output_tokens,
        },
    })
    .into_response()
}

fn gateway_error(e: GatewayError) -> Response {
    match &e {
        GatewayError::Budget(d) => {
            let limit = match d.limit {
                BudgetLimit::Total => "total",
                BudgetLimit::PerIteration => "per-iteration",
            };
            error(
                StatusCode::PAYMENT_REQUIRED,
                "budget_exceeded",
                e.to_string(),
                Some(limit.into()),
            )
        }
        GatewayError::UnknownModel(_) => {
            error(StatusCode::BAD_REQUEST, "unknown_model", e.to_string(), None)
        }
        GatewayError::UnknownLedger(_) => {
            error(StatusCode::UNAUTHORIZED, "unauthorized", e.to_string(), None)
        }
        GatewayError::Transport { .. } => {
            error(StatusCode::BAD_GATEWAY, "upstream_error", e.to_string(), None)
        }
        _ => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            e.to_string(),
            None,
        ),
    }
}

#[derive(Serialize)]
struct UsageView {
    run_id: String,
    total_cost_micros: u64,
    calls: usize,
    current_iteration: u32,
    current_iteration_cost_micros: u64,
}

async fn usage(State(state): State<ProxyState>, headers: HeaderMap) -> Response {
    let Some(ledger_id) = authorize(&state, &headers) else {
        return unauthorized();
    };
    let view = state.gateway.ledger(&ledger_id).and_then(|l| {
        let it = state.gateway.current_iteration(&ledger_id)?;
        Ok(UsageView {
            run_id: ledger_id.clone(),
            total_cost_micros: l.total().get(),
            calls: l.records().len(),
            current_iteration: it,
            current_iteration_cost_micros: l.iteration_total(it).get(),
        })
    });
    match view {
        Ok(v) => Json(v).into_response(),
        Err(e) => gateway_error(e),
    }
}

/// An HTTP server running on its own thread and runtime. Dropping the handle
/// stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

pub type ProxyHandle = ServerHandle;

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL, e.g. `http://127.0.0.1:4100`.
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Block until the server exits on its own.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Bind `bind` and serve `app` on a background thread.
pub fn spawn_server(name: &str, bind: &str, app: Router) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let label = name.to_string();
    let thread = std::thread::Builder::new().name(label.clone()).spawn(move || {
        let rt = match tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
        {
            Ok(rt) => rt,
            Err(e) => {
                warn!(server = %label, error = %e, "runtime failed to start");
                return;
            }
        };
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::from_std(listener) {
                Ok(l) => l,
                Err(e) => {
                    warn!(server = %label, error = %e, "listener failed");
                    return;
                }
            };
            info!(server = %label, %addr, "listening");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    })?;
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Bind `bind` and serve the proxy until the returned handle is dropped.
pub fn proxy_listen(
    bind: &str,
    gateway: Arc<Gateway>,
    credentials: RunCredentials,
) -> std::io::Result<ProxyHandle> {
    spawn_server("llm-proxy", bind, router(gateway, credentials))
}
