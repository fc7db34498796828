//! The HTTP provider against a fake upstream, and the metering proxy under
//! concurrent experiment-code traffic.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use autolab::gateway::http::HttpProvider;
use autolab::gateway::proxy::{proxy_listen, spawn_server, RunCredentials, TOKEN_HEADER};
use autolab::gateway::scripted::{Scenario, ScriptRule, ScriptedProvider, ScriptedReply};
use autolab::gateway::{BudgetPolicy, Caller, CostScope, Gateway, GatewayError, ModelSession, PricingTable};
use autolab::gateway::{ProviderConfig, Stage};
use autolab::Micros;

#[derive(Clone)]
struct Upstream {
    calls: Arc<AtomicUsize>,
    fail_first: usize,
}

async fn fake_completion(State(up): State<Upstream>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some("Bearer upstream-key") {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let n = up.calls.fetch_add(1, Ordering::SeqCst);
    if n < up.fail_first {
        return (StatusCode::SERVICE_UNAVAILABLE, "overloaded").into_response();
    }
    let finish = if body["max_tokens"] == json!(5) { "length" } else { "stop" };
    Json(json!({
        "id": format!("cmpl-{n}"),
        "object": "chat.completion",
        "model": body["model"],
        "choices": [{"index": 0, "message": {"role": "assistant", "content": "pong"}, "finish_reason": finish}],
        "usage": {"prompt_tokens": 1200, "completion_tokens": 300, "total_tokens": 1500}
    }))
    .into_response()
}

fn upstream(fail_first: usize) -> (autolab::gateway::proxy::ServerHandle, Arc<AtomicUsize>) {
    let calls = Arc::new(AtomicUsize::new(0));
    let app = Router::new()
        .route("/v1/chat/completions", post(fake_completion))
        .with_state(Upstream {
            calls: calls.clone(),
            fail_first,
        });
    (spawn_server("fake-upstream", "127.0.0.1:0", app).unwrap(), calls)
}

fn http_config(url: &str, env: &str) -> ProviderConfig {
    ProviderConfig {
        provider_name: "fake".into(),
        endpoint: format!("{url}/v1/chat/completions"),
        credential_env: Some(env.into()),
        ..ProviderConfig::scripted("gpt-test", PricingTable::new(2_000_000, 8_000_000))
    }
}

#[test]
fn http_provider_retries_and_meters() {
    let (server, calls) = upstream(2);
    std::env::set_var("AUTOLAB_TEST_UPSTREAM_KEY", "upstream-key");
    let config = http_config(&server.url(), "AUTOLAB_TEST_UPSTREAM_KEY");
    let provider = HttpProvider::from_config(&config).unwrap();
    let gateway = Arc::new(Gateway::new(Arc::new(provider), config).with_retries(3, Duration::from_millis(5)));
    gateway
        .open_ledger("run-http", BudgetPolicy::default(), CostScope::All, None)
        .unwrap();
    let session = ModelSession::new(gateway.clone(), "run-http", "gpt-test");
    let reply = session.ask(Stage::Codegen, 1, "ping").unwrap();
    assert_eq!(reply.text, "pong");
    assert_eq!(calls.load(Ordering::SeqCst), 3, "two 503s then success");
    // 1200 × $2/M + 300 × $8/M = $0.0048
    assert_eq!(reply.usage.cost, Micros(4_800));
    assert_eq!(gateway.ledger_total("run-http").unwrap(), Micros(4_800));
}

#[test]
fn http_provider_reports_fatal_errors() {
    let (server, _) = upstream(0);
    std::env::set_var("AUTOLAB_TEST_WRONG_KEY", "not-the-key");
    let config = http_config(&server.url(), "AUTOLAB_TEST_WRONG_KEY");
    let gateway = Gateway::new(Arc::new(HttpProvider::from_config(&config).unwrap()), config)
        .with_retries(3, Duration::ZERO);
    gateway
        .open_ledger("run-401", BudgetPolicy::default(), CostScope::All, None)
        .unwrap();
    let err = ModelSession::new(Arc::new(gateway), "run-401", "gpt-test")
        .ask(Stage::Codegen, 1, "ping")
        .unwrap_err();
    // 401 is not retried
    assert!(matches!(err, GatewayError::Transport { attempts: 1, retryable: false, .. }), "{err}");

    let missing = http_config(&server.url(), "AUTOLAB_TEST_UNSET_VARIABLE");
    assert!(HttpProvider::from_config(&missing).is_err());
}

fn proxy_gateway(per_iteration: Micros) -> Arc<Gateway> {
    let scenario = Scenario::new(vec![ScriptRule {
        stage: Some(Stage::Experiment),
        reply: ScriptedReply {
            text: Some("answer".into()),
            input_tokens: Some(1_000),
            output_tokens: Some(250),
            ..Default::default()
        },
        ..Default::default()
    }]);
    let gateway = Arc::new(Gateway::new(
        Arc::new(ScriptedProvider::new(scenario)),
        ProviderConfig::scripted("m", PricingTable::new(1_000_000, 4_000_000)),
    ));
    let policy = BudgetPolicy {
        llm_cost_limit_per_iteration: per_iteration,
        ..Default::default()
    };
    for id in ["run-a", "run-b"] {
        gateway.open_ledger(id, policy.clone(), CostScope::All, None).unwrap();
    }
    gateway
}

fn chat(client: &reqwest::blocking::Client, url: &str, token: &str) -> (u16, Value) {
    let r = client
        .post(format!("{url}/v1/chat/completions"))
        .header(TOKEN_HEADER, token)
        .json(&json!({"model": "m", "messages": [{"role": "user", "content": "hi"}]}))
        .send()
        .unwrap();
    (r.status().as_u16(), r.json().unwrap_or(Value::Null))
}

#[test]
fn proxy_attributes_concurrent_calls_to_their_runs() {
    let gateway = proxy_gateway(Micros::from_dollars(10));
    gateway.set_iteration("run-a", 2).unwrap();
    gateway.set_iteration("run-b", 5).unwrap();
    let creds = RunCredentials::new();
    let tokens = [creds.issue("run-a"), creds.issue("run-b")];
    let proxy = proxy_listen("127.0.0.1:0", gateway.clone(), creds.clone()).unwrap();
    let url = proxy.url();

    let workers: Vec<_> = (0..8)
        .map(|i| {
            let token = tokens[i % 2].clone();
            let url = url.clone();
            std::thread::spawn(move || {
                let client = reqwest::blocking::Client::new();
                for _ in 0..25 {
                    let (status, body) = chat(&client, &url, &token);
                    assert_eq!(status, 200, "{body}");
                    assert_eq!(body["choices"][0]["message"]["content"], "answer");
                    assert_eq!(body["usage"]["total_tokens"], 1_250);
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    // each call: 1000 × $1/M + 250 × $4/M = $0.002
    for (id, iteration) in [("run-a", 2), ("run-b", 5)] {
        let ledger = gateway.ledger(id).unwrap();
        assert_eq!(ledger.records().len(), 100);
        assert_eq!(ledger.total(), Micros(200_000));
        assert!(ledger.records().iter().all(|r| r.run_id == id
            && r.caller == Caller::ExperimentCode
            && r.iteration_index == iteration));
    }

    let client = reqwest::blocking::Client::new();
    let usage: Value = client
        .get(format!("{url}/v1/usage"))
        .bearer_auth(&tokens[0])
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(usage["run_id"], "run-a");
    assert_eq!(usage["total_cost_micros"], 200_000);
    assert_eq!(usage["calls"], 100);

    creds.revoke(&tokens[0]);
    assert_eq!(chat(&client, &url, &tokens[0]).0, 401);
    assert_eq!(chat(&client, &url, "made-up").0, 401);
    proxy.shutdown();
}

#[test]
fn proxy_enforces_the_per_iteration_cap() {
    // $0.005 allows two $0.002 calls per iteration
    let gateway = proxy_gateway(Micros(5_000));
    let creds = RunCredentials::new();
    let token = creds.issue("run-a");
    let proxy = proxy_listen("127.0.0.1:0", gateway.clone(), creds).unwrap();
    let client = reqwest::blocking::Client::new();
    gateway.set_iteration("run-a", 1).unwrap();
    assert_eq!(chat(&client, &proxy.url(), &token).0, 200);
    assert_eq!(chat(&client, &proxy.url(), &token).0, 200);
    let (status, body) = chat(&client, &proxy.url(), &token);
    assert_eq!(status, 402);
    assert_eq!(body["error"]["type"], "budget_exceeded");
    assert_eq!(body["error"]["limit"], "per-iteration");
    gateway.set_iteration("run-a", 2).unwrap();
    assert_eq!(chat(&client, &proxy.url(), &token).0, 200);
    assert_eq!(gateway.ledger_total("run-a").unwrap(), Micros(6_000));
    assert_eq!(gateway.ledger_total("run-b").unwrap(), Micros::ZERO);
}
