use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cellpilot::eval::EvalSetup;
use cellpilot_gateway::server::router;
use cellpilot_gateway::sessions::SessionManager;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(speed: f64) -> Router {
    router(Arc::new(SessionManager::new(EvalSetup::bundled(), "rule_oracle", None, speed)))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn wait_for(app: &Router, id: &str, status: &str) -> Value {
    for _ in 0..500 {
        let (_, s) = call(app, "GET", &format!("/sessions/{id}"), None).await;
        if s["status"] == status {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("session {id} never reached {status}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn create_and_read_events() {
    let app = app(0.0);
    let (status, created) = call(&app, "POST", "/sessions", Some(json!({"scenario": "golden_handover"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = created["id"].as_str().unwrap().to_string();
    wait_for(&app, &id, "finished").await;
    let (_, events) = call(&app, "GET", &format!("/sessions/{id}/events?since=0"), None).await;
    assert_eq!(events["lines"][0], "[00:00:14] Sensor BG56 detects an object at the entrance.");
    let (_, state) = call(&app, "GET", &format!("/sessions/{id}/state"), None).await;
    assert_eq!(state["state"]["signals"]["conveyor1.H1.engaged"], json!(false));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn incremental_polls_partition_the_log() {
    // paced so polls interleave with appends
    let app = app(20.0);
    let (_, created) = call(&app, "POST", "/sessions", Some(json!({"scenario": "golden_handover"}))).await;
    let id = created["id"].as_str().unwrap().to_string();
    let mut since = 0;
    let mut seen: Vec<u64> = Vec::new();
    let mut polls = 0;
    loop {
        let (_, page) = call(&app, "GET", &format!("/sessions/{id}/events?since={since}&wait_ms=200"), None).await;
        polls += 1;
        for r in page["records"].as_array().unwrap() {
            seen.push(r["seq"].as_u64().unwrap());
        }
        since = page["next_since"].as_u64().unwrap();
        if page["status"] != "running" && page["records"].as_array().unwrap().is_empty() {
            break;
        }
    }
    assert!(polls > 3);
    let expected: Vec<u64> = (1..=seen.len() as u64).collect();
    assert_eq!(seen, expected);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn approvals_gate_execution() {
    let app = app(0.0);
    let (_, created) = call(&app, "POST", "/sessions", Some(json!({"scenario": "stuck_workpiece", "approval": "human"}))).await;
    let id = created["id"].as_str().unwrap().to_string();
    let mut executed = 0;
    loop {
        let s = call(&app, "GET", &format!("/sessions/{id}"), None).await.1;
        if s["status"] == "finished" {
            break;
        }
        if s["status"] != "awaiting_approval" {
            tokio::time::sleep(Duration::from_millis(10)).await;
            continue;
        }
        let (_, list) = call(&app, "GET", &format!("/sessions/{id}/approvals"), None).await;
        let pending = list["approvals"].as_array().unwrap().iter().find(|a| a["status"] == "pending").unwrap().clone();
        let key = pending["id"].as_str().unwrap();
        let (status, resolved) = call(&app, "POST", &format!("/approvals/{key}"), Some(json!({"verdict": "approved", "actor": "alice"}))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(resolved["result"]["status"], "ok");
        executed += 1;
        let (status, again) = call(&app, "POST", &format!("/approvals/{key}"), Some(json!({"verdict": "approved"}))).await;
        assert_eq!(status, StatusCode::CONFLICT);
        assert_eq!(again["code"], "already_resolved");
    }
    // belt run, wait, alert
    assert_eq!(executed, 3);
    let (_, events) = call(&app, "GET", &format!("/sessions/{id}/events?since=0"), None).await;
    let last = events["lines"].as_array().unwrap().last().unwrap().as_str().unwrap().to_string();
    assert!(last.contains("Alert sent to human supervisor"), "{last}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn task_endpoint_plans() {
    let app = app(0.0);
    let (_, created) = call(&app, "POST", "/sessions", Some(json!({"scenario": "golden_handover"}))).await;
    let id = created["id"].as_str().unwrap();
    let (status, err) = call(&app, "POST", &format!("/sessions/{id}/task"), Some(json!({"text": "Transport workpiece W1 to conveyor2."}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(err["code"], "no_manager");
    let (status, err) = call(&app, "POST", &format!("/sessions/{id}/task"), Some(json!({"text": " "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "empty_task");
}

#[tokio::test]
async fn request_errors_are_structured() {
    let app = app(0.0);
    let (status, err) = call(&app, "POST", "/sessions", Some(json!({"scenario": "nope"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "unknown_scenario");
    let (status, err) = call(&app, "POST", "/sessions", Some(json!({"nothing": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "invalid_request");
    let (status, err) = call(&app, "GET", "/sessions/s99/state", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "not_found");
    let (status, _) = call(&app, "POST", "/approvals/garbage", Some(json!({"verdict": "approved"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, err) = call(&app, "POST", "/sessions", Some(json!({"scenario": "golden_handover", "backend": "gpt"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "invalid_backend");
}

#[tokio::test]
async fn services_lists_catalog() {
    let app = app(0.0);
    let (status, body) = call(&app, "GET", "/services", None).await;
    assert_eq!(status, StatusCode::OK);
    let catalog = body["catalog"].as_str().unwrap();
    assert!(catalog.contains("`activate_material_holder()`"));
    assert!(body["services"].as_array().unwrap().len() >= 9);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn eval_endpoint_reports_and_checks_thresholds() {
    let app = app(0.0);
    let (status, body) = call(
        &app,
        "POST",
        "/eval/run",
        Some(json!({"suite": "suite100", "backends": ["adversarial"], "thresholds": {"executable": 0.5}})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["passed"], false);
    assert!(body["table"].as_str().unwrap().contains("adversarial"));
    assert_eq!(body["reports"][0]["overall"]["executable"]["num"], 0);
}
