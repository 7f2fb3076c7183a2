mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use abin_runhub::api::{router, CONFIG_HASH_HEADER};
use abin_runhub::Hub;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: impl Into<Body>) -> Reply {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

fn app(dir: &std::path::Path) -> Router {
    router(Arc::new(Hub::open(dir).unwrap()))
}

fn assert_error(r: &Reply, status: StatusCode, code: &str) {
    assert_eq!(r.status, status, "{}", String::from_utf8_lossy(&r.body));
    let v = r.json();
    assert_eq!(v["code"], code);
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(v.get("detail").is_some());
}

async fn wait_done(app: &Router, id: &str, stage: &str) -> Value {
    let start = Instant::now();
    loop {
        let r = call(app, "GET", &format!("/api/runs/{id}/jobs/{stage}"), Body::empty()).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        match v["status"]["state"].as_str().unwrap() {
            "done" => return v,
            "failed" => panic!("stage {stage} failed: {v}"),
            _ => {}
        }
        assert!(start.elapsed() < Duration::from_secs(120), "{stage} timed out");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn invalid_config_maps_to_400() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path());
    let body = json!({ "config": { "gnn": { "contamination": 0.7 } } }).to_string();
    assert_error(&call(&app, "POST", "/api/runs", body).await, StatusCode::BAD_REQUEST, "InvalidConfig");
    let r = call(&app, "POST", "/api/runs", "{not json").await;
    assert_error(&r, StatusCode::BAD_REQUEST, "BadRequest");
}

#[tokio::test]
async fn unknown_things_map_to_404() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path());
    assert_error(&call(&app, "GET", "/api/runs/nope", Body::empty()).await, StatusCode::NOT_FOUND, "NotFound");
    let id = call(&app, "POST", "/api/runs", Body::empty()).await.json()["run"]["run_id"].as_str().unwrap().to_string();
    let r = call(&app, "POST", &format!("/api/runs/{id}/stages/bogus"), Body::empty()).await;
    assert_error(&r, StatusCode::NOT_FOUND, "NotFound");
    let r = call(&app, "GET", &format!("/api/runs/{id}/artifacts/ml_metrics.json"), Body::empty()).await;
    assert_error(&r, StatusCode::NOT_FOUND, "NotFound");
    let r = call(&app, "GET", "/api/runs/..%2F..%2Fetc/artifacts/passwd", Body::empty()).await;
    assert_error(&r, StatusCode::NOT_FOUND, "NotFound");
}

#[tokio::test]
async fn dependency_error_is_409_with_detail() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path());
    let id = call(&app, "POST", "/api/runs", Body::empty()).await.json()["run"]["run_id"].as_str().unwrap().to_string();
    let r = call(&app, "POST", &format!("/api/runs/{id}/stages/embed"), Body::empty()).await;
    assert_error(&r, StatusCode::CONFLICT, "DependencyNotMet");
    assert_eq!(r.json()["detail"]["missing"], json!(["ingest"]));
}

#[tokio::test]
async fn upload_ingest_and_fetch_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(&tmp.path().join("ws"));
    let (sm, labels) = common::synthetic_series(21, 6, 18, 50, 2.5);

    let created = call(&app, "POST", "/api/runs", json!({ "seed": 7 }).to_string()).await;
    assert_eq!(created.status, StatusCode::CREATED);
    let created = created.json();
    let id = created["run"]["run_id"].as_str().unwrap().to_string();
    assert_eq!(created["config_hash"].as_str().unwrap().len(), 16);

    let r = call(&app, "POST", &format!("/api/runs/{id}/upload?kind=series_matrix&filename=GSE1_series_matrix.txt"), sm).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["run"]["config"]["dataset"]["series_matrix"], "uploads/GSE1_series_matrix.txt");
    let r = call(&app, "POST", &format!("/api/runs/{id}/upload?kind=labels&filename=../labels.csv"), labels).await;
    assert_eq!(r.json()["run"]["config"]["dataset"]["labels"], "uploads/labels.csv");
    let r = call(&app, "POST", &format!("/api/runs/{id}/upload?kind=weights&filename=a"), "x").await;
    assert_error(&r, StatusCode::BAD_REQUEST, "BadRequest");

    let r = call(&app, "POST", &format!("/api/runs/{id}/stages/ingest"), Body::empty()).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let job = wait_done(&app, &id, "ingest").await;
    assert_eq!(job["progress"], 1.0);

    let r = call(&app, "GET", &format!("/api/runs/{id}/artifacts/dataset_summary.json"), Body::empty()).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers["content-type"], "application/json");
    assert_eq!(r.headers[CONFIG_HASH_HEADER].to_str().unwrap(), job["config_hash"].as_str().unwrap());
    let summary = r.json();
    assert_eq!(summary["summary"]["n0"], 6);
    assert_eq!(summary["summary"]["n1"], 18);
    assert_eq!(summary["parsed_at"], Value::Null);

    // stage POST bodies patch that stage's config section
    let patch = json!({ "methods": ["pca"] }).to_string();
    let r = call(&app, "POST", &format!("/api/runs/{id}/stages/embed"), patch).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    wait_done(&app, &id, "embed").await;
    let r = call(&app, "GET", &format!("/api/runs/{id}/artifacts/embedding_pca.svg"), Body::empty()).await;
    assert_eq!(r.headers["content-type"], "image/svg+xml");
    let r = call(&app, "GET", &format!("/api/runs/{id}/artifacts/embedding_pca.csv"), Body::empty()).await;
    assert_eq!(String::from_utf8(r.body).unwrap().lines().count(), 25);

    let run = call(&app, "GET", &format!("/api/runs/{id}"), Body::empty()).await.json();
    assert_eq!(run["run"]["config"]["embed"]["methods"], json!(["pca"]));
    assert_eq!(run["run"]["status"]["embed"]["state"], "done");
    assert!(run["config_hash"].is_string());

    let r = call(&app, "POST", &format!("/api/runs/{id}/stages/ml"), json!({ "split": 1.5 }).to_string()).await;
    assert_error(&r, StatusCode::BAD_REQUEST, "InvalidConfig");

    let listed = call(&app, "GET", "/api/runs", Body::empty()).await.json();
    assert_eq!(listed["runs"].as_array().unwrap().len(), 1);

    let r = call(&app, "POST", "/api/reset?purge=true", Body::empty()).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_error(&call(&app, "GET", &format!("/api/runs/{id}"), Body::empty()).await, StatusCode::NOT_FOUND, "NotFound");
}

#[tokio::test]
async fn reset_without_purge_keeps_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path());
    let id = call(&app, "POST", "/api/runs", Body::empty()).await.json()["run"]["run_id"].as_str().unwrap().to_string();
    assert_eq!(call(&app, "POST", "/api/reset", Body::empty()).await.status, StatusCode::OK);
    assert_eq!(call(&app, "GET", &format!("/api/runs/{id}"), Body::empty()).await.status, StatusCode::OK);
}
