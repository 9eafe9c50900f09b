//! Walks one session through the HTTP API in-process: create, select twice,
//! approve, fetch the history.
//!
//! ```text
//! cargo run -p prefalign-service --example client
//! ```

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use prefalign::model::{Architecture, ModelParams};
use prefalign_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).expect("valid request");
    let resp = app.clone().oneshot(req).await.expect("router is infallible");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.expect("body reads").to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let model = ModelParams::init(&Architecture::default(), 0);
    let state = Arc::new(AppState::new(model, ServiceConfig { deterministic: true, ..ServiceConfig::default() })?);
    let app = router(state, None);

    let (status, s) = call(&app, "POST", "/sessions", Some(json!({"image_id": "phantom-0003", "config": {"seed": 9}}))).await;
    let id = s["session_id"].as_str().unwrap_or_default().to_string();
    println!("{status}: created {id}, iteration {}, {} proposals", s["iteration"], s["proposals"].as_array().map_or(0, Vec::len));

    for pick in [0, 2] {
        let (status, s) = call(&app, "POST", &format!("/sessions/{id}/selection"), Some(json!({"cluster_id": pick}))).await;
        println!("{status}: chose {pick}, now at iteration {}", s["iteration"]);
    }
    let (status, s) = call(&app, "POST", &format!("/sessions/{id}/approve"), None).await;
    println!("{status}: {} with final mask of {} runs", s["status"], s["final_mask"]["counts"].as_array().map_or(0, Vec::len));

    let (_, history) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    println!("history has {} records", history["history"].as_array().map_or(0, Vec::len));
    Ok(())
}
