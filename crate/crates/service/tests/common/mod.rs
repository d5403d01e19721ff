#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, TimeZone, Utc};
use http_body_util::BodyExt;
use mmds_core::adapters::{AdapterScript, Backend, MockBackend};
use mmds_core::clock::SteppingClock;
use mmds_core::ingest::QAPair;
use mmds_service::engine::{Engine, EngineBackends};
use mmds_service::EngineConfig;
use serde_json::Value;
use tower::ServiceExt;

pub const REPORT_REPLY: &str = "SUMMARY: Symptoms reviewed against reference cases.\nFINDINGS: Presentation matches the cited cases.\nRECOMMENDATIONS: Follow up with the department clinic.";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

pub fn pairs() -> Vec<QAPair> {
    std::fs::read_to_string(fixture("pairs.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 3, 1, 9, 30, 0).unwrap()
}

pub fn clock() -> Arc<SteppingClock> {
    Arc::new(SteppingClock::fixed(t0()))
}

pub fn script() -> AdapterScript {
    AdapterScript::new(REPORT_REPLY)
        .with(r"Toy question number (0|4|8|12|16)\?", "The answer is A.")
        .unwrap()
        .with(r"Toy question", "I am not sure.")
        .unwrap()
}

pub fn mock() -> Arc<dyn Backend> {
    Arc::new(MockBackend::new(script()))
}

pub fn config(dir: &Path) -> EngineConfig {
    EngineConfig { data_dir: dir.to_path_buf(), ..EngineConfig::default() }
}

pub fn engine_with(config: EngineConfig, backends: EngineBackends) -> Arc<Engine> {
    Arc::new(Engine::with_backends(config, backends, clock()).unwrap())
}

pub fn engine(dir: &Path) -> Arc<Engine> {
    engine_with(config(dir), EngineBackends::uniform(mock()))
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call_raw(app, method, uri, body.map(|b| b.to_string())).await
}

pub async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, Body::from)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

/// Canonical JSON of a library result, for comparison with a response body.
pub fn canon<T: serde::Serialize>(value: &T) -> Value {
    serde_json::to_value(value).unwrap()
}

/// Compares `actual` with the frozen file `tests/golden/<name>.json`.
/// Setting `MMDS_BLESS=1` rewrites the file instead.
pub fn golden(name: &str, actual: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden").join(format!("{name}.json"));
    if std::env::var_os("MMDS_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(actual).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("golden {}: {e}", path.display()));
    let expected: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(actual, &expected, "golden mismatch for {name}");
}
