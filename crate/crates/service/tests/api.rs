use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use prefrl_core::env::{make_env, EnvId, FrameView};
use prefrl_core::feedback::{FeedbackQueue, LogWriter, QueryLine, PAIR_EXPIRY_MS};
use prefrl_core::segment::SegmentId;
use prefrl_service::{router, spawn, spawn_for_run, ServiceConfig, ServiceHandle};
use serde_json::Value;
use tower::ServiceExt;

fn frame_wire() -> String {
    let mut env = make_env(EnvId::Pendulum);
    env.reset(3);
    env.render_frame(FrameView::Labeler).to_wire()
}

fn query(id: &str, enqueued_ms: u64) -> QueryLine {
    let f = frame_wire();
    QueryLine {
        pair_id: id.to_string(),
        seg1: SegmentId(1),
        seg2: SegmentId(2),
        fps: 20.0,
        enqueued_ms,
        left: vec![f.clone(), f.clone()],
        right: vec![f],
    }
}

fn test_config(clock: Arc<AtomicU64>) -> ServiceConfig {
    let mut config = ServiceConfig::new("pendulum");
    config.refresh_interval = Duration::from_millis(20);
    config.clock = Arc::new(move || clock.load(Ordering::SeqCst));
    config
}

async fn call(handle: &ServiceHandle, method: &str, path: &str, body: Option<Value>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let req = Request::builder().method(method).uri(path);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(handle.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, bytes)
}

async fn label(handle: &ServiceHandle, id: &str, choice: &str) -> (StatusCode, Value) {
    let (status, _, body) =
        call(handle, "POST", "/api/v1/label", Some(serde_json::json!({"pair_id": id, "choice": choice, "latency_ms": 1500}))).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

#[tokio::test]
async fn empty_queue_returns_retry_hint() {
    let handle = spawn(FeedbackQueue::in_memory(), test_config(Arc::new(AtomicU64::new(0))));
    let (status, headers, body) = call(&handle, "GET", "/api/v1/pair", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert!(body.is_empty());
    assert_eq!(headers["retry-after-ms"], "2000");
}

#[tokio::test]
async fn served_pair_carries_frames_verbatim() {
    let handle = spawn(FeedbackQueue::in_memory(), test_config(Arc::new(AtomicU64::new(0))));
    assert!(handle.enqueue(query("p1", 5)).await);
    let (status, _, body) = call(&handle, "GET", "/api/v1/pair", None).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    assert!(text.contains(&frame_wire()));
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["pair_id"], "p1");
    assert_eq!(v["fps"], 20.0);
    assert_eq!(v["left"].as_array().unwrap().len(), 2);
    assert_eq!(v["right"].as_array().unwrap().len(), 1);
    // In flight, so not served again.
    let (status, _, _) = call(&handle, "GET", "/api/v1/pair", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn oldest_pair_first_and_expired_pairs_are_reserved() {
    let clock = Arc::new(AtomicU64::new(1_000));
    let handle = spawn(FeedbackQueue::in_memory(), test_config(clock.clone()));
    handle.enqueue(query("late", 20)).await;
    handle.enqueue(query("early", 10)).await;
    assert_eq!(handle.serve_pair().await.unwrap().pair_id, "early");
    assert_eq!(handle.serve_pair().await.unwrap().pair_id, "late");
    assert!(handle.serve_pair().await.is_none());
    clock.fetch_add(PAIR_EXPIRY_MS, Ordering::SeqCst);
    assert_eq!(handle.serve_pair().await.unwrap().pair_id, "early");
    assert_eq!(handle.serve_pair().await.unwrap().pair_id, "late");
}

#[tokio::test]
async fn choices_map_to_outcomes_and_duplicates_are_rejected() {
    let handle = spawn(FeedbackQueue::in_memory(), test_config(Arc::new(AtomicU64::new(0))));
    for id in ["a", "b", "c"] {
        handle.enqueue(query(id, 0)).await;
    }
    let (status, _) = label(&handle, "a", "left").await;
    assert_eq!(status, StatusCode::CONFLICT, "not yet served");
    for _ in 0..3 {
        handle.serve_pair().await.unwrap();
    }
    assert_eq!(label(&handle, "a", "tie").await, (StatusCode::OK, serde_json::json!({"status": "stored", "choice": "tie"})));
    assert_eq!(label(&handle, "b", "cant_tell").await, (StatusCode::OK, serde_json::json!({"status": "discarded"})));
    let (status, body) = label(&handle, "a", "right").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "already_answered");
    let (status, body) = label(&handle, "zzz", "left").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_pair");
    let (status, _, _) = call(&handle, "POST", "/api/v1/label", Some(serde_json::json!({"pair_id": "c", "choice": "sideways"}))).await;
    assert!(status.is_client_error());

    let (_, _, body) = call(&handle, "GET", "/api/v1/metrics", None).await;
    let m: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(m["labels_stored"], 1);
    assert_eq!(m["cant_tell"], 1);
    assert_eq!(m["median_latency_ms"], 1500.0);
    assert_eq!(m["in_flight"], 1);
    assert_eq!(m["queue_depth"], 0);
}

#[tokio::test]
async fn fresh_service_reports_zero_counters() {
    let handle = spawn(FeedbackQueue::in_memory(), test_config(Arc::new(AtomicU64::new(0))));
    let (_, _, body) = call(&handle, "GET", "/api/v1/metrics", None).await;
    let m: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(m["labels_stored"], 0);
    assert_eq!(m["cant_tell"], 0);
    assert_eq!(m["median_latency_ms"], Value::Null);
    assert_eq!(m["queue_depth"], 0);
}

#[tokio::test]
async fn instructions_follow_the_environment() {
    let handle = spawn(FeedbackQueue::in_memory(), test_config(Arc::new(AtomicU64::new(0))));
    let (_, _, body) = call(&handle, "GET", "/api/v1/instructions", None).await;
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["env"], "pendulum");
    assert!(v["text"].as_str().unwrap().contains("pointing approximately up"));
}

#[tokio::test]
async fn run_directory_queries_are_picked_up_and_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(AtomicU64::new(0));
    let mut writer = LogWriter::queries(dir.path()).unwrap();
    writer.append(&query("q0", 0)).unwrap();
    writer.append(&query("q1", 1)).unwrap();
    {
        let handle = spawn_for_run(dir.path(), test_config(clock.clone())).unwrap();
        assert_eq!(handle.serve_pair().await.unwrap().pair_id, "q0");
        assert_eq!(label(&handle, "q0", "left").await.0, StatusCode::OK);
        writer.append(&query("q2", 2)).unwrap();
        tokio::time::sleep(Duration::from_millis(100)).await;
        assert_eq!(handle.metrics().queue_depth, 2);
    }
    let handle = spawn_for_run(dir.path(), test_config(clock)).unwrap();
    assert_eq!(handle.metrics().labels_stored, 1);
    let served: Vec<String> = [handle.serve_pair().await, handle.serve_pair().await]
        .into_iter()
        .map(|q| q.unwrap().pair_id)
        .collect();
    assert_eq!(served, vec!["q1", "q2"]);
    assert!(handle.serve_pair().await.is_none());
    assert_eq!(label(&handle, "q0", "right").await.0, StatusCode::CONFLICT);
}
