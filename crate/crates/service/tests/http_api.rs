mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use needle_service::{api, Service};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn poll_until(app: &Router, uri: &str, done: impl Fn(&Value) -> bool) -> Value {
    for _ in 0..1000 {
        let (s, v) = json_call(app, Method::GET, uri, None).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        if done(&v) {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("{uri} never settled");
}

fn settled(v: &Value) -> bool {
    !matches!(v["state"].as_str(), Some("generating" | "searching"))
}

fn assert_error(v: &Value, code: &str) {
    assert_eq!(v["code"], code, "{v}");
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()), "{v}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn index_job_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(Service::new(common::mock_config(dir.path(), 12, 2)).unwrap());
    let app = api::router(svc);
    let (s, job) = json_call(&app, Method::POST, "/v1/datasets/default/index", None).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{job}");
    let uri = format!("/v1/jobs/{}", job["job_id"].as_str().unwrap());
    let done = poll_until(&app, &uri, |v| matches!(v["state"].as_str(), Some("done" | "failed"))).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["count"], 12);
    assert_eq!(done["progress"]["images_done"], 12);
    assert_eq!(done["progress"]["embeddings_done"]["mock-e1"], 12);

    let (s, v) = json_call(&app, Method::POST, "/v1/datasets/default/index", None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "already_indexed");
    let (s, _) = json_call(&app, Method::POST, "/v1/datasets/default/index?force=true", None).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (s, v) = json_call(&app, Method::POST, "/v1/datasets/nope/index", Some(json!({"force": true}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&v, "not_found");
    let (s, v) = json_call(&app, Method::GET, "/v1/jobs/job-999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&v, "not_found");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn review_flow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = api::router(common::indexed_service(dir.path(), 100, 4));

    let (s, v) = json_call(
        &app,
        Method::POST,
        "/v1/search",
        Some(json!({"text": "a red apple", "topic": "food", "k": 5, "feedback_mode": "on"})),
    )
    .await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let id = v["query_id"].as_str().unwrap().to_owned();
    let session = format!("/v1/search/{id}");
    let parked = poll_until(&app, &session, settled).await;
    assert_eq!(parked["state"], "awaiting_review");
    assert_eq!(parked["results"].as_array().unwrap().len(), 0);

    let (s, guides) = json_call(&app, Method::GET, &format!("{session}/guides"), None).await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<u64> = guides["guides"].as_array().unwrap().iter().map(|g| g["guide_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![0, 1, 2, 3]);

    let approve = format!("{session}/guides/approve");
    let (s, v) = json_call(&app, Method::POST, &approve, Some(json!({"keep": []}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "bad_request");
    let (s, v) = json_call(&app, Method::POST, &format!("{session}/feedback"), Some(json!({"irrelevant": []}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "invalid_state");

    let (s, v) = json_call(&app, Method::POST, &approve, Some(json!({"keep": [0, 2, 3]}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let done = poll_until(&app, &session, settled).await;
    assert_eq!(done["state"], "done", "{done}");
    let results = done["results"].as_array().unwrap();
    assert_eq!(results.len(), 5);
    assert_eq!(done["guides"][1]["discarded"], true);

    let (s, v) = json_call(&app, Method::POST, &approve, Some(json!({"keep": [0]}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "invalid_state");

    let feedback = format!("{session}/feedback");
    let (s, v) = json_call(&app, Method::POST, &feedback, Some(json!({"irrelevant": [987654]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "bad_request");
    let bad = results[0]["image_id"].clone();
    let (s, out) = json_call(&app, Method::POST, &feedback, Some(json!({"irrelevant": [bad]}))).await;
    assert_eq!(s, StatusCode::OK, "{out}");
    assert_eq!(out["topic"], "food");
    let (s, v) = json_call(&app, Method::POST, &feedback, Some(json!({"irrelevant": [bad]}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_error(&v, "feedback_replayed");

    let (s, w) = json_call(&app, Method::GET, "/v1/weights", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(w["topics"]["food"], out["weights"]);
    assert_eq!(w["uniform"]["mock-e1"], 0.5);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_use_code_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let app = api::router(common::indexed_service(dir.path(), 10, 2));
    let (s, v) = json_call(&app, Method::GET, "/v1/search/q-nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&v, "not_found");
    let (s, b) = call(&app, Method::POST, "/v1/search", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{}", String::from_utf8_lossy(&b));
    let req = Request::post("/v1/search").body(Body::from("{not json")).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let (s, v) = json_call(&app, Method::POST, "/v1/search", Some(json!({"text": ""}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_error(&v, "bad_request");
    let (s, v) = json_call(&app, Method::POST, "/v1/search", Some(json!({"text": "apple", "dataset": "other"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&v, "not_found");
    let (s, v) = json_call(&app, Method::GET, "/v1/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_error(&v, "not_found");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn feedback_off_search_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 60, 4);
    let app = api::router(svc.clone());
    let (s, v) = json_call(&app, Method::POST, "/v1/search", Some(json!({"text": "zebra? no: elephant", "k": 6}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let done = poll_until(&app, &format!("/v1/search/{}", v["query_id"].as_str().unwrap()), settled).await;
    assert_eq!(done["state"], "done", "{done}");
    assert_eq!(done["feedback_mode"], "off");
    let first = done["results"][0]["image_id"].as_u64().unwrap();

    let (s, bytes) = call(&app, Method::GET, &format!("/images/{first}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, *svc.image(None, needle_core::ImageId(first), None).unwrap().bytes);
    let (s, bytes) = call(&app, Method::GET, &format!("/images/{first}?size=8&dataset=default"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(needle_core::adapter::decode_image(&bytes).unwrap().dimensions(), (8, 8));
    let (s, _) = call(&app, Method::GET, "/images/5000", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_feedback_serializes_trust_writes() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 60, 2);
    let ids: Vec<String> = (0..8)
        .map(|_| {
            svc.search(needle_service::SearchRequest {
                text: "harbor".into(),
                k: Some(5),
                ..Default::default()
            })
            .unwrap()
            .query_id
        })
        .collect();
    let handles: Vec<_> = ids
        .iter()
        .map(|id| {
            let svc = svc.clone();
            let id = id.clone();
            tokio::task::spawn_blocking(move || {
                let top = svc.session(&id).unwrap().results[0].image_id;
                svc.submit_feedback(&id, &[top]).unwrap()
            })
        })
        .collect();
    for h in handles {
        h.await.unwrap();
    }
    let table = svc.trust_snapshot();
    let on_disk = needle_core::TrustTable::load(&svc.config().trust_path).unwrap();
    assert_eq!(table, on_disk);
    assert!((table.weights("general").values().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn served_on_a_real_socket() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::indexed_service(dir.path(), 20, 2);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = rt.spawn(api::serve_on(svc, listener, async {
        let _ = rx.await;
    }));
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let w: Value = agent
        .get(&format!("http://{addr}/v1/weights"))
        .call()
        .unwrap()
        .body_mut()
        .read_json()
        .unwrap();
    assert_eq!(w["embedders"], json!(["mock-e1", "mock-e2"]));
    tx.send(()).unwrap();
    rt.block_on(server).unwrap().unwrap();
}
