use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use shortcut_lens::pipeline::{PipelineConfig, Runner};
use shortcut_lens::service::router;
use shortcut_lens::store::Store;
use tower::ServiceExt;

fn tiny() -> PipelineConfig {
    PipelineConfig::from_file(Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/tiny.toml"
    )))
    .unwrap()
}

/// A run taken through `export`, or through `detect` when asked.
fn prepared(store: &Store, config: &PipelineConfig, detect: bool) -> String {
    let mut r = Runner::create(store.clone(), config).unwrap();
    r.generate().unwrap();
    r.train().unwrap();
    r.export().unwrap();
    if detect {
        r.detect().unwrap();
    }
    r.run_id().to_string()
}

async fn call(store: &Store, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(store.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_run_is_404_with_error_body() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let (status, body) = call(&store, "GET", "/runs/01NOPE", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("not found"));
    let (status, body) = call(&store, "GET", "/runs", None).await;
    assert_eq!((status, body), (StatusCode::OK, json!([])));
}

#[tokio::test(flavor = "multi_thread")]
async fn stages_before_detect_are_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let id = prepared(&store, &tiny(), false);
    for (method, path, body) in [
        ("GET", "clusters", None),
        ("GET", "prototypes?cluster=0", None),
        ("POST", "mitigate", None),
        ("GET", "metrics", None),
        ("POST", "select", Some(json!({"source": "auto"}))),
    ] {
        let (status, body) = call(&store, method, &format!("/runs/{id}/{path}"), body).await;
        assert_eq!(status, StatusCode::CONFLICT, "{path}: {body}");
        assert!(body["error"].is_string());
    }
    let (status, body) = call(&store, "GET", "/runs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body[0]["run_id"], id.as_str());
    assert_eq!(body[0]["flags"]["exported"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn expert_override_mitigation_and_metrics_flow() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let id = prepared(&store, &tiny(), true);

    let (status, clusters) = call(&store, "GET", &format!("/runs/{id}/clusters"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(clusters["k"], 2);
    assert_eq!(clusters["stats"].as_array().unwrap().len(), 2);
    assert!(clusters["selection"].is_null());
    let auto = clusters["auto_selection"]["cluster"].as_u64().unwrap();
    let other = 1 - auto;

    let (status, protos) = call(&store, "GET", &format!("/runs/{id}/prototypes?cluster=0&limit=3"), None).await;
    assert_eq!(status, StatusCode::OK);
    let list = protos["prototypes"].as_array().unwrap();
    assert_eq!(list.len(), 3);
    assert!(list[0]["png_base64"].as_str().unwrap().len() > 20);
    let (status, _) = call(&store, "GET", &format!("/runs/{id}/prototypes?cluster=7"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(
        &store,
        "POST",
        &format!("/runs/{id}/select"),
        Some(json!({"source": "expert"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, sel) = call(
        &store,
        "POST",
        &format!("/runs/{id}/select"),
        Some(json!({"cluster": other, "source": "expert"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        (sel["cluster"].as_u64(), sel["source"].as_str()),
        (Some(other), Some("expert"))
    );
    assert_eq!(sel["auto_cluster"].as_u64(), Some(auto));
    let (status, _) = call(
        &store,
        "POST",
        &format!("/runs/{id}/select"),
        Some(json!({"source": "auto"})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, m1) = call(&store, "POST", &format!("/runs/{id}/mitigate"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(m1["cluster"].as_u64(), Some(other));
    let (status, m2) = call(&store, "POST", &format!("/runs/{id}/mitigate"), None).await;
    assert_eq!((status, &m2), (StatusCode::OK, &m1));
    let (status, metrics) = call(&store, "GET", &format!("/runs/{id}/metrics"), None).await;
    assert_eq!((status, &metrics), (StatusCode::OK, &m1));
    for variant in ["baseline", "asm", "asm_without_retraining", "group_balanced_retraining"] {
        assert!(metrics[variant]["wga"].is_number() && metrics[variant]["aga"].is_number());
    }
    // Metrics equal the file the CLI reads.
    let file: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join(&id).join("metrics.json")).unwrap()).unwrap();
    assert_eq!(file, metrics);

    // Switching cluster invalidates the metrics until mitigation reruns.
    let (status, _) = call(
        &store,
        "POST",
        &format!("/runs/{id}/select"),
        Some(json!({"cluster": auto, "source": "expert"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&store, "GET", &format!("/runs/{id}/metrics"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, m3) = call(&store, "POST", &format!("/runs/{id}/mitigate"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(m3["cluster"].as_u64(), Some(auto));

    let (status, run) = call(&store, "GET", &format!("/runs/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(run["flags"]["mitigated"], true);
}

#[tokio::test(flavor = "multi_thread")]
async fn concepts_are_generated_on_post() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let id = prepared(&store, &tiny(), true);
    let (status, _) = call(&store, "GET", &format!("/runs/{id}/concepts"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, posted) = call(&store, "POST", &format!("/runs/{id}/concepts"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(posted["clusters"].as_array().unwrap().len(), 2);
    assert!(posted["clusters"][0]["shortcut_candidate"].is_string());
    let (status, got) = call(&store, "GET", &format!("/runs/{id}/concepts"), None).await;
    assert_eq!((status, got), (StatusCode::OK, posted));
}

#[tokio::test(flavor = "multi_thread")]
async fn dead_provider_is_a_bad_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let mut config = tiny();
    config.concepts.provider = shortcut_lens::concepts::ProviderKind::Http;
    config.concepts.retries = 0;
    let id = prepared(&store, &config, true);
    // Only this test reads the provider variables.
    std::env::set_var("CONCEPT_API_BASE", "http://127.0.0.1:9");
    std::env::set_var("CONCEPT_CAPTION_MODEL", "c");
    std::env::set_var("CONCEPT_REFINE_MODEL", "r");
    let (status, body) = call(&store, "POST", &format!("/runs/{id}/concepts"), None).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{body}");
    assert!(body["error"].as_str().unwrap().starts_with("provider error"));
    let (status, _) = call(&store, "GET", &format!("/runs/{id}/concepts"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}
