use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use shortcut_lens::concepts::{
    caption_patches, describe_clusters, first_sentence, refine_prompt, summarize_concepts, CallResult, Caption,
    Captioner, ConceptsConfig, HttpProvider, HttpSettings, ProviderError, Refiner, StubCaptioner, StubRefiner,
    CAPTION_PROMPT, REFINE_PROMPT, STUB_MARKER_CAPTION, STUB_MARKER_CONCEPT, STUB_TEXTURE_CAPTION,
    STUB_TEXTURE_CONCEPT,
};
use shortcut_lens::detection::{PatchKey, PrototypeBank, ScoredPatch};
use shortcut_lens::image::Image;

fn fast_config() -> ConceptsConfig {
    ConceptsConfig {
        backoff_ms: 1,
        timeout_secs: 5,
        ..Default::default()
    }
}

fn caption(text: &str) -> Caption {
    Caption {
        text: Some(text.into()),
        error: None,
        provider: "test".into(),
        latency_ms: 0,
        attempts: 1,
    }
}

#[test]
fn prompts_are_exact() {
    assert_eq!(CAPTION_PROMPT, "What is in this picture? Describe in a few words.");
    assert!(REFINE_PROMPT.starts_with("I extracted patches from images in my dataset"));
    assert!(REFINE_PROMPT.ends_with("No other explanations are needed. Descriptions:"));
    let (p, used) = refine_prompt(&["a".into(), "b".into()], 10_000);
    assert_eq!(p, format!("{REFINE_PROMPT}\na\nb"));
    assert_eq!(used, 2);
    let (_, used) = refine_prompt(&["x".repeat(50), "y".repeat(50)], REFINE_PROMPT.len() + 60);
    assert_eq!(used, 1);
}

#[test]
fn stub_captioner_follows_patch_brightness() {
    let cfg = fast_config();
    let glyph = Image::filled(8, 1, 1.0);
    let texture = Image::filled(8, 1, 0.4);
    let caps = caption_patches(&[glyph, texture], &StubCaptioner, &cfg);
    assert_eq!(caps[0].text.as_deref(), Some(STUB_MARKER_CAPTION));
    assert_eq!(caps[1].text.as_deref(), Some(STUB_TEXTURE_CAPTION));
    assert_eq!(caps[0].provider, "stub");
}

#[test]
fn stub_refiner_majority_rule() {
    let cfg = fast_config();
    let mostly_marker: Vec<Caption> = (0..10)
        .map(|i| {
            caption(if i < 6 {
                STUB_MARKER_CAPTION
            } else {
                STUB_TEXTURE_CAPTION
            })
        })
        .collect();
    let s = summarize_concepts(0, mostly_marker, &StubRefiner, &cfg).unwrap();
    assert_eq!(s.shortcut_candidate.as_deref(), Some(STUB_MARKER_CONCEPT));
    let few: Vec<Caption> = (0..10)
        .map(|i| {
            caption(if i < 5 {
                STUB_MARKER_CAPTION
            } else {
                STUB_TEXTURE_CAPTION
            })
        })
        .collect();
    let s = summarize_concepts(1, few, &StubRefiner, &cfg).unwrap();
    assert_eq!(s.shortcut_candidate.as_deref(), Some(STUB_TEXTURE_CONCEPT));
    assert!(summarize_concepts(2, vec![], &StubRefiner, &cfg).is_err());
}

#[test]
fn first_sentence_keeps_one_sentence() {
    assert_eq!(first_sentence("  Blue circles. Also rulers."), "Blue circles.");
    assert_eq!(first_sentence("v1.2 markers! more"), "v1.2 markers!");
    assert_eq!(first_sentence("no terminator"), "no terminator");
}

struct Flaky {
    calls: AtomicUsize,
    fail_first: usize,
    transient: bool,
}

impl Captioner for Flaky {
    fn id(&self) -> String {
        "flaky".into()
    }
    fn caption(&self, _image: &Image, _prompt: &str) -> CallResult {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
            return Err(if self.transient {
                ProviderError::transient("busy")
            } else {
                ProviderError::fatal("denied")
            });
        }
        Ok("ok".into())
    }
}

#[test]
fn transient_failures_are_retried_and_fatal_ones_are_not() {
    let cfg = ConceptsConfig {
        max_in_flight: 1,
        ..fast_config()
    };
    let img = [Image::filled(4, 1, 0.0)];
    let flaky = Flaky {
        calls: AtomicUsize::new(0),
        fail_first: 3,
        transient: true,
    };
    let c = &caption_patches(&img, &flaky, &cfg)[0];
    assert_eq!((c.text.as_deref(), c.attempts), (Some("ok"), 4));

    let flaky = Flaky {
        calls: AtomicUsize::new(0),
        fail_first: 4,
        transient: true,
    };
    let c = &caption_patches(&img, &flaky, &cfg)[0];
    assert_eq!(
        (c.text.as_deref(), c.error.as_deref(), c.attempts),
        (None, Some("busy"), 4)
    );

    let fatal = Flaky {
        calls: AtomicUsize::new(0),
        fail_first: 1,
        transient: false,
    };
    let c = &caption_patches(&img, &fatal, &cfg)[0];
    assert_eq!((c.error.as_deref(), c.attempts), (Some("denied"), 1));
}

// ---- mock chat-completions server ----

#[derive(Default)]
struct Mock {
    calls: Mutex<HashMap<String, usize>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    bodies: Mutex<Vec<Value>>,
    auth: Mutex<Vec<String>>,
}

async fn chat(State(mock): State<Arc<Mock>>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, String) {
    let model = body["model"].as_str().unwrap_or_default().to_string();
    mock.bodies.lock().unwrap().push(body.clone());
    if let Some(a) = headers.get("authorization") {
        mock.auth.lock().unwrap().push(a.to_str().unwrap().to_string());
    }
    let n = {
        let mut calls = mock.calls.lock().unwrap();
        let e = calls.entry(model.clone()).or_default();
        *e += 1;
        *e
    };
    let reply = |text: &str| {
        (
            StatusCode::OK,
            json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string(),
        )
    };
    match model.as_str() {
        "flaky" if n <= 2 => (StatusCode::TOO_MANY_REQUESTS, "slow down".into()),
        "broken" if n <= 1 => (StatusCode::SERVICE_UNAVAILABLE, "down".into()),
        "bad" => (StatusCode::BAD_REQUEST, "bad request".into()),
        "empty" => reply("  "),
        "slow" => {
            let now = mock.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            mock.peak.fetch_max(now, Ordering::SeqCst);
            tokio::time::sleep(Duration::from_millis(40)).await;
            mock.in_flight.fetch_sub(1, Ordering::SeqCst);
            reply("a patch")
        }
        _ => reply(" A bright square. And more text. "),
    }
}

fn start_mock() -> (String, Arc<Mock>) {
    let mock = Arc::new(Mock::default());
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .with_state(mock.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    (format!("http://{addr}/v1"), mock)
}

fn provider(base: &str, model: &str) -> HttpProvider {
    HttpProvider::new(HttpSettings {
        base_url: base.into(),
        api_key: Some("secret".into()),
        model: model.into(),
        timeout: Duration::from_secs(5),
    })
}

#[test]
fn http_provider_round_trip_and_request_shape() {
    let (base, mock) = start_mock();
    let p = provider(&base, "good");
    let caps = caption_patches(&[Image::filled(8, 1, 0.5)], &p, &fast_config());
    assert_eq!(caps[0].text.as_deref(), Some("A bright square. And more text."));
    assert_eq!(caps[0].provider, "http:good");

    let body = mock.bodies.lock().unwrap()[0].clone();
    let content = &body["messages"][0]["content"];
    assert_eq!(content[0]["text"], CAPTION_PROMPT);
    assert!(content[1]["image_url"]["url"]
        .as_str()
        .unwrap()
        .starts_with("data:image/png;base64,"));
    assert_eq!(mock.auth.lock().unwrap()[0], "Bearer secret");

    let s = summarize_concepts(0, caps, &p, &fast_config()).unwrap();
    assert_eq!(s.shortcut_candidate.as_deref(), Some("A bright square."));
    assert_eq!(s.raw_response.as_deref(), Some("A bright square. And more text."));
    let refine_body = mock.bodies.lock().unwrap()[1].clone();
    let text = refine_body["messages"][0]["content"][0]["text"]
        .as_str()
        .unwrap()
        .to_string();
    assert_eq!(text, format!("{REFINE_PROMPT}\nA bright square. And more text."));
    assert_eq!(refine_body["messages"][0]["content"].as_array().unwrap().len(), 1);
}

#[test]
fn http_retries_rate_limits_and_server_errors() {
    let (base, mock) = start_mock();
    let img = [Image::filled(4, 1, 0.5)];
    let c = &caption_patches(&img, &provider(&base, "flaky"), &fast_config())[0];
    assert_eq!((c.text.is_some(), c.attempts), (true, 3));
    let c = &caption_patches(&img, &provider(&base, "broken"), &fast_config())[0];
    assert_eq!((c.text.is_some(), c.attempts), (true, 2));
    let c = &caption_patches(&img, &provider(&base, "bad"), &fast_config())[0];
    assert_eq!(c.attempts, 1);
    assert!(c.error.as_deref().unwrap().contains("400"));
    assert_eq!(mock.calls.lock().unwrap()["bad"], 1);
}

#[test]
fn empty_caption_becomes_an_error_marker() {
    let (base, _mock) = start_mock();
    let caps = caption_patches(&[Image::filled(4, 1, 0.5)], &provider(&base, "empty"), &fast_config());
    assert_eq!(caps[0].text, None);
    assert_eq!(caps[0].error.as_deref(), Some("empty caption"));
}

#[test]
fn at_most_four_requests_in_flight_and_order_kept() {
    let (base, mock) = start_mock();
    let images: Vec<Image> = (0..12).map(|i| Image::filled(4, 1, i as f32 / 12.0)).collect();
    let caps = caption_patches(&images, &provider(&base, "slow"), &fast_config());
    assert_eq!(caps.len(), 12);
    assert!(caps.iter().all(|c| c.text.as_deref() == Some("a patch")));
    let peak = mock.peak.load(Ordering::SeqCst);
    assert!((2..=4).contains(&peak), "peak {peak}");
}

#[test]
fn unreachable_provider_fails_every_cluster_without_panicking() {
    let dead = provider("http://127.0.0.1:9", "any");
    let cfg = ConceptsConfig {
        retries: 1,
        ..fast_config()
    };
    let image = Image::filled(16, 1, 0.5);
    let patch = |c: usize| ScoredPatch {
        patch: PatchKey {
            image_id: 0,
            position: 0,
            cluster: c,
            key: vec![0.0],
        },
        score: 1.0,
    };
    let bank = PrototypeBank {
        clusters: vec![vec![patch(0)], vec![patch(1)]],
        n: 1,
        m: 1,
    };
    let report = describe_clusters(&bank, |_| Some(&image), 8, &dead, &dead, &cfg).unwrap();
    assert!(report.partial && report.failed);
    assert!(report.clusters.iter().all(|c| c.error.is_some()));
    assert!(report.clusters[0].captions[0].attempts == 2);
}

#[test]
fn refiner_trait_objects_are_interchangeable() {
    let refiners: [&dyn Refiner; 1] = [&StubRefiner];
    for r in refiners {
        assert_eq!(
            r.refine("p", &[STUB_MARKER_CAPTION.into()]).unwrap(),
            STUB_MARKER_CONCEPT
        );
    }
}
