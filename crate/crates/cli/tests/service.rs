use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use stylecore::{ColorSpace, ImageBuffer};
use stylecore_cli::jobs::JobManager;
use stylecore_cli::service::{router, AppState, GUIDANCE_SCHEMA};

const BOUNDARY: &str = "stylecore-test-boundary";

fn app(workers: usize) -> Router {
    router(AppState { jobs: JobManager::new(workers), assets: None })
}

fn fixture(name: &str, long_side: usize) -> ImageBuffer {
    let path = format!("{}/../core/tests/data/{name}.png", env!("CARGO_MANIFEST_DIR"));
    ImageBuffer::load(path).unwrap().resize_long_side(long_side).unwrap()
}

fn mask_png(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Vec<u8> {
    ImageBuffer::from_fn(h, w, 1, ColorSpace::Srgb, |y, x| vec![if on(y, x) { 1.0 } else { 0.0 }])
        .unwrap()
        .encode_png()
        .unwrap()
}

enum Part {
    Text(&'static str, String),
    File(String, Vec<u8>),
}

fn multipart(parts: &[Part]) -> Request<Body> {
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::Text(name, text) => {
                body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
                body.extend_from_slice(text.as_bytes());
            }
            Part::File(name, bytes) => {
                body.extend_from_slice(
                    format!(
                        "Content-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\
                         Content-Type: image/png\r\n\r\n"
                    )
                    .as_bytes(),
                );
                body.extend_from_slice(bytes);
            }
        }
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/jobs")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn send_json(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (status, body) = send(app, req).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    send_json(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

fn images(content: &ImageBuffer, style: &ImageBuffer) -> Vec<Part> {
    vec![
        Part::File("content".into(), content.encode_png().unwrap()),
        Part::File("style".into(), style.encode_png().unwrap()),
    ]
}

fn small_strotss(steps: usize) -> String {
    json!({"kind": "strotss", "scales": 1, "coarsest_long_side": 48, "steps": steps, "samples": 256}).to_string()
}

const RANK: [&str; 4] = ["queued", "running", "done", "failed"];

fn rank(status: &str) -> usize {
    match status {
        "queued" => 0,
        "running" => 1,
        _ => 2,
    }
}

/// Polls until the job leaves `queued`/`running`, checking the status
/// invariants on every snapshot.
async fn wait_finished(app: &Router, id: &str, limit: Duration) -> Value {
    let start = Instant::now();
    let mut last = 0;
    loop {
        let (code, s) = get_json(app, &format!("/jobs/{id}")).await;
        assert_eq!(code, StatusCode::OK);
        let status = s["status"].as_str().unwrap().to_string();
        assert!(RANK.contains(&status.as_str()), "{s}");
        assert!(rank(&status) >= last, "status went backwards: {s}");
        last = rank(&status);
        if let Some(p) = s["progress"].as_object() {
            assert!(p["step"].as_u64() <= p["steps"].as_u64(), "{s}");
            assert!(p["scale"].as_u64() < p["scales"].as_u64(), "{s}");
        }
        if last == 2 {
            return s;
        }
        assert!(start.elapsed() < limit, "job did not finish: {s}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn unknown_jobs_are_404() {
    let app = app(1);
    for uri in ["/jobs/nope", "/jobs/nope/result", "/jobs/nope/preview"] {
        let (code, body) = get_json(&app, uri).await;
        assert_eq!(code, StatusCode::NOT_FOUND, "{uri}");
        assert!(body["error"].as_str().unwrap().contains("nope"));
    }
    let (code, _) = send(&app, Request::delete("/jobs/nope").body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn job_runs_to_completion() {
    let app = app(1);
    let (content, style) = (fixture("astronaut", 48), fixture("brick", 48));
    let mut parts = images(&content, &style);
    parts.push(Part::Text("config", small_strotss(30)));
    let (code, created) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::ACCEPTED, "{created}");
    assert_eq!(created["kind"], "strotss");
    assert!(matches!(created["status"].as_str(), Some("queued" | "running")));
    let id = created["id"].as_str().unwrap().to_string();

    let done = wait_finished(&app, &id, Duration::from_secs(120)).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["progress"]["step"], 30);
    assert_eq!(done["progress"]["steps"], 30);
    assert!(done["progress"]["loss"].as_f64().unwrap().is_finite());
    assert_eq!(done["report"]["scales"].as_array().unwrap().len(), 1);

    let (code, png) = send(&app, Request::get(format!("/jobs/{id}/result")).body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::OK);
    let out = ImageBuffer::decode(&png).unwrap();
    assert_eq!((out.height(), out.width()), (48, 48));
    let (code, _) = send(&app, Request::get(format!("/jobs/{id}/preview")).body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::OK);

    let (code, body) = send_json(&app, Request::delete(format!("/jobs/{id}")).body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::CONFLICT, "{body}");
}

#[tokio::test]
async fn cancellation_is_cooperative_and_reported() {
    let app = app(1);
    let (content, style) = (fixture("astronaut", 48), fixture("brick", 48));
    let mut parts = images(&content, &style);
    parts.push(Part::Text("config", small_strotss(100_000)));
    let (_, running) = send_json(&app, multipart(&parts)).await;
    let (_, queued) = send_json(&app, multipart(&parts)).await;
    let (run_id, queue_id) = (running["id"].as_str().unwrap(), queued["id"].as_str().unwrap());

    // Wait until the first job has taken a few steps and has a preview.
    let start = Instant::now();
    loop {
        let (_, s) = get_json(&app, &format!("/jobs/{run_id}")).await;
        if s["progress"]["step"].as_u64().unwrap_or(0) > 30 {
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job never progressed: {s}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let (code, _) = send(&app, Request::get(format!("/jobs/{run_id}/preview")).body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::OK);
    let (code, _) = send_json(&app, Request::get(format!("/jobs/{run_id}/result")).body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (_, s) = get_json(&app, &format!("/jobs/{queue_id}")).await;
    assert_eq!(s["status"], "queued");

    // Queued job: failed immediately.
    let (code, _) = send(&app, Request::delete(format!("/jobs/{queue_id}")).body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let (_, s) = get_json(&app, &format!("/jobs/{queue_id}")).await;
    assert_eq!((s["status"].as_str(), s["reason"].as_str()), (Some("failed"), Some("cancelled")));

    // Running job: stops at the next step boundary.
    let (code, _) = send(&app, Request::delete(format!("/jobs/{run_id}")).body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let s = wait_finished(&app, run_id, Duration::from_secs(30)).await;
    assert_eq!((s["status"].as_str(), s["reason"].as_str()), (Some("failed"), Some("cancelled")), "{s}");
    assert!(s["progress"]["step"].as_u64().unwrap() < 100_000);

    for id in [run_id, queue_id] {
        let (code, _) = send(&app, Request::delete(format!("/jobs/{id}")).body(Body::empty()).unwrap()).await;
        assert_eq!(code, StatusCode::CONFLICT);
        let (code, _) = send(&app, Request::get(format!("/jobs/{id}/result")).body(Body::empty()).unwrap()).await;
        assert_eq!(code, StatusCode::CONFLICT);
    }
}

#[tokio::test]
async fn malformed_requests_name_the_field() {
    let app = app(1);
    let (content, style) = (fixture("astronaut", 48), fixture("coffee", 48));
    let (ch, cw, sh, sw) = (content.height(), content.width(), style.height(), style.width());

    let mut parts = images(&content, &style);
    parts.push(Part::Text("guidance", r#"{"regionz": []}"#.into()));
    let (code, body) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "guidance");
    assert!(body["error"].as_str().unwrap().contains("regionz"), "{body}");

    let mut parts = images(&content, &style);
    parts.push(Part::Text("guidance", r#"{"regions": [{"content_mask": "a", "style_mask": "b"}]}"#.into()));
    parts.push(Part::File("a".into(), mask_png(ch + 1, cw, |_, _| true)));
    parts.push(Part::File("b".into(), mask_png(sh, sw, |_, _| true)));
    let (code, body) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "guidance.regions[0].content_mask", "{body}");

    let mut parts = images(&content, &style);
    parts.push(Part::Text("guidance", r#"{"regions": [{"content_mask": "a", "style_mask": "missing"}]}"#.into()));
    parts.push(Part::File("a".into(), mask_png(ch, cw, |_, _| true)));
    let (code, body) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "guidance.regions[0].style_mask", "{body}");

    let mut parts = images(&content, &style);
    parts.push(Part::Text("guidance", json!({"points": [{"content": [cw + 5, 0], "style": [0, 0]}]}).to_string()));
    let (code, body) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert!(body["field"].as_str().unwrap().starts_with("guidance.points[0]"), "{body}");

    let mut parts = images(&content, &style);
    parts.push(Part::Text("config", r#"{"kind": "strotss", "alpah": 2}"#.into()));
    let (code, body) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "config.alpah");

    let mut parts = images(&content, &style);
    parts.push(Part::Text("config", r#"{"kind": "dst"}"#.into()));
    let (code, body) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "points");

    let parts = vec![Part::File("content".into(), content.encode_png().unwrap())];
    let (code, body) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "style");

    let mut parts = images(&content, &style);
    parts[1] = Part::File("style".into(), b"not a png".to_vec());
    let (code, body) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "style");
}

#[tokio::test]
async fn ui_guidance_round_trip() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/ui/guidance.json")).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["points"].as_array().unwrap().len(), 2);
    assert_eq!(doc["regions"].as_array().unwrap().len(), 1);

    let app = app(1);
    let (code, schema) = get_json(&app, "/schema/guidance.json").await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(schema, serde_json::from_str::<Value>(GUIDANCE_SCHEMA).unwrap());
    let validator = jsonschema::validator_for(&schema).unwrap();
    assert!(validator.is_valid(&doc));
    assert!(!validator.is_valid(&json!({"points": [{"content": [1, 2]}]})));
    assert!(!validator.is_valid(&json!({"regionz": []})));

    let (content, style) = (fixture("astronaut", 48), fixture("coffee", 48));
    let (ch, cw, sh, sw) = (content.height(), content.width(), style.height(), style.width());
    let mut parts = images(&content, &style);
    parts.push(Part::Text("config", small_strotss(25)));
    parts.push(Part::Text("guidance", text));
    parts.push(Part::File("sky_content.png".into(), mask_png(ch, cw, |y, _| y < ch / 2)));
    parts.push(Part::File("sky_style.png".into(), mask_png(sh, sw, |y, _| y < sh / 2)));
    let (code, created) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::ACCEPTED, "{created}");
    let done = wait_finished(&app, created["id"].as_str().unwrap(), Duration::from_secs(120)).await;
    assert_eq!(done["status"], "done", "{done}");
    let sel = &done["report"]["selections"];
    assert!(sel["guided"].as_u64().unwrap() > 0, "{sel}");
    assert_eq!(sel["forbidden"], 0);
    assert!(sel["total"].as_u64().unwrap() > sel["guided"].as_u64().unwrap());
}

#[tokio::test]
async fn regime_mapping() {
    let app = app(1);
    let (code, t) = get_json(&app, "/regimes").await;
    assert_eq!(code, StatusCode::OK);
    for (base, regime, beta, gamma) in [
        ("strotss", "low", 0.3, 75.0),
        ("strotss", "med", 0.5, 50.0),
        ("strotss", "high", 0.7, 10.0),
        ("gram", "low", 3.0, 750.0),
        ("gram", "med", 7.0, 100.0),
        ("gram", "high", 15.0, 100.0),
    ] {
        assert_eq!(t[base][regime], json!({"beta": beta, "gamma": gamma}), "{base} {regime}");
    }

    let (content, style) = (fixture("astronaut", 48), fixture("chelsea", 48));
    let mut parts = images(&content, &style);
    parts.push(Part::Text("config", json!({"kind": "dst", "base": "gram", "regime": "low"}).to_string()));
    let points = json!({"pairs": [
        {"source": [5, 5], "target": [6, 4]},
        {"source": [40, 6], "target": [38, 8]},
        {"source": [8, 40], "target": [9, 28]},
        {"source": [40, 40], "target": [41, 27]}
    ], "clean": false});
    parts.push(Part::Text("points", points.to_string()));
    let (code, created) = send_json(&app, multipart(&parts)).await;
    assert_eq!(code, StatusCode::ACCEPTED, "{created}");
    assert_eq!(created["config"]["resolved"]["beta"], 3.0);
    assert_eq!(created["config"]["resolved"]["gamma"], 750.0);
    let id = created["id"].as_str().unwrap();
    let (code, _) = send(&app, Request::builder().method(Method::DELETE).uri(format!("/jobs/{id}")).body(Body::empty()).unwrap()).await;
    assert!(code == StatusCode::ACCEPTED || code == StatusCode::CONFLICT);
}

#[tokio::test]
async fn static_pages() {
    let app = app(1);
    let (code, body) = send(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("<form"));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>custom</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "let x = 1;").unwrap();
    let app = router(AppState { jobs: JobManager::new(1), assets: Some(dir.path().to_path_buf()) });
    let (_, body) = send(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(body, b"<p>custom</p>");
    let (code, body) = send(&app, Request::get("/app.js").body(Body::empty()).unwrap()).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body, b"let x = 1;");
}
