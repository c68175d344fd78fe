use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use sunsplat_cli::render::Renderer;
use sunsplat_cli::server::{router, BOUNDARY};
use sunsplat_core::losses::LossWeights;
use sunsplat_core::synth::{generate, SceneKind, SynthSpec};
use sunsplat_core::train::{extract_all, run_stage1, run_stage2, run_stage3, StageSchedule, TrainingImage};
use sunsplat_core::ImagePlane;
use tower::ServiceExt;

/// A small box-over-plane scene carried through all three stages.
fn renderer() -> Arc<Renderer> {
    static R: OnceLock<Arc<Renderer>> = OnceLock::new();
    R.get_or_init(|| {
        let mut spec = SynthSpec::new(SceneKind::BoxOverPlane, 4);
        spec.width = 32;
        spec.height = 24;
        let s = generate(&spec).unwrap();
        let images: Vec<TrainingImage> = s
            .images
            .iter()
            .zip(s.sky_masks())
            .zip(s.sunny())
            .map(|((image, sky_mask), sunny)| TrainingImage {
                image: image.clone(),
                sky_mask,
                sunny,
            })
            .collect();
        let mut scene = s.scene.clone();
        run_stage1(&mut scene, &images, 20).unwrap();
        let maps = extract_all(&scene, &images).unwrap();
        run_stage2(&mut scene, &images, &maps, &LossWeights::default(), 20).unwrap();
        let schedule = StageSchedule {
            bake: 20,
            bake_directions: 8,
            ..StageSchedule::desk()
        };
        run_stage3(&mut scene, &schedule, 0).unwrap();
        Arc::new(Renderer::new(scene).unwrap())
    })
    .clone()
}

async fn get(path: &str) -> (StatusCode, Vec<u8>) {
    let res = router(renderer(), None)
        .oneshot(Request::get(path).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post(body: Value) -> (StatusCode, String, Vec<u8>) {
    let res = router(renderer(), None)
        .oneshot(
            Request::post("/render")
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .unwrap(),
        )
        .await
        .unwrap();
    let status = res.status();
    let ctype = res.headers().get("content-type").map(|v| v.to_str().unwrap().to_string()).unwrap_or_default();
    (status, ctype, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    hay[from..].windows(needle.len()).position(|w| w == needle).map(|i| i + from)
}

/// Splits a multipart body into `(name, payload)` pairs.
fn parts(body: &[u8]) -> Vec<(String, Vec<u8>)> {
    let delim = format!("--{BOUNDARY}");
    let mut out = Vec::new();
    let mut at = find(body, delim.as_bytes(), 0).expect("opening boundary");
    loop {
        let start = at + delim.len();
        if body[start..].starts_with(b"--") {
            break;
        }
        let head_end = find(body, b"\r\n\r\n", start).expect("part headers") + 4;
        let head = String::from_utf8_lossy(&body[start..head_end]).to_string();
        let name = head.split("name=\"").nth(1).and_then(|s| s.split('"').next()).unwrap().to_string();
        let next = find(body, format!("\r\n{delim}").as_bytes(), head_end).expect("closing boundary");
        out.push((name, body[head_end..next].to_vec()));
        at = next + 2;
    }
    out
}

fn image(parts: &[(String, Vec<u8>)], name: &str) -> Vec<u8> {
    parts.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no {name} part")).1.clone()
}

async fn render_ok(body: Value) -> Vec<(String, Vec<u8>)> {
    let (status, ctype, bytes) = post(body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    assert!(ctype.starts_with("multipart/mixed"), "{ctype}");
    parts(&bytes)
}

#[tokio::test]
async fn health_and_meta() {
    let (status, body) = get("/healthz").await;
    assert_eq!((status, body.as_slice()), (StatusCode::OK, b"ok".as_slice()));
    let (status, body) = get("/scene/meta").await;
    assert_eq!(status, StatusCode::OK);
    let meta: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(meta["baked"], json!(true));
    assert_eq!(meta["images"].as_array().unwrap().len(), 8);
    assert_eq!(meta["cameras"][0]["pose"].as_array().unwrap().len(), 12);
    assert_eq!(meta["cameras"][0]["width"], json!(32));
}

#[tokio::test]
async fn render_returns_meta_and_requested_images() {
    let p = render_ok(json!({"camera_id": 1, "image_id_a": 0, "sun": {"dir": [0.2, 0.3, 0.9]}, "outputs": ["composite", "visibility", "reflectance"]})).await;
    let names: Vec<&str> = p.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["meta", "composite", "visibility", "reflectance"]);
    let meta: Value = serde_json::from_slice(&p[0].1).unwrap();
    assert!(meta["render_ms"].as_f64().unwrap() >= 0.0);
    assert!(p[1].1.starts_with(b"\x89PNG"));
}

#[tokio::test]
async fn interpolation_endpoints_match_single_image_renders() {
    let sun = json!({"dir": [0.0, 0.6, 0.8]});
    let single_a = render_ok(json!({"camera_id": 0, "image_id_a": 2, "sun": sun})).await;
    let omitted = render_ok(json!({"camera_id": 0, "image_id_a": 2, "image_id_b": 5, "sun": sun})).await;
    let zero = render_ok(json!({"camera_id": 0, "image_id_a": 2, "image_id_b": 5, "t": 0.0, "sun": sun})).await;
    let one = render_ok(json!({"camera_id": 0, "image_id_a": 2, "image_id_b": 5, "t": 1.0, "sun": sun})).await;
    let single_b = render_ok(json!({"camera_id": 0, "image_id_a": 5, "sun": sun})).await;
    assert_eq!(image(&zero, "composite"), image(&single_a, "composite"));
    assert_eq!(image(&zero, "composite"), image(&omitted, "composite"));
    assert_eq!(image(&one, "composite"), image(&single_b, "composite"));
    let half = render_ok(json!({"camera_id": 0, "image_id_a": 2, "image_id_b": 5, "t": 0.5, "sun": sun})).await;
    assert_ne!(image(&half, "composite"), image(&single_a, "composite"));
}

#[tokio::test]
async fn cloudy_gives_zero_visibility() {
    let p = render_ok(json!({"camera_id": 0, "image_id_a": 0, "sun": "cloudy", "outputs": ["visibility", "composite"]})).await;
    let v = image(&p, "visibility");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.png");
    std::fs::write(&path, v).unwrap();
    let img = ImagePlane::read_png(&path).unwrap();
    assert_eq!((img.width(), img.height()), (32, 24));
    assert!(img.data().iter().all(|&x| x == 0.0));
}

#[tokio::test]
async fn pose_renders_like_its_camera() {
    let (_, meta) = get("/scene/meta").await;
    let meta: Value = serde_json::from_slice(&meta).unwrap();
    let pose = meta["cameras"][3]["pose"].clone();
    let sun = json!({"dir": [0.3, 0.0, 0.95]});
    let by_id = render_ok(json!({"camera_id": 3, "image_id_a": 1, "sun": sun})).await;
    let by_pose = render_ok(json!({"pose": pose, "camera_id": 3, "image_id_a": 1, "sun": sun})).await;
    assert_eq!(image(&by_id, "composite"), image(&by_pose, "composite"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_agree() {
    let body = json!({"camera_id": 2, "image_id_a": 3, "image_id_b": 4, "t": 0.3, "sun": {"dir": [0.1, -0.4, 0.9]}, "outputs": ["composite", "visibility"]});
    let tasks: Vec<_> = (0..8).map(|_| tokio::spawn(render_ok(body.clone()))).collect();
    let mut results = Vec::new();
    for t in tasks {
        results.push(t.await.unwrap());
    }
    for r in &results[1..] {
        assert_eq!(image(r, "composite"), image(&results[0], "composite"));
        assert_eq!(image(r, "visibility"), image(&results[0], "visibility"));
    }
}

#[tokio::test]
async fn invalid_requests_are_rejected() {
    let sun = json!({"dir": [0.0, 0.0, 1.0]});
    for body in [
        json!({"camera_id": 99, "image_id_a": 0, "sun": sun}),
        json!({"camera_id": 0, "image_id_a": 42, "sun": sun}),
        json!({"pose": [1.0, 0.0, 0.0], "image_id_a": 0, "sun": sun}),
        json!({"pose": [2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 5.0], "image_id_a": 0, "sun": sun}),
        json!({"camera_id": 0, "image_id_a": 0, "image_id_b": 1, "t": 1.5, "sun": sun}),
        json!({"camera_id": 0, "image_id_a": 0, "sun": "sideways"}),
        json!({"camera_id": 0, "image_id_a": 0, "sun": {"dir": [0.0, 0.0, 0.0]}}),
        json!({"camera_id": 0, "image_id_a": 0, "sun": sun, "outputs": ["albedo"]}),
        json!({"camera_id": 0, "image_id_a": 0, "sun": sun, "colour": 1}),
        json!({"camera_id": 0, "image_id_a": 0}),
        json!({"image_id_a": 0, "sun": sun}),
    ] {
        let (status, _, bytes) = post(body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        let err: Value = serde_json::from_slice(&bytes).unwrap();
        assert!(err["error"].is_string());
    }
    let res = router(renderer(), None)
        .oneshot(Request::post("/render").body(Body::from("not json")).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn serves_static_ui() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    let res = router(renderer(), Some(dir.path().to_path_buf()))
        .oneshot(Request::get("/ui/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let body = res.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<html>console</html>");
}
