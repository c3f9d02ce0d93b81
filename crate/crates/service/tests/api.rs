use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use lowlight::imaging::{decode_image, encode_png, Field, Image};
use lowlight::networks::ArchitectureOptions;
use lowlight::pipeline::EnhancerBundle;
use lowlight_service::{router, EnhanceResponse, ErrorBody, Health, HealthStatus, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn bundle() -> EnhancerBundle {
    EnhancerBundle::initialized(ArchitectureOptions::default(), 5).unwrap()
}

fn app() -> Router {
    router(Some(bundle()), &ServiceConfig::default())
}

fn fixture(h: usize, w: usize) -> Image {
    Image::new(Field::from_fn(h, w, 3, |y, x, c| ((y * 5 + x * 11 + c * 3) % 17) as f64 / 16.0 * 0.3)).unwrap()
}

fn b64(img: &Image) -> String {
    STANDARD.encode(encode_png(img).unwrap())
}

async fn call(app: Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => builder
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn error_code(body: &[u8]) -> String {
    serde_json::from_slice::<ErrorBody>(body).unwrap().error.code
}

#[tokio::test]
async fn health_reports_ready_with_full_bundle() {
    let (status, body) = call(app(), "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, HealthStatus::Ready);
    assert_eq!(h.bundle_id, Some(bundle().id()));
    assert_eq!(h.version, env!("CARGO_PKG_VERSION"));
}

#[tokio::test]
async fn health_reports_degraded_without_bundle() {
    let (status, body) = call(router(None, &ServiceConfig::default()), "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, HealthStatus::Degraded);
    assert_eq!(h.bundle_id, None);
}

#[tokio::test]
async fn health_reports_degraded_for_partial_bundle() {
    let b = bundle();
    let partial = EnhancerBundle::new(b.decomposition().clone(), None, b.adjustment().cloned()).unwrap();
    let (_, body) = call(router(Some(partial), &ServiceConfig::default()), "GET", "/api/health", None).await;
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, HealthStatus::Degraded);
    assert!(h.bundle_id.is_some());
}

#[tokio::test]
async fn unknown_routes_are_404() {
    for uri in ["/api/nope", "/nope", "/"] {
        let (status, _) = call(app(), "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn valid_request_preserves_dimensions_and_matches_pipeline() {
    let img = fixture(13, 21);
    let (status, body) = call(app(), "POST", "/api/enhance", Some(json!({"image": b64(&img), "alpha": 2.0}))).await;
    assert_eq!(status, StatusCode::OK);
    let r: EnhanceResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((r.width, r.height), (21, 13));
    let png = STANDARD.decode(&r.image).unwrap();
    assert_eq!(decode_image(&png).unwrap().shape(), (13, 21, 3));
    let quantized = decode_image(&encode_png(&img).unwrap()).unwrap();
    let expected = encode_png(&bundle().enhance(&quantized, 2.0).unwrap().image).unwrap();
    assert_eq!(png, expected);
    assert_eq!(r.bundle_id, bundle().id());
    assert!(r.reflectance.is_none() && r.illumination.is_none() && r.timing_ms.is_none());
    assert!(!r.degraded);
}

#[tokio::test]
async fn layers_and_timing_are_opt_in() {
    let img = fixture(8, 8);
    let req = json!({"image": b64(&img), "alpha": 1.5, "options": {"return_layers": true, "include_timing": true}});
    let (status, body) = call(app(), "POST", "/api/enhance", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let r: EnhanceResponse = serde_json::from_slice(&body).unwrap();
    for layer in [r.reflectance.unwrap(), r.illumination.unwrap()] {
        let decoded = decode_image(&STANDARD.decode(layer).unwrap()).unwrap();
        assert_eq!(decoded.shape(), (8, 8, 3));
    }
    assert!(r.timing_ms.unwrap() >= 0.0);
}

#[tokio::test]
async fn identical_requests_give_identical_bodies() {
    let req = json!({"image": b64(&fixture(10, 12)), "alpha": 3.0, "options": {"return_layers": true}});
    let app = app();
    let a = tokio::spawn(call(app.clone(), "POST", "/api/enhance", Some(req.clone())));
    let b = tokio::spawn(call(app.clone(), "POST", "/api/enhance", Some(req.clone())));
    let (a, b) = (a.await.unwrap(), b.await.unwrap());
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
    assert_eq!(call(app, "POST", "/api/enhance", Some(req)).await, a);
}

#[tokio::test]
async fn invalid_alpha_is_400_with_code() {
    for alpha in [json!(-1.0), json!(0.0), json!(10.5)] {
        let (status, body) =
            call(app(), "POST", "/api/enhance", Some(json!({"image": b64(&fixture(4, 4)), "alpha": alpha}))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(error_code(&body), "invalid_alpha");
    }
}

#[tokio::test]
async fn malformed_payloads_are_400() {
    let (status, body) = call(app(), "POST", "/api/enhance", Some(json!({"alpha": 2.0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "malformed_request");

    let (status, body) = call(app(), "POST", "/api/enhance", Some(json!({"image": "@@@", "alpha": 2.0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "invalid_image");

    let not_png = STANDARD.encode(b"plain text");
    let (status, body) = call(app(), "POST", "/api/enhance", Some(json!({"image": not_png, "alpha": 2.0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&body), "invalid_image");

    let req = Request::builder()
        .method("POST")
        .uri("/api/enhance")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_image_is_413() {
    let config = ServiceConfig {
        max_pixels: 99,
        ..ServiceConfig::default()
    };
    let app = router(Some(bundle()), &config);
    let (status, body) =
        call(app.clone(), "POST", "/api/enhance", Some(json!({"image": b64(&fixture(10, 10)), "alpha": 2.0}))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&body), "image_too_large");
    let (status, _) =
        call(app, "POST", "/api/enhance", Some(json!({"image": b64(&fixture(9, 11)), "alpha": 2.0}))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn oversized_body_is_413() {
    let config = ServiceConfig {
        max_body_bytes: 64,
        ..ServiceConfig::default()
    };
    let (status, body) = call(
        router(Some(bundle()), &config),
        "POST",
        "/api/enhance",
        Some(json!({"image": b64(&fixture(16, 16)), "alpha": 2.0})),
    )
    .await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(&body), "payload_too_large");
}

#[tokio::test]
async fn missing_bundle_is_503() {
    let (status, body) = call(
        router(None, &ServiceConfig::default()),
        "POST",
        "/api/enhance",
        Some(json!({"image": b64(&fixture(4, 4)), "alpha": 2.0})),
    )
    .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_code(&body), "bundle_not_loaded");
}

#[tokio::test]
async fn static_assets_are_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>hi</p>").unwrap();
    let config = ServiceConfig {
        static_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let (status, body) = call(router(Some(bundle()), &config), "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<p>hi</p>");
    let (status, _) = call(router(Some(bundle()), &config), "GET", "/missing.js", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(router(Some(bundle()), &config), "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
}
