use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use morphavatar_cli::{router, ServiceState, AZIMUTH_HEADER, CLAMPED_HEADER};
use morphavatar_core::avatar::fit::{initial_avatar, FitConfig};
use morphavatar_core::morphable_model::synth_model;
use morphavatar_core::pipeline::{view_camera, AvatarFile, ViewLimits};
use morphavatar_core::view_sampler::{build_expression_database, random_expressions};
use morphavatar_core::{ExpressionParams, Image, IdentityParams};

fn avatar_file() -> AvatarFile {
    let model = Arc::new(synth_model(4, 1, 3, 4));
    let cfg = FitConfig { splat_count: 300, uv_resolution: 16, seed: 2, ..FitConfig::default() };
    let avatar = initial_avatar(model, IdentityParams(vec![0.2, -0.1, 0.0]), &cfg).unwrap();
    let samples = random_expressions(4, 30, 1.5, 1);
    let db = build_expression_database(&samples, 5, &[1.0; 4], 1).unwrap();
    AvatarFile { avatar, view: ViewLimits::default(), expressions: Some(db) }
}

fn app(file: AvatarFile) -> axum::Router {
    router(ServiceState::ready(file), None)
}

fn post(body: &str) -> Request<Body> {
    Request::post("/render").header("content-type", "application/json").body(Body::from(body.to_owned())).unwrap()
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

#[tokio::test]
async fn meta_reports_expression_count_and_bounds() {
    let app = app(avatar_file());
    let (status, headers, body) = send(&app, Request::get("/meta").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "application/json");
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["K_expr"], 4);
    assert_eq!(v["psi_max"], 55.0);
    assert_eq!(v["theta_max"], 20.0);
    assert_eq!(v["resolution"], 64);
}

#[tokio::test]
async fn zero_phi_renders_the_neutral_frame() {
    let file = avatar_file();
    let camera = view_camera(&file.view, 0.0, 0.0, 48, 40).unwrap();
    let neutral = file.avatar.render(&ExpressionParams(vec![0.0; 4]), &camera).unwrap();
    let app = app(file);
    let body = r#"{"phi":[0,0,0,0],"azimuth":0,"elevation":0,"width":48,"height":40}"#;
    let (status, headers, png) = send(&app, post(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    assert_eq!(headers[CLAMPED_HEADER], "false");
    let img = Image::read_png(&png).unwrap();
    assert_eq!(img.shape(), (40, 48, 3));
    for (a, b) in img.data.iter().zip(&neutral.data) {
        assert!((a - b.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[tokio::test]
async fn wrong_phi_length_names_the_expected_length() {
    let app = app(avatar_file());
    let (status, headers, body) =
        send(&app, post(r#"{"phi":[0,0],"azimuth":0,"elevation":0,"width":16,"height":16}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(headers["content-type"], "application/json");
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["expected_length"], 4);
    assert!(v["error"].as_str().unwrap().contains("expected 4"));
}

#[tokio::test]
async fn malformed_payloads_are_rejected() {
    let app = app(avatar_file());
    for body in [
        "not json",
        r#"{"phi":[0,0,0,0]}"#,
        r#"{"phi":[0,0,0,0],"azimuth":0,"elevation":0,"width":16,"height":16,"extra":1}"#,
        r#"{"phi":[0,0,0,0],"azimuth":0,"elevation":0,"width":0,"height":16}"#,
        r#"{"phi":[0,0,0,0],"azimuth":0,"elevation":0,"width":100000,"height":16}"#,
    ] {
        let (status, _, body) = send(&app, post(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{}", String::from_utf8_lossy(&body));
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn out_of_range_views_are_clamped_and_reported() {
    let app = app(avatar_file());
    let (status, headers, _) =
        send(&app, post(r#"{"phi":[0,0,0,0],"azimuth":90,"elevation":0,"width":16,"height":16}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[CLAMPED_HEADER], "true");
    let az: f64 = headers[AZIMUTH_HEADER].to_str().unwrap().parse().unwrap();
    assert!(az <= 55.0 && az > 54.9);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_give_identical_pngs() {
    let app = app(avatar_file());
    let body = r#"{"phi":[0.4,-0.3,1.0,0.2],"azimuth":12,"elevation":-5,"width":40,"height":40}"#;
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move { send(&app, post(body)).await })
        })
        .collect();
    let mut pngs = Vec::new();
    for t in tasks {
        let (status, _, png) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        pngs.push(png);
    }
    assert!(pngs.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn expressions_endpoint_returns_the_database() {
    let file = avatar_file();
    let db = file.expressions.clone().unwrap();
    let app = app(file);
    let (status, _, body) = send(&app, Request::get("/expressions").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let back: morphavatar_core::view_sampler::ExpressionDatabase = serde_json::from_slice(&body).unwrap();
    assert_eq!(back, db);
}

#[tokio::test]
async fn endpoints_answer_503_while_loading() {
    let state = ServiceState::loading();
    let app = router(state.clone(), None);
    let (status, _, _) = send(&app, Request::get("/meta").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _, _) = send(&app, post("{}")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(state.set_avatar(avatar_file()));
    let (status, _, _) = send(&app, Request::get("/meta").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn ui_assets_are_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>viewer</html>").unwrap();
    let app = router(ServiceState::ready(avatar_file()), Some(dir.path().to_path_buf()));
    let (status, _, body) = send(&app, Request::get("/ui/").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>viewer</html>");
}
