use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use brushnet_core::branch::{AblationAxes, Branch};
use brushnet_core::checkpoint::{save_base, save_branch, save_codec};
use brushnet_core::codec::{Codec, CodecConfig};
use brushnet_core::masking::Mask;
use brushnet_core::scene::SceneSampler;
use brushnet_core::unet::{DenoiserConfig, DenoiserModel};
use brushnet_core::Image;
use brushnet_service::api::{ErrorBody, InpaintRequest, InpaintResponse};
use brushnet_service::catalog::Catalog;
use brushnet_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use rand::SeedableRng;
use serde_json::Value;
use tower::ServiceExt;

fn small_base(seed: u64) -> DenoiserModel {
    let cfg = DenoiserConfig { widths: vec![8, 16, 16], groups: 4, heads: 2, ..Default::default() };
    DenoiserModel::random(&cfg, seed).unwrap()
}

fn write_models(dir: &Path, second_base: bool) {
    let codec = Codec::random(&CodecConfig::default(), 1).unwrap();
    let base = small_base(2);
    let branch = Branch::init_from_base(&base, AblationAxes::default(), 3).unwrap();
    save_codec(dir.join("codec.ckpt"), &codec, Value::Null).unwrap();
    save_base(dir.join("base.ckpt"), &base, Value::Null).unwrap();
    save_branch(dir.join("branch.ckpt"), &branch, None, Value::Null).unwrap();
    if second_base {
        save_base(dir.join("base2.ckpt"), &small_base(9), Value::Null).unwrap();
    }
}

fn state(dir: &Path, config: ServiceConfig) -> AppState {
    AppState::new(Catalog::load_dir(dir).unwrap(), &config).unwrap()
}

fn one_worker() -> ServiceConfig {
    ServiceConfig { workers: 1, ..Default::default() }
}

fn scene_image() -> Image {
    SceneSampler::default().sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).render()
}

fn request(image: &Image, mask: &Mask) -> InpaintRequest {
    InpaintRequest {
        image: B64.encode(image.to_png_bytes().unwrap()),
        mask: B64.encode(mask.to_png_bytes().unwrap()),
        prompt: "a red circle".into(),
        steps: Some(2),
        guidance: Some(3.0),
        seed: Some(11),
        ..Default::default()
    }
}

async fn call(app: &AppState, method: &str, uri: &str, body: Option<&InpaintRequest>) -> (StatusCode, Vec<u8>) {
    let body = body.map(|b| Body::from(serde_json::to_vec(b).unwrap())).unwrap_or_else(Body::empty);
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(body).unwrap();
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn expect_field(app: &AppState, req: &InpaintRequest, field: &str) {
    let (status, body) = call(app, "POST", "/inpaint", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(err.field.as_deref(), Some(field), "{}", err.error);
}

#[tokio::test]
async fn health_and_catalog() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path(), false);
    let app = state(dir.path(), one_worker());
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ready");

    let (_, first) = call(&app, "GET", "/models", None).await;
    let (_, second) = call(&app, "GET", "/models", None).await;
    assert_eq!(first, second);
    let v: Value = serde_json::from_slice(&first).unwrap();
    let models = v["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    assert_eq!(models[0]["role"], "base");
    assert_eq!(models[1]["role"], "branch");
    assert!(models[1]["axes"].as_str().unwrap().contains("injection=full"));
}

#[test]
fn missing_or_bad_checkpoints_fail_startup() {
    assert!(Catalog::load_dir("/nonexistent/checkpoints").is_err());
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("codec.ckpt"), b"BRUSHCKP garbage").unwrap();
    assert!(Catalog::load_dir(dir.path()).is_err());
    let empty = tempfile::tempdir().unwrap();
    assert!(Catalog::load_dir(empty.path()).is_err());
}

#[tokio::test]
async fn empty_mask_paste_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path(), false);
    let app = state(dir.path(), one_worker());
    let img = scene_image();
    let req = InpaintRequest { blend_mode: Some("paste".into()), ..request(&img, &Mask::zeros(64, 64)) };
    let (status, body) = call(&app, "POST", "/inpaint", Some(&req)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: InpaintResponse = serde_json::from_slice(&body).unwrap();
    let sent = Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
    let out = Image::from_png_bytes(&B64.decode(resp.image).unwrap()).unwrap();
    assert_eq!(out, sent);
    assert_eq!(resp.model, "base+branch");
}

#[tokio::test]
async fn omitted_sampler_fields_resolve_to_defaults() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path(), false);
    let app = state(dir.path(), one_worker());
    let img = scene_image();
    let req = InpaintRequest { steps: None, guidance: None, w: None, blend_mode: None, ..request(&img, &Mask::ones(64, 64)) };
    let (status, body) = call(&app, "POST", "/inpaint", Some(&req)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: InpaintResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.options.steps, 50);
    assert_eq!(resp.options.guidance, 7.5);
    assert_eq!(resp.options.w, 1.0);
    assert_eq!(resp.options.blur_sigma, 3.0);
    let out = Image::from_png_bytes(&B64.decode(resp.image).unwrap()).unwrap();
    assert_eq!((out.width(), out.height()), (64, 64));
}

#[tokio::test]
async fn client_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path(), false);
    let app = state(dir.path(), one_worker());
    let img = scene_image();
    let ok = request(&img, &Mask::ones(64, 64));

    let truncated = ok.image[..ok.image.len() / 2 - 1].to_string();
    expect_field(&app, &InpaintRequest { image: truncated, ..ok.clone() }, "image").await;
    expect_field(&app, &InpaintRequest { mask: "@@@".into(), ..ok.clone() }, "mask").await;
    let small = B64.encode(Mask::ones(32, 32).to_png_bytes().unwrap());
    expect_field(&app, &InpaintRequest { mask: small, ..ok.clone() }, "mask").await;
    expect_field(&app, &InpaintRequest { w: Some(1.5), ..ok.clone() }, "w").await;
    expect_field(&app, &InpaintRequest { steps: Some(0), ..ok.clone() }, "steps").await;
    expect_field(&app, &InpaintRequest { steps: Some(1001), ..ok.clone() }, "steps").await;
    expect_field(&app, &InpaintRequest { blur_sigma: Some(-1.0), ..ok.clone() }, "blur_sigma").await;
    expect_field(&app, &InpaintRequest { blend_mode: Some("smudge".into()), ..ok.clone() }, "blend_mode").await;
    expect_field(&app, &InpaintRequest { prompt: "a zebra".into(), ..ok.clone() }, "prompt").await;
    expect_field(&app, &InpaintRequest { base: Some("nope".into()), ..ok.clone() }, "base").await;
    expect_field(&app, &InpaintRequest { branch: Some("base".into()), ..ok.clone() }, "branch").await;

    let (status, _) = call(&app, "POST", "/inpaint", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path(), false);
    let app = state(dir.path(), ServiceConfig { workers: 2, ..Default::default() });
    let img = scene_image();
    let req = request(&img, &Mask::from_fn(64, 64, |x, y| (16..40).contains(&x) && (20..44).contains(&y)));
    let (a, b) = tokio::join!(call(&app, "POST", "/inpaint", Some(&req)), call(&app, "POST", "/inpaint", Some(&req)));
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(b.0, StatusCode::OK);
    let ia: InpaintResponse = serde_json::from_slice(&a.1).unwrap();
    let ib: InpaintResponse = serde_json::from_slice(&b.1).unwrap();
    assert_eq!(ia.image, ib.image);
}

#[tokio::test]
async fn either_base_uses_the_same_branch() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path(), true);
    let app = state(dir.path(), one_worker());
    let img = scene_image();
    let mask = Mask::from_fn(64, 64, |x, _| x < 32);
    let mut images = Vec::new();
    for base in ["base", "base2"] {
        let req = InpaintRequest { base: Some(base.into()), ..request(&img, &mask) };
        let (status, body) = call(&app, "POST", "/inpaint", Some(&req)).await;
        assert_eq!(status, StatusCode::OK);
        let resp: InpaintResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(resp.options.branch.as_deref(), Some("branch"));
        assert_eq!(resp.model, format!("{base}+branch"));
        images.push(resp.image);
    }
    assert_ne!(images[0], images[1]);
}

#[tokio::test]
async fn baseline_pipeline_is_served() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path(), false);
    let app = state(dir.path(), one_worker());
    let img = scene_image();
    let req = InpaintRequest { pipeline: Some("bld".into()), ..request(&img, &Mask::from_fn(64, 64, |x, _| x < 20)) };
    let (status, body) = call(&app, "POST", "/inpaint", Some(&req)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: InpaintResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.options.branch, None);
    assert_eq!(resp.model, "base");
}

#[tokio::test]
async fn budget_overrun_is_a_503() {
    let dir = tempfile::tempdir().unwrap();
    write_models(dir.path(), false);
    let app = state(dir.path(), ServiceConfig { workers: 1, budget: Duration::from_millis(1) });
    let img = scene_image();
    let req = InpaintRequest { steps: Some(200), ..request(&img, &Mask::ones(64, 64)) };
    let (status, body) = call(&app, "POST", "/inpaint", Some(&req)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let err: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert!(err.error.contains("budget"));
}
