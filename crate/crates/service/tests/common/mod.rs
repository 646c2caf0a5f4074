#![allow(dead_code)]

use std::io::Cursor;
use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use pocus_core::data::video::{synthetic_frames, write_y4m};
use pocus_core::data::{AugmentationPolicy, DatasetParams};
use pocus_core::nn::{save_checkpoint, Arch, CheckpointMeta, Classifier, ClassifierConfig};
use pocus_service::api::CheckpointInfo;
use pocus_service::Engine;
use tower::ServiceExt;

pub const BOUNDARY: &str = "pocus-test-boundary";

pub fn tiny_config(seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        backbone_widths: Some(vec![vec![2], vec![4]]),
        init_seed: seed,
        ..ClassifierConfig::new(Arch::VggCam)
    }
}

pub fn tiny_model(seed: u64) -> Classifier {
    Classifier::build(&tiny_config(seed)).unwrap()
}

pub fn engine_of(members: Vec<Classifier>) -> Engine {
    let infos = (0..members.len())
        .map(|fold| CheckpointInfo { fold, path: format!("mem{fold}"), sha256: String::new() })
        .collect();
    Engine::new(members, infos, true, DatasetParams::default(), AugmentationPolicy::default()).unwrap()
}

/// Writes `n` fold checkpoints of distinct tiny models into `dir`.
pub fn write_checkpoints(dir: &Path, n: usize) {
    for fold in 0..n {
        let model = tiny_model(fold as u64 + 1);
        let meta = CheckpointMeta {
            config: model.config().clone(),
            fold,
            seed: 0,
            epoch: 0,
            val_metrics: Default::default(),
            split_hash: "fixture".into(),
        };
        save_checkpoint(dir, &model, &meta).unwrap();
    }
}

pub fn fixture_png() -> Vec<u8> {
    let img = RgbImage::from_fn(300, 240, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]));
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img).write_to(&mut buf, ImageFormat::Png).unwrap();
    buf.into_inner()
}

/// Synthetic Y4M clip at 30 fps.
pub fn fixture_video(seconds: usize) -> Vec<u8> {
    let mut bytes = Vec::new();
    write_y4m(&mut bytes, &synthetic_frames(30 * seconds, 48, 40), 30, 1).unwrap();
    bytes
}

pub fn multipart(file: &[u8], options: Option<&str>) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(
        format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"upload\"\r\nContent-Type: application/octet-stream\r\n\r\n").as_bytes(),
    );
    body.extend_from_slice(file);
    body.extend_from_slice(b"\r\n");
    if let Some(o) = options {
        body.extend_from_slice(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"options\"\r\n\r\n{o}\r\n").as_bytes());
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn predict_request(body: Vec<u8>) -> Request<Body> {
    Request::post("/predict")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

pub async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}
