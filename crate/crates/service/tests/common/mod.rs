#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use derm_core::data::synth::{generate_synthetic, SynthConfig, MANIFEST_FILE};
use derm_core::data::{DatasetManifest, ManifestKind, RgbImage, Split};
use derm_core::model::{embed, init_model, ModelConfig};
use derm_core::retrieval::EmbeddingIndex;
use derm_core::weights::{load_weights_for, save_weights};
use derm_service::{router, AppState, Limits, ServiceConfig};
use http_body_util::BodyExt;
use tower::ServiceExt;

pub const NO_MASK_ID: &str = "te9999";

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub config: ServiceConfig,
}

impl Fixture {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn state(&self) -> AppState {
        AppState::load(&self.config).expect("state loads")
    }

    pub fn state_with(&self, limits: Limits) -> AppState {
        AppState::load(&ServiceConfig { limits, ..self.config.clone() }).expect("state loads")
    }

    pub fn router(&self) -> Router {
        router(Arc::new(self.state()))
    }
}

/// A small synthetic dataset, an untrained desk model and an index over the
/// training split, all written to a temp dir. One extra test record has no
/// mask.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth = SynthConfig { n_train: 30, n_test: 8, n_unconstrained: 0, ..SynthConfig::default() };
    let mut manifest = generate_synthetic(&synth, root).unwrap();
    let mut extra = manifest.records[0].clone();
    extra.id = NO_MASK_ID.into();
    extra.mask_path = None;
    extra.split = Split::Test;
    manifest.records.push(extra);
    manifest.save(root.join(MANIFEST_FILE)).unwrap();
    let manifest = DatasetManifest::load(root.join(MANIFEST_FILE), ManifestKind::Hierarchical).unwrap();

    let model = ModelConfig::default();
    let params = init_model(&model).unwrap();
    save_weights(&params, root.join("weights.bin")).unwrap();
    let params = load_weights_for(root.join("weights.bin"), &model).unwrap();
    let mut index = EmbeddingIndex::new(model.embed_dim).unwrap();
    let images = manifest.load_images(Some(Split::Train)).unwrap();
    for r in manifest.split(Split::Train) {
        let out = embed(&model, &params, &r.id, &images[&r.id]).unwrap();
        index.insert(&r.id, &out.embedding, r.label()).unwrap();
    }
    index.save(root.join("index.bin")).unwrap();

    let config = ServiceConfig {
        manifest: root.join(MANIFEST_FILE),
        model: None,
        weights: root.join("weights.bin"),
        index: root.join("index.bin"),
        annotations: Some(root.join("groups.csv")),
        feedback_log: Some(root.join("feedback.csv")),
        limits: Limits::default(),
    };
    Fixture { dir, config }
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn text(&self) -> String {
        String::from_utf8(self.body.clone()).unwrap()
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> Reply {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_owned())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_owned());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, content_type, body }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, "GET", uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: serde_json::Value) -> Reply {
    call(app, "POST", uri, Some(&body.to_string())).await
}

/// Independent reader for 24-bit uncompressed BMPs, both row orders.
pub fn decode_bmp(bytes: &[u8]) -> RgbImage {
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let i32_at = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    assert_eq!(&bytes[..2], b"BM");
    assert_eq!(u32_at(2) as usize, bytes.len());
    let offset = u32_at(10) as usize;
    let width = i32_at(18) as usize;
    let raw_h = i32_at(22);
    assert_eq!(u16::from_le_bytes([bytes[28], bytes[29]]), 24);
    assert_eq!(u32_at(30), 0, "uncompressed");
    let height = raw_h.unsigned_abs() as usize;
    let stride = (width * 3 + 3) & !3;
    assert_eq!(bytes.len(), offset + stride * height);
    let mut data = vec![0u8; width * height * 3];
    for row in 0..height {
        let y = if raw_h > 0 { height - 1 - row } else { row };
        for x in 0..width {
            let p = offset + row * stride + x * 3;
            let q = (y * width + x) * 3;
            data[q] = bytes[p + 2];
            data[q + 1] = bytes[p + 1];
            data[q + 2] = bytes[p];
        }
    }
    RgbImage { width, height, data }
}

pub fn train_ids(root: &Path) -> Vec<String> {
    let m = DatasetManifest::load(root.join(MANIFEST_FILE), ManifestKind::Hierarchical).unwrap();
    m.split(Split::Train).map(|r| r.id.clone()).collect()
}

pub fn manifest(root: &Path) -> DatasetManifest {
    DatasetManifest::load(root.join(MANIFEST_FILE), ManifestKind::Hierarchical).unwrap()
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    let m = manifest(root);
    m.image_path(m.get(id).unwrap())
}
