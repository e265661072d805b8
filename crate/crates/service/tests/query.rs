mod common;

use std::time::Duration;

use axum::http::StatusCode;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use common::{decode_bmp, fixture, get, image_path, post, train_ids};
use derm_core::data::pnm::{encode_ppm, read_ppm};
use derm_core::data::RgbImage;
use derm_core::evidence::color_table;
use derm_service::{router, Limits};
use serde_json::json;
use std::sync::Arc;

#[tokio::test]
async fn self_retrieval_ranks_itself_first() {
    let fx = fixture();
    let app = fx.router();
    for id in train_ids(fx.path()).iter().take(6) {
        let r = post(&app, "/api/query", json!({"sample_id": id, "k": 5})).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        assert_eq!(v["neighbors"][0]["id"], id.as_str());
        assert_eq!(v["neighbors"][0]["distance"], 0.0);
        assert_eq!(v["neighbors"][0]["rank"], 1);
        let n = v["neighbors"].as_array().unwrap();
        assert_eq!(n.len(), 5);
        assert!(n.windows(2).all(|w| w[0]["distance"].as_f64() <= w[1]["distance"].as_f64()));
        let positives = n.iter().filter(|x| x["disease"] == "melanoma").count();
        assert_eq!(v["melanoma_score"].as_f64().unwrap(), positives as f64 / 5.0);
        let handle = v["query_handle"].as_str().unwrap();
        assert_eq!(v["evidence_handles"][0], format!("/api/evidence/{handle}/{id}"));
    }
}

#[tokio::test]
async fn query_is_deterministic() {
    let fx = fixture();
    let body = json!({"sample_id": "te0001", "k": 7});
    let a = post(&fx.router(), "/api/query", body.clone()).await;
    let b = post(&fx.router(), "/api/query", body).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.body, b.body);
}

#[tokio::test]
async fn upload_matches_query_by_id() {
    let fx = fixture();
    let app = fx.router();
    let ppm = std::fs::read(image_path(fx.path(), "te0002")).unwrap();
    let up = post(&app, "/api/query", json!({"image": B64.encode(&ppm), "k": 4})).await;
    assert_eq!(up.status, StatusCode::OK);
    let by_id = post(&app, "/api/query", json!({"sample_id": "te0002", "k": 4})).await.json();
    let up = up.json();
    assert_eq!(up["neighbors"], by_id["neighbors"]);
    assert!(up["sample_id"].is_null());
    assert_ne!(up["query_handle"], by_id["query_handle"]);
    let handle = up["query_handle"].as_str().unwrap();
    let ev = get(&app, &format!("/api/evidence/{handle}/tr0001")).await;
    assert_eq!(ev.status, StatusCode::OK);
}

#[tokio::test]
async fn query_errors() {
    let fx = fixture();
    let app = fx.router();
    let n = train_ids(fx.path()).len();
    let cases = [
        (json!({"sample_id": "tr0000", "k": n + 1}), StatusCode::BAD_REQUEST),
        (json!({"sample_id": "tr0000", "k": 0}), StatusCode::BAD_REQUEST),
        (json!({"sample_id": "tr0000"}), StatusCode::BAD_REQUEST),
        (json!({"k": 3}), StatusCode::BAD_REQUEST),
        (json!({"sample_id": "tr0000", "image": "AAAA", "k": 3}), StatusCode::BAD_REQUEST),
        (json!({"image": "not base64!", "k": 3}), StatusCode::BAD_REQUEST),
        (json!({"image": B64.encode(b"P6 garbage"), "k": 3}), StatusCode::BAD_REQUEST),
        (json!({"sample_id": "missing", "k": 3}), StatusCode::NOT_FOUND),
    ];
    for (body, status) in cases {
        let r = post(&app, "/api/query", body.clone()).await;
        assert_eq!(r.status, status, "{body}");
        assert_eq!(r.json()["code"], status.as_u16());
    }
    let r = common::call(&app, "POST", "/api/query", Some("{not json")).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let small = RgbImage::filled(32, 32, [200, 150, 120]);
    let r = post(&app, "/api/query", json!({"image": B64.encode(encode_ppm(&small)), "k": 3})).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let state = fx.state_with(Limits { max_upload_bytes: 4096, ..Limits::default() });
    let tight = router(Arc::new(state));
    let ppm = std::fs::read(image_path(fx.path(), "tr0000")).unwrap();
    assert!(ppm.len() > 4096);
    let r = post(&tight, "/api/query", json!({"image": B64.encode(&ppm), "k": 3})).await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn evidence_for_self_is_uniform() {
    let fx = fixture();
    let app = fx.router();
    let q = post(&app, "/api/query", json!({"sample_id": "tr0004", "k": 3})).await.json();
    let handle = q["query_handle"].as_str().unwrap();
    let r = get(&app, &format!("/api/evidence/{handle}/tr0004")).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["distance"], 0.0);
    assert!(v["weight_top_channels"].as_array().unwrap().iter().all(|c| c["weight"] == 0.0));

    // a zero map normalizes to the bottom of the color table everywhere
    let base = read_ppm(image_path(fx.path(), "tr0004")).unwrap();
    let c = color_table()[0];
    let expected: Vec<u8> = base
        .data
        .chunks(3)
        .flat_map(|p| (0..3).map(move |i| ((f64::from(p[i]) + f64::from(c[i])) / 2.0).round() as u8))
        .collect();
    for key in ["qam_heatmap", "ram_heatmap"] {
        let img = decode_bmp(&B64.decode(v[key].as_str().unwrap()).unwrap());
        assert_eq!((img.width, img.height), (base.width, base.height));
        assert_eq!(img.data, expected, "{key}");
    }
}

#[tokio::test]
async fn evidence_channels_and_stability() {
    let fx = fixture();
    let app = fx.router();
    let q = post(&app, "/api/query", json!({"sample_id": "te0003", "k": 5})).await.json();
    let handle = q["query_handle"].as_str().unwrap();
    for n in q["neighbors"].as_array().unwrap() {
        let id = n["id"].as_str().unwrap();
        let uri = format!("/api/evidence/{handle}/{id}");
        let a = get(&app, &uri).await;
        assert_eq!(a.status, StatusCode::OK);
        let v = a.json();
        let d = v["distance"].as_f64().unwrap();
        let top: Vec<f64> =
            v["weight_top_channels"].as_array().unwrap().iter().map(|c| c["weight"].as_f64().unwrap()).collect();
        assert_eq!(top.len(), 8);
        assert!(top.windows(2).all(|w| w[0] >= w[1]));
        assert!(top.iter().sum::<f64>() <= d * (1.0 + 1e-12));
        // the index stores f32 embeddings, the evidence path recomputes in f64
        let listed = n["distance"].as_f64().unwrap();
        assert!((d - listed).abs() <= 1e-5 * (1.0 + listed), "{d} vs {listed}");
        assert_eq!(get(&app, &uri).await.body, a.body);
    }
}

#[tokio::test]
async fn evidence_errors() {
    let fx = fixture();
    let app = fx.router();
    assert_eq!(get(&app, "/api/evidence/deadbeef/tr0000").await.status, StatusCode::NOT_FOUND);
    let q = post(&app, "/api/query", json!({"sample_id": "tr0000", "k": 2})).await.json();
    let handle = q["query_handle"].as_str().unwrap();
    let r = get(&app, &format!("/api/evidence/{handle}/nobody")).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);

    let state = fx.state_with(Limits { handle_ttl: Duration::from_millis(20), ..Limits::default() });
    let short = router(Arc::new(state));
    let q = post(&short, "/api/query", json!({"sample_id": "tr0000", "k": 2})).await.json();
    let uri = format!("/api/evidence/{}/tr0001", q["query_handle"].as_str().unwrap());
    assert_eq!(get(&short, &uri).await.status, StatusCode::OK);
    tokio::time::sleep(Duration::from_millis(60)).await;
    let r = get(&short, &uri).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert!(r.json()["message"].as_str().unwrap().contains("expired"));

    let state = fx.state_with(Limits { cache_capacity: 1, ..Limits::default() });
    let one = router(Arc::new(state));
    let first = post(&one, "/api/query", json!({"sample_id": "tr0000", "k": 2})).await.json();
    post(&one, "/api/query", json!({"sample_id": "tr0001", "k": 2})).await;
    let uri = format!("/api/evidence/{}/tr0001", first["query_handle"].as_str().unwrap());
    assert_eq!(get(&one, &uri).await.status, StatusCode::NOT_FOUND);
}
