mod common;

use axum::http::StatusCode;
use common::{decode_bmp, fixture, get, image_path, NO_MASK_ID};
use derm_core::data::pnm::{read_pgm, read_ppm};
use derm_core::data::RgbImage;
use derm_service::bmp::encode_bmp;

#[tokio::test]
async fn samples_paging_and_filters() {
    let fx = fixture();
    let app = fx.router();

    let all = get(&app, "/api/samples?limit=1000").await;
    assert_eq!(all.status, StatusCode::OK);
    let v = all.json();
    assert_eq!(v["total"], 39);
    let ids: Vec<&str> = v["items"].as_array().unwrap().iter().map(|i| i["id"].as_str().unwrap()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert_eq!(v["items"][0]["thumbnail_url"], format!("/api/image/{}?kind=raw", ids[0]));

    let empty = get(&app, "/api/samples?limit=0").await.json();
    assert_eq!(empty["total"], 39);
    assert!(empty["items"].as_array().unwrap().is_empty());

    let unknown = get(&app, "/api/samples?disease=psoriasis").await;
    assert_eq!(unknown.status, StatusCode::OK);
    assert_eq!(unknown.json()["total"], 0);

    let past = get(&app, "/api/samples?offset=500").await;
    assert_eq!(past.status, StatusCode::OK);
    assert!(past.json()["items"].as_array().unwrap().is_empty());

    let test = get(&app, "/api/samples?split=test&limit=3&offset=2").await.json();
    assert_eq!(test["total"], 9);
    let items = test["items"].as_array().unwrap();
    assert_eq!(items.len(), 3);
    assert!(items.iter().all(|i| i["split"] == "test"));
    assert_eq!(items[0]["id"], "te0002");

    let mel = get(&app, "/api/samples?disease=melanoma&limit=1000").await.json();
    assert!(mel["total"].as_u64().unwrap() > 0);
    assert!(mel["items"].as_array().unwrap().iter().all(|i| i["disease"] == "melanoma"));
}

#[tokio::test]
async fn samples_bad_params() {
    let fx = fixture();
    let app = fx.router();
    for uri in
        ["/api/samples?offset=-1", "/api/samples?limit=abc", "/api/samples?split=val", "/api/samples?limit=100000"]
    {
        let r = get(&app, uri).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{uri}");
        let v = r.json();
        assert_eq!(v["code"], 400);
        assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[tokio::test]
async fn image_transcodes_to_matching_bmp() {
    let fx = fixture();
    let app = fx.router();
    let r = get(&app, "/api/image/tr0003?kind=raw").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type.as_deref(), Some("image/bmp"));
    let ppm = read_ppm(image_path(fx.path(), "tr0003")).unwrap();
    assert_eq!(decode_bmp(&r.body), ppm);

    let default_kind = get(&app, "/api/image/tr0003").await;
    assert_eq!(default_kind.body, r.body);

    let m = common::manifest(fx.path());
    let mask = read_pgm(m.mask_path(m.get("tr0003").unwrap()).unwrap()).unwrap();
    let r = get(&app, "/api/image/tr0003?kind=mask").await;
    assert_eq!(r.status, StatusCode::OK);
    let decoded = decode_bmp(&r.body);
    assert_eq!((decoded.width, decoded.height), (mask.width, mask.height));
    for (px, &g) in decoded.data.chunks(3).zip(&mask.data) {
        assert_eq!(px, [g, g, g]);
    }
}

#[tokio::test]
async fn image_errors() {
    let fx = fixture();
    let app = fx.router();
    assert_eq!(get(&app, "/api/image/nope").await.status, StatusCode::NOT_FOUND);
    let r = get(&app, &format!("/api/image/{NO_MASK_ID}?kind=mask")).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert!(r.json()["message"].as_str().unwrap().contains("no mask"));
    assert_eq!(get(&app, "/api/image/tr0000?kind=thumb").await.status, StatusCode::BAD_REQUEST);
}

#[test]
fn bmp_rows_are_padded_for_odd_widths() {
    for (w, h) in [(1, 1), (2, 3), (3, 2), (5, 4), (4, 4), (7, 1)] {
        let data = (0..w * h * 3).map(|i| (i * 37 % 251) as u8).collect();
        let img = RgbImage { width: w, height: h, data };
        let bytes = encode_bmp(&img);
        assert_eq!(bytes.len(), 54 + ((w * 3).div_ceil(4) * 4) * h);
        assert_eq!(decode_bmp(&bytes), img, "{w}x{h}");
    }
}
