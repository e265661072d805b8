//! HTTP handlers. JSON in and out, except image bytes and CSV exports.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use derm_core::data::pnm::{decode_ppm, read_pgm};
use derm_core::data::{RgbImage, Split};
use derm_core::evidence::{activation_pair, render_heatmap, upsample_map};
use derm_core::model::{embed, EmbeddingOutput};
use derm_core::retrieval::melanoma_score;
use derm_core::triplet::{sample_triplets, triplets_to_csv, Regime, SamplerOptions};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotations::{GroupOp, GroupSummary, SetView};
use crate::bmp::{encode_bmp, gray_to_rgb};
use crate::cache::CachedQuery;
use crate::error::ApiError;
use crate::feedback::{now_ms, FeedbackEvent, Verdict};
use crate::state::AppState;

type Shared = Arc<AppState>;
type ApiResult<T> = Result<T, ApiError>;

pub const DEFAULT_PAGE: usize = 50;
pub const TOP_CHANNELS: usize = 8;
const MAX_TRIPLETS: usize = 1_000_000;

pub fn router(state: Shared) -> Router {
    // base64 inflates uploads by 4/3; leave room for the JSON around it
    let body_limit = state.limits.max_upload_bytes * 2 + (64 << 10);
    Router::new()
        .route("/api/samples", get(samples))
        .route("/api/image/{id}", get(image))
        .route("/api/query", post(query))
        .route("/api/evidence/{handle}/{result}", get(evidence))
        .route("/api/groups", get(groups).post(group_op))
        .route("/api/feedback", post(feedback))
        .route("/api/feedback/export", get(feedback_export))
        .route("/api/triplets/export", post(triplet_export))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Parses a JSON body, mapping every failure to 400.
fn parse_json<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

fn parse_param<T: std::str::FromStr>(params: &HashMap<String, String>, key: &str, default: T) -> ApiResult<T> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| ApiError::bad_request(format!("bad value for {key}: {v:?}"))),
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleSummary {
    pub id: String,
    pub split: String,
    pub disease: Option<String>,
    pub group: Option<String>,
    pub has_mask: bool,
    pub thumbnail_url: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SamplePage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<SampleSummary>,
}

async fn samples(
    State(st): State<Shared>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Json<SamplePage>> {
    let split = match params.get("split").map(String::as_str) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<Split>().map_err(|_| ApiError::bad_request(format!("unknown split {s:?}")))?),
    };
    let disease = params.get("disease").filter(|d| !d.is_empty());
    let offset = parse_param(&params, "offset", 0usize)?;
    let limit = parse_param(&params, "limit", DEFAULT_PAGE)?;
    if limit > st.limits.max_page {
        return Err(ApiError::bad_request(format!("limit above {}", st.limits.max_page)));
    }
    let mut matching: Vec<_> = st
        .manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .filter(|r| disease.is_none_or(|d| r.disease.as_ref().is_some_and(|x| x.as_str() == d.as_str())))
        .collect();
    matching.sort_by(|a, b| a.id.cmp(&b.id));
    let items = matching
        .iter()
        .skip(offset)
        .take(limit)
        .map(|r| SampleSummary {
            id: r.id.clone(),
            split: r.split.as_str().to_owned(),
            disease: r.disease.as_ref().map(|d| d.to_string()),
            group: r.group.clone(),
            has_mask: r.mask_path.is_some(),
            thumbnail_url: format!("/api/image/{}?kind=raw", r.id),
        })
        .collect();
    Ok(Json(SamplePage { total: matching.len(), offset, limit, items }))
}

fn bmp_response(img: &RgbImage) -> Response {
    ([(header::CONTENT_TYPE, "image/bmp")], encode_bmp(img)).into_response()
}

async fn image(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let r = st.manifest.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown sample {id}")))?;
    match params.get("kind").map_or("raw", String::as_str) {
        "raw" => Ok(bmp_response(&st.read_image(&id)?)),
        "mask" => {
            let path =
                st.manifest.mask_path(r).ok_or_else(|| ApiError::not_found(format!("sample {id} has no mask")))?;
            Ok(bmp_response(&gray_to_rgb(&read_pgm(path)?)))
        }
        other => Err(ApiError::bad_request(format!("unknown image kind {other:?}"))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    #[serde(default)]
    pub sample_id: Option<String>,
    /// Base64 of a binary PPM.
    #[serde(default)]
    pub image: Option<String>,
    pub k: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct NeighborOut {
    pub rank: usize,
    pub id: String,
    pub distance: f64,
    pub disease: Option<String>,
    pub group: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueryResponse {
    pub query_handle: String,
    pub sample_id: Option<String>,
    pub neighbors: Vec<NeighborOut>,
    pub melanoma_score: f64,
    /// Evidence URL per neighbor, in rank order.
    pub evidence_handles: Vec<String>,
}

fn handle_for(kind: &str, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(payload);
    hex::encode(&h.finalize()[..16])
}

async fn query(State(st): State<Shared>, body: Bytes) -> ApiResult<Json<QueryResponse>> {
    let req: QueryRequest = parse_json(&body)?;
    let (handle, image, sample_id) = match (&req.sample_id, &req.image) {
        (Some(id), None) => (handle_for("sample", id.as_bytes()), st.read_image(id)?, Some(id.clone())),
        (None, Some(b64)) => {
            // base64 is 4/3 of the payload, so reject early before decoding
            if b64.len() / 4 * 3 > st.limits.max_upload_bytes + 3 {
                return Err(ApiError::too_large(format!("upload above {} bytes", st.limits.max_upload_bytes)));
            }
            let bytes = B64.decode(b64.trim()).map_err(|e| ApiError::bad_request(format!("bad base64: {e}")))?;
            if bytes.len() > st.limits.max_upload_bytes {
                return Err(ApiError::too_large(format!("upload above {} bytes", st.limits.max_upload_bytes)));
            }
            let img = decode_ppm(&bytes).map_err(|e| ApiError::bad_request(e.to_string()))?;
            (handle_for("upload", &bytes), img, None)
        }
        _ => return Err(ApiError::bad_request("give exactly one of sample_id and image")),
    };
    if req.k == 0 || req.k > st.index.len() {
        return Err(ApiError::bad_request(format!("k = {} outside 1..={}", req.k, st.index.len())));
    }
    let input = st.model_input(&image)?;
    let output = embed(&st.model, &st.params, sample_id.as_deref().unwrap_or(&handle), &input)?;
    let nl = st.index.knn_query(&output.embedding, req.k)?;
    let score = melanoma_score(&nl, &st.index.label_map())?;
    let neighbors = nl
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let label = st.index.label(st.index.position(&n.id).expect("neighbor is indexed"));
            NeighborOut {
                rank: i + 1,
                id: n.id.clone(),
                distance: n.distance,
                disease: label.disease.as_ref().map(|d| d.to_string()),
                group: label.group.clone(),
            }
        })
        .collect::<Vec<_>>();
    let evidence_handles = neighbors.iter().map(|n| format!("/api/evidence/{handle}/{}", n.id)).collect();
    st.cache.lock().expect("cache lock").insert(handle.clone(), CachedQuery { output, image });
    Ok(Json(QueryResponse { query_handle: handle, sample_id, neighbors, melanoma_score: score, evidence_handles }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelWeight {
    pub channel: usize,
    pub weight: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EvidenceResponse {
    pub query_handle: String,
    pub result_id: String,
    /// Base64 BMP of the query activation map over the query image.
    pub qam_heatmap: String,
    /// Base64 BMP of the result activation map over the result image.
    pub ram_heatmap: String,
    pub distance: f64,
    pub weight_top_channels: Vec<ChannelWeight>,
}

fn overlay(map: &derm_core::Tensor, base: &RgbImage, alpha: f64) -> ApiResult<String> {
    let up = upsample_map(map, (base.height, base.width))?;
    Ok(B64.encode(encode_bmp(&render_heatmap(&up, base, alpha)?)))
}

async fn evidence(
    State(st): State<Shared>,
    Path((handle, result_id)): Path<(String, String)>,
) -> ApiResult<Json<EvidenceResponse>> {
    let q = st
        .cache
        .lock()
        .expect("cache lock")
        .get(&handle)
        .ok_or_else(|| ApiError::not_found(format!("query handle {handle} is unknown or expired")))?;
    if st.manifest.get(&result_id).is_none() {
        return Err(ApiError::not_found(format!("unknown result {result_id}")));
    }
    let r_img = st.read_image(&result_id)?;
    let r_out: EmbeddingOutput = embed(&st.model, &st.params, &result_id, &st.model_input(&r_img)?)?;
    let pair = activation_pair(&q.output, &r_out)?;
    let alpha = st.limits.heatmap_alpha;
    Ok(Json(EvidenceResponse {
        query_handle: handle,
        result_id,
        qam_heatmap: overlay(&pair.qam, &q.image, alpha)?,
        ram_heatmap: overlay(&pair.ram, &r_img, alpha)?,
        distance: pair.distance(),
        weight_top_channels: pair
            .top_channels(TOP_CHANNELS)
            .into_iter()
            .map(|(channel, weight)| ChannelWeight { channel, weight })
            .collect(),
    }))
}

#[derive(Debug, Serialize)]
pub struct GroupsView {
    pub sets: Vec<SetView>,
}

async fn groups(State(st): State<Shared>) -> Json<GroupsView> {
    Json(GroupsView { sets: st.annotations.read().expect("annotation lock").view() })
}

async fn group_op(State(st): State<Shared>, body: Bytes) -> ApiResult<Json<GroupSummary>> {
    let op: GroupOp = parse_json(&body)?;
    let mut store = st.annotations.write().expect("annotation lock");
    Ok(Json(store.execute(&op, &st.manifest)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub query_id: String,
    pub result_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub session_id: String,
}

async fn feedback(State(st): State<Shared>, body: Bytes) -> ApiResult<StatusCode> {
    let req: FeedbackRequest = parse_json(&body)?;
    // a query is either a known sample or a live handle from an uploaded image
    let known_query =
        st.manifest.get(&req.query_id).is_some() || st.cache.lock().expect("cache lock").get(&req.query_id).is_some();
    if !known_query {
        return Err(ApiError::not_found(format!("unknown query {}", req.query_id)));
    }
    if st.manifest.get(&req.result_id).is_none() {
        return Err(ApiError::not_found(format!("unknown result {}", req.result_id)));
    }
    st.feedback.write().expect("feedback lock").append(FeedbackEvent {
        timestamp_ms: now_ms(),
        session_id: req.session_id,
        query_id: req.query_id,
        result_id: req.result_id,
        verdict: req.verdict,
    })?;
    Ok(StatusCode::NO_CONTENT)
}

fn csv_response(body: String) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], body).into_response()
}

async fn feedback_export(State(st): State<Shared>) -> ApiResult<Response> {
    Ok(csv_response(st.feedback.read().expect("feedback lock").to_csv()?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletExportRequest {
    pub regime: String,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Annotation set to read groups from; defaults by regime.
    #[serde(default)]
    pub set: Option<String>,
}

async fn triplet_export(State(st): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let req: TripletExportRequest = parse_json(&body)?;
    let regime: Regime =
        req.regime.parse().map_err(|_| ApiError::bad_request(format!("unknown regime {:?}", req.regime)))?;
    if req.count == 0 || req.count > MAX_TRIPLETS {
        return Err(ApiError::bad_request(format!("count outside 1..={MAX_TRIPLETS}")));
    }
    let labels = st.export_labels(regime, req.set.as_deref())?;
    let triplets = sample_triplets(&labels, regime, req.count, req.seed, &SamplerOptions::default())?;
    Ok(csv_response(triplets_to_csv(&triplets)))
}
