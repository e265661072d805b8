//! Query-result activation map pairs and the machinery to score and draw them.
//!
//! For a query `q` and result `r` with filter maps `g_z` and pooled embeddings
//! `f_z`, each channel is weighted by its share of the squared distance,
//! `w_z = (f_z(q) - f_z(r))^2`, and the query map is `sum_z g_z(q) * w_z`.
//! The result map uses the same weights over the result's filter maps.

use crate::data::pnm::RgbImage;
use crate::error::{rejected, Result};
use crate::model::EmbeddingOutput;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMapPair {
    pub query_id: String,
    pub result_id: String,
    /// `[n, n]`
    pub qam: Tensor,
    /// `[n, n]`
    pub ram: Tensor,
    /// `[d]`, shared by both maps.
    pub weights: Tensor,
}

impl ActivationMapPair {
    /// Squared embedding distance, recovered as the sum of channel weights.
    pub fn distance(&self) -> f64 {
        self.weights.sum()
    }

    /// The `k` heaviest channels as `(channel, weight)`, heaviest first.
    pub fn top_channels(&self, k: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<(usize, f64)> = self.weights.data().iter().copied().enumerate().collect();
        idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        idx.truncate(k);
        idx
    }
}

fn weighted_sum(maps: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let (_, h, w) = maps.dims3()?;
    let mut out = vec![0.0; h * w];
    for (z, &wz) in weights.iter().enumerate() {
        if wz == 0.0 {
            continue;
        }
        for (o, g) in out.iter_mut().zip(maps.channel(z)) {
            *o += g * wz;
        }
    }
    Tensor::new(vec![h, w], out)
}

pub fn activation_pair(q: &EmbeddingOutput, r: &EmbeddingOutput) -> Result<ActivationMapPair> {
    q.embedding.same_shape(&r.embedding)?;
    q.filter_maps.same_shape(&r.filter_maps)?;
    let d = q.embedding.len();
    if q.filter_maps.shape()[0] != d {
        return Err(rejected("filter map channels do not match embedding dimension"));
    }
    let weights: Vec<f64> = q.embedding.data().iter().zip(r.embedding.data()).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(ActivationMapPair {
        query_id: q.sample_id.clone(),
        result_id: r.sample_id.clone(),
        qam: weighted_sum(&q.filter_maps, &weights)?,
        ram: weighted_sum(&r.filter_maps, &weights)?,
        weights: Tensor::from_vec(weights),
    })
}

/// Bilinear interpolation with corner-aligned sampling.
pub fn upsample_map(map: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(rejected(format!("cannot upsample {h}x{w} to smaller {th}x{tw}")));
    }
    let coord = |o: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, pos - i0 as f64)
    };
    let m = map.data();
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = coord(y, h, th);
        for x in 0..tw {
            let (x0, x1, fx) = coord(x, w, tw);
            let top = m[y0 * w + x0] * (1.0 - fx) + m[y0 * w + x1] * fx;
            let bot = m[y1 * w + x0] * (1.0 - fx) + m[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new(vec![th, tw], out)
}

/// Fixed-size bitset image; set bits are foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u64>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![0; (width * height).div_ceil(64)] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        let i = y * self.width + x;
        if on {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Row-major iteration over all pixels.
    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.width * self.height).map(|i| self.bits[i / 64] >> (i % 64) & 1 == 1)
    }
}

fn min_max(data: &[f64]) -> (f64, f64) {
    data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Min-max normalizes to `[0, 1]`; a constant map normalizes to all zeros.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let (lo, hi) = min_max(map.data());
    if !(hi > lo) {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v - lo) / (hi - lo))
}

/// Foreground where the normalized value is at least `tau`. Constant maps
/// give an empty mask.
pub fn binarize_map(map: &Tensor, tau: f64) -> Result<BinaryMask> {
    let (h, w) = map.dims2()?;
    let (lo, hi) = min_max(map.data());
    if !(hi > lo) {
        return Ok(BinaryMask::empty(w, h));
    }
    let d = map.data();
    Ok(BinaryMask::from_fn(w, h, |x, y| (d[y * w + x] - lo) / (hi - lo) >= tau))
}

/// `|a & b| / |a | b|`, defined as 0 when both masks are empty.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(rejected(format!("mask sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    Ok(if union == 0 { 0.0 } else { f64::from(inter) / f64::from(union) })
}

/// Jaccard of the query map, upsampled to the mask's size and thresholded at
/// `tau`, against a ground-truth mask.
pub fn query_map_jaccard(pair: &ActivationMapPair, truth: &BinaryMask, tau: f64) -> Result<f64> {
    let up = upsample_map(&pair.qam, (truth.height(), truth.width()))?;
    jaccard(&binarize_map(&up, tau)?, truth)
}

/// 256-entry blue-cyan-yellow-red ramp.
pub fn color_table() -> [[u8; 3]; 256] {
    let mut t = [[0u8; 3]; 256];
    for (i, entry) in t.iter_mut().enumerate() {
        let x = i as f64 / 255.0;
        let ch = |c: f64| ((1.5 - (4.0 * x - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
        *entry = [ch(3.0), ch(2.0), ch(1.0)];
    }
    t
}

/// Colors the normalized map through [`color_table`] and blends it over `base`.
pub fn render_heatmap(map: &Tensor, base: &RgbImage, alpha: f64) -> Result<RgbImage> {
    let (h, w) = map.dims2()?;
    if (w, h) != (base.width, base.height) {
        return Err(rejected(format!("map {w}x{h} does not match base image {}x{}", base.width, base.height)));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(rejected(format!("alpha {alpha} outside [0, 1]")));
    }
    let table = color_table();
    let norm = normalize_map(map);
    let mut data = Vec::with_capacity(base.data.len());
    for (i, &v) in norm.data().iter().enumerate() {
        let color = table[(v * 255.0).round() as usize];
        for c in 0..3 {
            let b = f64::from(base.data[i * 3 + c]);
            data.push(((1.0 - alpha) * b + alpha * f64::from(color[c])).round() as u8);
        }
    }
    RgbImage::new(w, h, data)
}
