//! Deterministic synthetic dermoscopy-like images with a disease/group hierarchy.
//!
//! Each disease fixes an appearance family (hue band, lesion darkness, border
//! irregularity, ring texture frequency). Each group inside a disease fixes a
//! hue within that band, an eccentricity and a texture phase. Every image is a
//! skin-tone gradient with noise and one irregular elliptical lesion, jittered
//! in position, size, rotation and color. The mask is the exact lesion support.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::manifest::{DatasetManifest, ManifestKind, ManifestRecord, Split};
use super::pnm::{write_pgm, write_ppm, GrayImage, RgbImage};
use crate::error::{rejected, Result};
use crate::labels::Disease;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const UNCONSTRAINED_FILE: &str = "unconstrained.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Group counts for melanoma, seborrheic keratosis and benign nevus.
    pub groups_per_disease: Vec<usize>,
    pub image_size: usize,
    /// Size of the extra training pool annotated with disease-free groups.
    pub n_unconstrained: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 600,
            n_test: 200,
            groups_per_disease: vec![5, 3, 4],
            image_size: 64,
            n_unconstrained: 510,
            seed: 2017,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups_per_disease.len() != Disease::KNOWN.len() {
            return Err(rejected(format!(
                "need group counts for {} diseases, got {}",
                Disease::KNOWN.len(),
                self.groups_per_disease.len()
            )));
        }
        if self.groups_per_disease.contains(&0) {
            return Err(rejected("group counts must be positive"));
        }
        if self.image_size < 16 {
            return Err(rejected("image size below 16"));
        }
        Ok(())
    }
}

struct Family {
    hue: (f64, f64),
    saturation: f64,
    value: (f64, f64),
    irregularity: (f64, f64),
    rings: f64,
}

fn family(d: &Disease) -> Family {
    match d {
        Disease::Melanoma => {
            Family { hue: (-35.0, 30.0), saturation: 0.6, value: (0.16, 0.34), irregularity: (0.22, 0.32), rings: 3.0 }
        }
        Disease::SeborrheicKeratosis => {
            Family { hue: (-15.0, 50.0), saturation: 0.6, value: (0.38, 0.56), irregularity: (0.08, 0.16), rings: 2.0 }
        }
        _ => Family { hue: (-25.0, 40.0), saturation: 0.6, value: (0.27, 0.45), irregularity: (0.0, 0.04), rings: 1.0 },
    }
}

/// Appearance fixed by a (disease, group) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStyle {
    pub disease: Disease,
    pub group: String,
    pub hue: f64,
    pub saturation: f64,
    pub value: (f64, f64),
    pub irregularity: (f64, f64),
    pub rings: f64,
    /// Minor over major axis.
    pub aspect: f64,
    pub phase: f64,
}

/// Group id used in manifests, e.g. `M2`, `S0`, `N3`.
pub fn group_name(d: &Disease, g: usize) -> String {
    let prefix = match d {
        Disease::Melanoma => "M",
        Disease::SeborrheicKeratosis => "S",
        _ => "N",
    };
    format!("{prefix}{g}")
}

pub fn group_styles(config: &SynthConfig) -> Result<Vec<GroupStyle>> {
    config.validate()?;
    let mut out = Vec::new();
    for (d, &n) in Disease::KNOWN.iter().zip(&config.groups_per_disease) {
        let f = family(d);
        for g in 0..n {
            let mut rng = derived_rng(config.seed, &format!("style/{d}/{g}"));
            let spread = (g as f64 + 0.5) / n as f64;
            out.push(GroupStyle {
                disease: d.clone(),
                group: group_name(d, g),
                hue: f.hue.0 + spread * (f.hue.1 - f.hue.0),
                saturation: f.saturation,
                value: f.value,
                irregularity: f.irregularity,
                rings: f.rings,
                aspect: 0.5 + 0.5 * ((g * 7 + 3) % n.max(2)) as f64 / (n.max(2) - 1) as f64,
                phase: rng.gen_range(0.0..2.0 * PI),
            });
        }
    }
    Ok(out)
}

fn derived_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one sample; the random stream is derived from `seed` and `id` only.
pub fn render_sample(style: &GroupStyle, size: usize, seed: u64, id: &str) -> (RgbImage, GrayImage) {
    let mut rng = derived_rng(seed, id);
    let s = size as f64;

    let skin = [rng.gen_range(0.78..0.92), rng.gen_range(0.58..0.70), rng.gen_range(0.48..0.60)];
    let grad_angle = rng.gen_range(0.0..2.0 * PI);
    let grad = rng.gen_range(0.0..0.12);

    let major = s * rng.gen_range(0.16..0.24);
    let minor = major * (style.aspect * rng.gen_range(0.92..1.08)).min(1.0);
    let rot = rng.gen_range(0.0..PI);
    let cx = s * rng.gen_range(0.38..0.62);
    let cy = s * rng.gen_range(0.38..0.62);
    let irr = rng.gen_range(style.irregularity.0..=style.irregularity.1);
    let harmonics: Vec<(f64, f64, f64)> =
        (2..=6).map(|k| (k as f64, rng.gen_range(0.3..1.0), rng.gen_range(0.0..2.0 * PI))).collect();
    let norm: f64 = harmonics.iter().map(|h| h.1).sum();
    let hue = style.hue + rng.gen_range(-2.5..2.5);
    let value = rng.gen_range(style.value.0..style.value.1);
    let lesion = hsv_to_rgb(hue, style.saturation, value);
    let phase = style.phase + rng.gen_range(-0.3..0.3);

    // label-independent clutter: lens vignetting and small freckles
    let vignette = rng.gen_range(0.0..0.7);
    let vignette_radius = s * rng.gen_range(0.42..0.65);
    let freckles: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.gen_range(0..=4))
        .map(|_| {
            let color = hsv_to_rgb(rng.gen_range(-30.0..50.0), rng.gen_range(0.3..0.7), rng.gen_range(0.25..0.6));
            (s * rng.gen_range(0.05..0.95), s * rng.gen_range(0.05..0.95), rng.gen_range(1.5..3.5), color)
        })
        .collect();

    let mut rgb = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    let (sin_r, cos_r) = rot.sin_cos();
    let (sin_g, cos_g) = grad_angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let g = grad * (((px / s - 0.5) * cos_g + (py / s - 0.5) * sin_g) * 2.0);
            let mut c = [0.0; 3];
            for ch in 0..3 {
                c[ch] = skin[ch] + g + rng.gen_range(-0.03..0.03);
            }
            for (fx, fy, r, color) in &freckles {
                if (px - fx).hypot(py - fy) <= *r {
                    c = *color;
                }
            }
            let (dx, dy) = (px - cx, py - cy);
            let u = (dx * cos_r + dy * sin_r) / major;
            let v = (-dx * sin_r + dy * cos_r) / minor;
            let rho = u.hypot(v);
            let theta = v.atan2(u);
            let wobble: f64 = harmonics.iter().map(|(k, a, p)| a * (k * theta + p).cos()).sum::<f64>() / norm;
            let edge = 1.0 + irr * wobble;
            let inside = rho <= edge;
            if inside {
                let t = 0.5 + 0.5 * (2.0 * PI * style.rings * rho / edge + phase).cos();
                let shade = 1.0 - 0.35 * t;
                for ch in 0..3 {
                    c[ch] = lesion[ch] * shade + rng.gen_range(-0.02..0.02);
                }
            }
            let d = (px - s / 2.0).hypot(py - s / 2.0);
            let fall = ((d - vignette_radius) / (0.25 * s)).clamp(0.0, 1.0);
            let dim = 1.0 - vignette * fall * fall * (3.0 - 2.0 * fall);
            rgb.extend(c.iter().map(|&v| quantize(v * dim)));
            mask.push(if inside { 255 } else { 0 });
        }
    }
    (RgbImage { width: size, height: size, data: rgb }, GrayImage { width: size, height: size, data: mask })
}

fn write_sample(
    out_dir: &Path,
    style: &GroupStyle,
    config: &SynthConfig,
    id: &str,
    with_mask: bool,
) -> Result<(String, Option<String>)> {
    let (img, mask) = render_sample(style, config.image_size, config.seed, id);
    let image_path = format!("images/{id}.ppm");
    write_ppm(&img, out_dir.join(&image_path))?;
    if !with_mask {
        return Ok((image_path, None));
    }
    let mask_path = format!("masks/{id}.pgm");
    write_pgm(&mask, out_dir.join(&mask_path))?;
    Ok((image_path, Some(mask_path)))
}

/// Writes images, masks and `manifest.csv` under `out_dir`, plus
/// `unconstrained.csv` when the config asks for an unconstrained pool.
/// Returns the hierarchical manifest.
pub fn generate_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let styles = group_styles(config)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;

    let mut records = Vec::with_capacity(config.n_train + config.n_test);
    let splits = [(Split::Train, "tr", config.n_train), (Split::Test, "te", config.n_test)];
    for (split, prefix, n) in splits {
        for i in 0..n {
            let id = format!("{prefix}{i:04}");
            let style = &styles[i % styles.len()];
            let (image_path, mask_path) = write_sample(out_dir, style, config, &id, true)?;
            records.push(ManifestRecord {
                id,
                image_path,
                disease: Some(style.disease.clone()),
                group: Some(style.group.clone()),
                split,
                mask_path,
            });
        }
    }
    let manifest = DatasetManifest::new(ManifestKind::Hierarchical, out_dir, records)?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;

    if config.n_unconstrained > 0 {
        generate_unconstrained_pool(config, &styles, out_dir)?.save(out_dir.join(UNCONSTRAINED_FILE))?;
    }
    Ok(manifest)
}

/// Clusters of hierarchical sub-styles that an annotator without disease
/// knowledge would call alike: styles are ordered by lesion darkness and hue
/// and chunked in pairs, so some clusters straddle two diseases.
pub fn unconstrained_clusters(styles: &[GroupStyle]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..styles.len()).collect();
    let key =
        |s: &GroupStyle| (s.value.0 + s.value.1) * 180.0 + s.hue.rem_euclid(360.0).min(360.0 - s.hue.rem_euclid(360.0));
    order.sort_by(|&a, &b| key(&styles[a]).total_cmp(&key(&styles[b])).then(a.cmp(&b)));
    order.chunks(2).map(<[usize]>::to_vec).collect()
}

fn generate_unconstrained_pool(config: &SynthConfig, styles: &[GroupStyle], out_dir: &Path) -> Result<DatasetManifest> {
    let clusters = unconstrained_clusters(styles);
    let mut records = Vec::with_capacity(config.n_unconstrained);
    for i in 0..config.n_unconstrained {
        let c = i % clusters.len();
        let members = &clusters[c];
        let style = &styles[members[(i / clusters.len()) % members.len()]];
        let id = format!("up{i:04}");
        let (image_path, _) = write_sample(out_dir, style, config, &id, false)?;
        records.push(ManifestRecord {
            id,
            image_path,
            disease: None,
            group: Some(format!("U{c}")),
            split: Split::Train,
            mask_path: None,
        });
    }
    DatasetManifest::new(ManifestKind::Unconstrained, out_dir, records)
}
