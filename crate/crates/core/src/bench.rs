//! End-to-end benchmark: train every regime on a dataset directory and
//! evaluate them side by side.
//!
//! Disease and Joint train from scratch. Hierarchical and NonHierarchical are
//! fine-tuned from the Disease weights on the group annotations. Joint mixes
//! disease triplets over the training split with group triplets over the
//! unconstrained pool, if the dataset has one.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::manifest::{DatasetManifest, ManifestKind, Split};
use crate::data::pnm::load_mask;
use crate::data::synth::{MANIFEST_FILE, UNCONSTRAINED_FILE};
use crate::error::{rejected, Result};
use crate::eval::{evaluate, score_embeddings, EvalConfig, EvalReport, EvalSplit, RegimeModel};
use crate::labels::{HierLabel, LabelMap};
use crate::model::{embed, init_model, ModelConfig};
use crate::retrieval::EmbeddingIndex;
use crate::tensor::Tensor;
use crate::triplet::{train_regime, EpochLoss, ImageSet, Regime, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub model: ModelConfig,
    /// Used by the from-scratch regimes.
    pub scratch: TrainConfig,
    /// Used by the regimes fine-tuned from the Disease weights.
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub regimes: Vec<Regime>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let scratch = TrainConfig {
            batch_size: 32,
            lr: 0.05,
            lr_head: 0.05,
            n_train_triplets: 3000,
            n_val_triplets: 1000,
            epochs: 8,
            lr_step_epochs: 6,
            ..TrainConfig::default()
        };
        let finetune = TrainConfig { lr: 0.02, lr_head: 0.02, epochs: 4, subset_fraction: 0.5, ..scratch.clone() };
        Self {
            model: ModelConfig::default(),
            scratch,
            finetune,
            eval: EvalConfig::default(),
            regimes: Regime::ALL.to_vec(),
        }
    }
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: EvalSplit,
    pub test: EvalSplit,
    /// Unconstrained-annotation pool: images and group-only labels.
    pub pool: Option<(ImageSet, LabelMap)>,
}

fn load_split(m: &DatasetManifest, split: Split) -> Result<EvalSplit> {
    let mut s =
        EvalSplit { images: m.load_images(Some(split))?, labels: m.labels(Some(split)), masks: BTreeMap::new() };
    for r in m.split(split) {
        if let Some(p) = m.mask_path(r) {
            s.masks.insert(r.id.clone(), load_mask(p)?);
        }
    }
    Ok(s)
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = DatasetManifest::load(dir.join(MANIFEST_FILE), ManifestKind::Hierarchical)?;
        let pool_path = dir.join(UNCONSTRAINED_FILE);
        let pool = if pool_path.is_file() {
            let p = DatasetManifest::load(&pool_path, ManifestKind::Unconstrained)?;
            Some((p.load_images(None)?, p.labels(None)))
        } else {
            None
        };
        Ok(Self { train: load_split(&m, Split::Train)?, test: load_split(&m, Split::Test)?, pool })
    }
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub models: Vec<RegimeModel>,
    pub curves: BTreeMap<String, Vec<EpochLoss>>,
    pub report: EvalReport,
}

/// Labels and images a regime trains on. Joint sees the training split with
/// groups stripped, plus the unconstrained pool with its disease-free groups.
pub fn training_set(data: &Dataset, regime: Regime) -> Result<(LabelMap, ImageSet)> {
    if regime != Regime::Joint {
        return Ok((data.train.labels.clone(), data.train.images.clone()));
    }
    let (pool_images, pool_labels) =
        data.pool.as_ref().ok_or_else(|| rejected("joint regime needs an unconstrained annotation pool"))?;
    let mut labels: LabelMap = data
        .train
        .labels
        .iter()
        .map(|(id, l)| (id.clone(), HierLabel { disease: l.disease.clone(), group: None }))
        .collect();
    labels.extend(pool_labels.iter().map(|(k, v)| (k.clone(), v.clone())));
    let mut images = data.train.images.clone();
    images.extend(pool_images.iter().map(|(k, v)| (k.clone(), v.clone())));
    Ok((labels, images))
}

/// Trains the configured regimes in dependency order.
pub fn train_all(cfg: &BenchConfig, data: &Dataset) -> Result<(Vec<RegimeModel>, BTreeMap<String, Vec<EpochLoss>>)> {
    let mut models = Vec::new();
    let mut curves = BTreeMap::new();
    let mut disease_params = None;
    let needs_disease =
        cfg.regimes.iter().any(|r| matches!(r, Regime::Disease | Regime::Hierarchical | Regime::NonHierarchical));
    if needs_disease {
        let out =
            train_regime(&cfg.model, &data.train.labels, &data.train.images, Regime::Disease, &cfg.scratch, None)?;
        disease_params = Some(out.params.clone());
        if cfg.regimes.contains(&Regime::Disease) {
            curves.insert(Regime::Disease.to_string(), out.curve);
            models.push(RegimeModel {
                name: Regime::Disease.to_string(),
                model: cfg.model.clone(),
                params: out.params,
            });
        }
    }
    for &regime in &cfg.regimes {
        let out = match regime {
            Regime::Disease => continue,
            Regime::Joint => {
                let (labels, images) = training_set(data, regime)?;
                train_regime(&cfg.model, &labels, &images, regime, &cfg.scratch, None)?
            }
            Regime::Hierarchical | Regime::NonHierarchical => train_regime(
                &cfg.model,
                &data.train.labels,
                &data.train.images,
                regime,
                &cfg.finetune,
                disease_params.clone(),
            )?,
        };
        curves.insert(regime.to_string(), out.curve);
        models.push(RegimeModel { name: regime.to_string(), model: cfg.model.clone(), params: out.params });
    }
    Ok((models, curves))
}

pub fn run_benchmark(cfg: &BenchConfig, data: &Dataset) -> Result<BenchOutcome> {
    let (models, curves) = train_all(cfg, data)?;
    let mut report = evaluate(&models, &data.train, &data.test, &cfg.eval)?;
    report.metadata.insert("model_seed".into(), cfg.model.seed.to_string());
    report.metadata.insert("train_seed".into(), cfg.scratch.seed.to_string());
    Ok(BenchOutcome { models, curves, report })
}

/// AUC and REL rows for the freshly initialized network.
pub fn untrained_rows(cfg: &BenchConfig, data: &Dataset) -> Result<EvalReport> {
    let m = RegimeModel { name: "untrained".into(), model: cfg.model.clone(), params: init_model(&cfg.model)? };
    evaluate(&[m], &data.train, &data.test, &cfg.eval)
}

/// AUC and REL rows when every image gets an independent random embedding,
/// so retrieval carries no information about the query.
pub fn null_model_rows(data: &Dataset, dim: usize, ks: &[usize], seed: u64) -> Result<EvalReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || Tensor::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mut index = EmbeddingIndex::new(dim)?;
    for (id, l) in &data.train.labels {
        index.insert(id, &draw(), l.clone())?;
    }
    let queries: BTreeMap<String, Tensor> = data.test.labels.keys().map(|id| (id.clone(), draw())).collect();
    Ok(EvalReport { rows: score_embeddings("null", &index, &queries, &data.test.labels, ks)?, ..EvalReport::default() })
}

/// Embeds one split with every model, for callers that need the raw outputs.
pub fn embed_split(m: &RegimeModel, images: &ImageSet) -> Result<BTreeMap<String, Tensor>> {
    images.iter().map(|(id, img)| Ok((id.clone(), embed(&m.model, &m.params, id, img)?.embedding))).collect()
}
