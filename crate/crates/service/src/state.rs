//! Everything the handlers share: dataset, model, index and the two journals.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use derm_core::data::pnm::read_ppm;
use derm_core::data::{DatasetManifest, ManifestKind, RgbImage, Split};
use derm_core::labels::{Disease, HierLabel, LabelMap};
use derm_core::model::ModelConfig;
use derm_core::params::ParamSet;
use derm_core::retrieval::EmbeddingIndex;
use derm_core::tensor::Tensor;
use derm_core::triplet::Regime;
use derm_core::weights::load_weights_for;

use crate::annotations::{AnnotationStore, ImageCatalog, SetMode};
use crate::cache::{QueryCache, DEFAULT_CAPACITY, DEFAULT_TTL};
use crate::error::ApiError;
use crate::feedback::FeedbackLog;

/// File locations for [`AppState::load`].
#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub manifest: PathBuf,
    /// Model architecture file; the default desk model when absent.
    pub model: Option<PathBuf>,
    pub weights: PathBuf,
    pub index: PathBuf,
    pub annotations: Option<PathBuf>,
    pub feedback_log: Option<PathBuf>,
    pub limits: Limits,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limits {
    /// Largest accepted decoded upload, in bytes.
    pub max_upload_bytes: usize,
    pub cache_capacity: usize,
    pub handle_ttl: Duration,
    pub heatmap_alpha: f64,
    pub max_page: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_upload_bytes: 1 << 20,
            cache_capacity: DEFAULT_CAPACITY,
            handle_ttl: DEFAULT_TTL,
            heatmap_alpha: 0.5,
            max_page: 1000,
        }
    }
}

pub struct AppState {
    pub manifest: DatasetManifest,
    pub model: ModelConfig,
    pub params: ParamSet,
    pub index: EmbeddingIndex,
    pub annotations: RwLock<AnnotationStore>,
    pub feedback: RwLock<FeedbackLog>,
    pub cache: Mutex<QueryCache>,
    pub limits: Limits,
}

impl ImageCatalog for DatasetManifest {
    fn disease_of(&self, image_id: &str) -> Option<Option<Disease>> {
        self.get(image_id).map(|r| r.disease.clone())
    }
}

impl AppState {
    pub fn new(
        manifest: DatasetManifest,
        model: ModelConfig,
        params: ParamSet,
        index: EmbeddingIndex,
        annotations: AnnotationStore,
        feedback: FeedbackLog,
        limits: Limits,
    ) -> Result<Self, ApiError> {
        model.check_params(&params)?;
        if index.dim() != model.embed_dim {
            return Err(ApiError::internal(format!(
                "index dimension {} does not match model embedding {}",
                index.dim(),
                model.embed_dim
            )));
        }
        Ok(Self {
            manifest,
            model,
            params,
            index,
            annotations: RwLock::new(annotations),
            feedback: RwLock::new(feedback),
            cache: Mutex::new(QueryCache::new(limits.cache_capacity, limits.handle_ttl)),
            limits,
        })
    }

    pub fn load(cfg: &ServiceConfig) -> Result<Self, ApiError> {
        let manifest = DatasetManifest::load(&cfg.manifest, ManifestKind::Hierarchical)?;
        let model = match &cfg.model {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::default(),
        };
        let params = load_weights_for(&cfg.weights, &model)?;
        let index = EmbeddingIndex::load(&cfg.index)?;
        let annotations = match &cfg.annotations {
            Some(p) => AnnotationStore::open(p, &manifest)?,
            None => AnnotationStore::in_memory(),
        };
        let feedback = match &cfg.feedback_log {
            Some(p) => FeedbackLog::open(p)?,
            None => FeedbackLog::in_memory(),
        };
        Self::new(manifest, model, params, index, annotations, feedback, cfg.limits)
    }

    pub fn read_image(&self, id: &str) -> Result<RgbImage, ApiError> {
        let r = self.manifest.get(id).ok_or_else(|| ApiError::not_found(format!("unknown sample {id}")))?;
        Ok(read_ppm(self.manifest.image_path(r))?)
    }

    /// The network input for an image, or 422 if its size does not fit the model.
    pub fn model_input(&self, img: &RgbImage) -> Result<Tensor, ApiError> {
        let [c, h, w] = self.model.image_shape();
        if (img.width, img.height) != (w, h) {
            return Err(ApiError::unprocessable(format!(
                "image is {}x{}, the model expects {w}x{h}",
                img.width, img.height
            )));
        }
        Ok(if c == 1 { img.to_gray_tensor() } else { img.to_tensor() })
    }

    pub fn export_labels(&self, regime: Regime, set: Option<&str>) -> Result<LabelMap, ApiError> {
        export_labels(&self.manifest, &self.annotations.read().expect("annotation lock"), regime, set)
    }
}

/// Labels for triplet export: training-split diseases from the manifest plus
/// the group memberships currently recorded in annotation set `set`.
/// Group-based regimes read the hierarchical set by default, Joint the
/// unconstrained one. A missing set contributes no groups.
pub fn export_labels(
    manifest: &DatasetManifest,
    store: &AnnotationStore,
    regime: Regime,
    set: Option<&str>,
) -> Result<LabelMap, ApiError> {
    let mut labels: LabelMap = manifest
        .split(Split::Train)
        .map(|r| (r.id.clone(), HierLabel { disease: r.disease.clone(), group: None }))
        .collect();
    let mode = match regime {
        Regime::Disease => return Ok(labels),
        Regime::Hierarchical | Regime::NonHierarchical => SetMode::Hierarchical,
        Regime::Joint => SetMode::Unconstrained,
    };
    let name = set.unwrap_or(mode.as_str());
    let Some(s) = store.set(name) else {
        return Ok(labels);
    };
    if s.mode != mode {
        return Err(ApiError::bad_request(format!(
            "set {name} is {}, {regime} needs {}",
            s.mode.as_str(),
            mode.as_str()
        )));
    }
    let groups: BTreeMap<&String, &String> = s.membership().iter().collect();
    for (id, label) in labels.iter_mut() {
        label.group = groups.get(id).map(|g| (*g).clone());
    }
    Ok(labels)
}
