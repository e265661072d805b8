use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_triplets, triplet_loss, triplet_loss_backward, Regime, SamplerOptions, Triplet};
use crate::error::{rejected, Error, Result};
use crate::kv::KvFile;
use crate::labels::LabelMap;
use crate::model::{embed, embed_on_tape, init_model, ModelConfig, GROUP_HEAD};
use crate::params::{sgd_momentum_step, GroupRates, ParamSet};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Sample id to image tensor.
pub type ImageSet = BTreeMap<String, Tensor>;

/// Sample id to embedding, for loss evaluation without tapes.
pub type EmbeddingCache = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Rate for every layer except the final conv.
    pub lr: f64,
    /// Rate for the final conv feeding the pooled embedding.
    pub lr_head: f64,
    /// "step" policy: rates are multiplied by `lr_gamma` every `lr_step_epochs` epochs.
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub n_train_triplets: usize,
    pub n_val_triplets: usize,
    pub joint_mix_ratio: f64,
    /// Fraction of labeled samples used to draw triplets.
    pub subset_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            batch_size: 128,
            momentum: 0.9,
            lr: 0.01,
            lr_head: 0.01,
            lr_step_epochs: 10,
            lr_gamma: 0.1,
            n_train_triplets: 15_000,
            n_val_triplets: 5_000,
            joint_mix_ratio: 0.5,
            subset_fraction: 1.0,
            epochs: 5,
            seed: 17,
        }
    }
}

const TRAIN_KEYS: [&str; 13] = [
    "margin",
    "batch_size",
    "momentum",
    "lr",
    "lr_head",
    "lr_step_epochs",
    "lr_gamma",
    "n_train_triplets",
    "n_val_triplets",
    "joint_mix_ratio",
    "subset_fraction",
    "epochs",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(0.0..=1.0).contains(&self.joint_mix_ratio) {
            return Err(Error::Config("joint_mix_ratio must lie in [0, 1]".into()));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Config("subset_fraction must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.lr_step_epochs == 0 {
            return Err(Error::Config("batch_size and lr_step_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.lr < 0.0 || self.lr_head < 0.0 {
            return Err(Error::Config("need 0 <= momentum < 1 and non-negative rates".into()));
        }
        Ok(())
    }

    /// Rates in effect during `epoch` (1-based).
    pub fn rates_for_epoch(&self, epoch: usize) -> GroupRates {
        let steps = (epoch.saturating_sub(1) / self.lr_step_epochs) as i32;
        GroupRates::uniform(self.lr).with(GROUP_HEAD, self.lr_head).scaled(self.lr_gamma.powi(steps))
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("margin", self.margin);
        kv.set("batch_size", self.batch_size);
        kv.set("momentum", self.momentum);
        kv.set("lr", self.lr);
        kv.set("lr_head", self.lr_head);
        kv.set("lr_step_epochs", self.lr_step_epochs);
        kv.set("lr_gamma", self.lr_gamma);
        kv.set("n_train_triplets", self.n_train_triplets);
        kv.set("n_val_triplets", self.n_val_triplets);
        kv.set("joint_mix_ratio", self.joint_mix_ratio);
        kv.set("subset_fraction", self.subset_fraction);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        kv.check_keys(&TRAIN_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            margin: kv.get_or("margin", d.margin)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            lr: kv.get_or("lr", d.lr)?,
            lr_head: kv.get_or("lr_head", d.lr_head)?,
            lr_step_epochs: kv.get_or("lr_step_epochs", d.lr_step_epochs)?,
            lr_gamma: kv.get_or("lr_gamma", d.lr_gamma)?,
            n_train_triplets: kv.get_or("n_train_triplets", d.n_train_triplets)?,
            n_val_triplets: kv.get_or("n_val_triplets", d.n_val_triplets)?,
            joint_mix_ratio: kv.get_or("joint_mix_ratio", d.joint_mix_ratio)?,
            subset_fraction: kv.get_or("subset_fraction", d.subset_fraction)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    /// Row 0 holds the losses of the initial parameters.
    pub curve: Vec<EpochLoss>,
}

impl TrainOutcome {
    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for e in &self.curve {
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn image<'a>(images: &'a ImageSet, id: &str) -> Result<&'a Tensor> {
    images.get(id).ok_or_else(|| rejected(format!("no image for sample {id}")))
}

/// Embeds every sample referenced by `triplets`.
pub fn embed_referenced(
    model: &ModelConfig,
    params: &ParamSet,
    images: &ImageSet,
    triplets: &[Triplet],
) -> Result<EmbeddingCache> {
    let mut cache = EmbeddingCache::new();
    for t in triplets {
        for id in t.ids() {
            if !cache.contains_key(id) {
                let out = embed(model, params, id, image(images, id)?)?;
                cache.insert(id.to_owned(), out.embedding);
            }
        }
    }
    Ok(cache)
}

/// Mean triplet objective over `triplets` using precomputed embeddings.
pub fn mean_triplet_loss(cache: &EmbeddingCache, triplets: &[Triplet], margin: f64) -> Result<f64> {
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let get = |id: &str| cache.get(id).ok_or_else(|| rejected(format!("no embedding for {id}")));
    let mut total = 0.0;
    for t in triplets {
        total += triplet_loss(get(&t.anchor)?, get(&t.similar)?, get(&t.dissimilar)?, margin)?.value;
    }
    Ok(total / triplets.len() as f64)
}

/// Mean loss of a batch and its exact gradient with respect to every parameter.
///
/// Each distinct image is embedded once on its own tape; embedding gradients
/// from all triplets that use it are summed before a single backward pass.
/// All three triplet branches therefore share one set of weights.
pub fn batch_gradient(
    model: &ModelConfig,
    params: &ParamSet,
    images: &ImageSet,
    batch: &[Triplet],
    margin: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(rejected("empty batch"));
    }
    struct Branch {
        tape: Tape,
        embedding: crate::tape::NodeId,
        grad: Tensor,
    }
    let mut branches: BTreeMap<&str, Branch> = BTreeMap::new();
    for t in batch {
        for id in t.ids() {
            if branches.contains_key(id) {
                continue;
            }
            let mut tape = Tape::new();
            let nodes = tape.params(params);
            let out = embed_on_tape(model, &mut tape, &nodes, image(images, id)?.clone())?;
            let grad = Tensor::zeros(tape.value(out.embedding).shape());
            branches.insert(id, Branch { tape, embedding: out.embedding, grad });
        }
    }

    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for t in batch {
        let emb = |id: &str| branches[id].tape.value(branches[id].embedding).clone();
        let (fa, fb, fc) = (emb(&t.anchor), emb(&t.similar), emb(&t.dissimilar));
        total += triplet_loss(&fa, &fb, &fc, margin)?.value;
        let g = triplet_loss_backward(&fa, &fb, &fc, margin)?;
        for (id, gi) in [(&t.anchor, g.anchor), (&t.similar, g.similar), (&t.dissimilar, g.dissimilar)] {
            branches.get_mut(id.as_str()).expect("embedded above").grad.add_assign(&gi.scale(scale))?;
        }
    }

    let mut grads: BTreeMap<String, Tensor> =
        params.iter().map(|(n, t)| (n.to_owned(), Tensor::zeros(t.shape()))).collect();
    for b in branches.values_mut() {
        if b.grad.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let g = b.tape.backward(b.embedding, &b.grad)?;
        for (name, pg) in g.params() {
            grads.get_mut(name).expect("same parameter names").add_assign(pg)?;
        }
    }
    Ok((total * scale, grads))
}

/// Worst disagreement found by [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst scalar.
    pub worst: (String, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares [`batch_gradient`] against central differences with step `eps`
/// on every parameter scalar. The relative error divides by
/// `max(|analytic|, |numeric|, floor)`.
pub fn gradient_check(
    model: &ModelConfig,
    params: &ParamSet,
    images: &ImageSet,
    batch: &[Triplet],
    margin: f64,
    eps: f64,
    floor: f64,
) -> Result<GradientCheck> {
    let (_, grads) = batch_gradient(model, params, images, batch, margin)?;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut out =
        GradientCheck { max_relative_error: 0.0, worst: (String::new(), 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    for name in names {
        for i in 0..grads[&name].len() {
            let mut loss_at = |v: f64| -> Result<f64> {
                probe.get_mut(&name).expect("known name").data_mut()[i] = v;
                let cache = embed_referenced(model, &probe, images, batch)?;
                mean_triplet_loss(&cache, batch, margin)
            };
            let orig = params.require(&name)?.data()[i];
            let numeric = (loss_at(orig + eps)? - loss_at(orig - eps)?) / (2.0 * eps);
            loss_at(orig)?;
            let analytic = grads[&name].data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if err > out.max_relative_error || out.checked == 1 {
                out.max_relative_error = err;
                out.worst = (name.clone(), i);
                out.analytic = analytic;
                out.numeric = numeric;
            }
        }
    }
    Ok(out)
}

/// Mini-batch SGD with momentum over fixed triplet lists.
pub fn train(
    model: &ModelConfig,
    init: ParamSet,
    images: &ImageSet,
    train_triplets: &[Triplet],
    val_triplets: &[Triplet],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_params(&init)?;
    if train_triplets.is_empty() {
        return Err(rejected("no training triplets"));
    }
    let mut params = init;
    params.reset_velocity();

    let cache = embed_referenced(model, &params, images, train_triplets)?;
    let train0 = mean_triplet_loss(&cache, train_triplets, cfg.margin)?;
    let val0 = val_loss(model, &params, images, val_triplets, cfg.margin)?;
    let mut curve = vec![EpochLoss { epoch: 0, train_loss: train0, val_loss: val0 }];
    log::info!("epoch 0: train {train0:.5} val {val0:.5}");

    let mut order: Vec<&Triplet> = train_triplets.iter().collect();
    for epoch in 1..=cfg.epochs {
        let rates = cfg.rates_for_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Triplet> = chunk.iter().map(|t| (*t).clone()).collect();
            let (loss, grads) =
                batch_gradient(model, &params, images, &batch, cfg.margin).map_err(|e| diverged(e, epoch, bi))?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} batch {bi}: non-finite loss or gradient (loss = {loss})"
                )));
            }
            sum += loss * batch.len() as f64;
            sgd_momentum_step(&mut params, &grads, &rates, cfg.momentum)?;
            if let Some((name, _)) = params.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} batch {bi}: parameter {name} is no longer finite"
                )));
            }
        }
        let train_loss = sum / order.len() as f64;
        let val = val_loss(model, &params, images, val_triplets, cfg.margin).map_err(|e| diverged(e, epoch, 0))?;
        if !val.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: validation loss {val}")));
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val:.5}");
        curve.push(EpochLoss { epoch, train_loss, val_loss: val });
    }
    Ok(TrainOutcome { params, curve })
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericDomain(m) => Error::Divergence(format!("epoch {epoch} batch {batch}: {m}")),
        other => other,
    }
}

fn val_loss(
    model: &ModelConfig,
    params: &ParamSet,
    images: &ImageSet,
    triplets: &[Triplet],
    margin: f64,
) -> Result<f64> {
    let cache = embed_referenced(model, params, images, triplets)?;
    mean_triplet_loss(&cache, triplets, margin)
}

/// Deterministic subset of the labeled ids, keeping `fraction` of them.
fn subset_labels(labels: &LabelMap, fraction: f64, seed: u64) -> LabelMap {
    if fraction >= 1.0 {
        return labels.clone();
    }
    let mut ids: Vec<&String> = labels.keys().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = ((labels.len() as f64) * fraction).round().max(1.0) as usize;
    ids.into_iter().take(keep).map(|id| (id.clone(), labels[id].clone())).collect()
}

/// Samples training and validation triplets for `regime` and trains from
/// `stage_init` (a previous stage's weights) or a fresh initialization.
pub fn train_regime(
    model: &ModelConfig,
    labels: &LabelMap,
    images: &ImageSet,
    regime: Regime,
    cfg: &TrainConfig,
    stage_init: Option<ParamSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = subset_labels(labels, cfg.subset_fraction, cfg.seed);
    let opts = SamplerOptions { joint_mix_ratio: cfg.joint_mix_ratio, ..SamplerOptions::default() };
    let base = cfg.seed.wrapping_mul(31).wrapping_add(regime as u64);
    let train_t = sample_triplets(&labels, regime, cfg.n_train_triplets, base, &opts)?;
    let val_t = sample_triplets(&labels, regime, cfg.n_val_triplets, base ^ 0xA5A5_A5A5, &opts)?;
    let init = match stage_init {
        Some(p) => {
            model.check_params(&p)?;
            p
        }
        None => init_model(model)?,
    };
    train(model, init, images, &train_t, &val_t, cfg)
}
