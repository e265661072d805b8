//! `derm`: generate data, train, index, evaluate, query and serve.
//!
//! A run directory holds `model.kv` (architecture), `weights.bin`,
//! `train.kv` (the training config used) and `curve.csv`.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use derm_core::bench::{run_benchmark, training_set, BenchConfig, Dataset};
use derm_core::data::pnm::read_ppm;
use derm_core::data::synth::{generate_synthetic, SynthConfig, MANIFEST_FILE};
use derm_core::data::{DatasetManifest, ManifestKind};
use derm_core::eval::{build_index, evaluate, EvalConfig, RegimeModel};
use derm_core::model::{embed, init_model, ModelConfig};
use derm_core::retrieval::{melanoma_score, EmbeddingIndex};
use derm_core::triplet::{
    read_triplets_csv, sample_triplets, train, train_regime, triplets_to_csv, Regime, SamplerOptions, TrainConfig,
    TrainOutcome,
};
use derm_core::weights::{load_weights_for, save_weights};
use derm_service::annotations::AnnotationStore;
use derm_service::state::export_labels;
use derm_service::{AppState, Limits, ServiceConfig};

const MODEL_FILE: &str = "model.kv";
const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Parser)]
#[command(
    name = "derm",
    version,
    about = "Lesion retrieval with triplet-trained embeddings and activation map evidence"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic lesion dataset.
    Synth(SynthArgs),
    /// Train one regime into a run directory.
    Train(TrainArgs),
    /// Embed the training split into a retrieval index.
    Index(IndexArgs),
    /// Evaluate one or more runs on the test split.
    Eval(EvalArgs),
    /// Train every regime with the default schedule and evaluate them.
    Bench(BenchArgs),
    /// Retrieve neighbors for one image.
    Query(QueryArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Sample triplets from dataset labels or an annotation journal.
    ExportTriplets(ExportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().n_train)]
    n_train: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_test)]
    n_test: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_unconstrained)]
    n_unconstrained: usize,
    #[arg(long, default_value_t = SynthConfig::default().image_size)]
    image_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    regime: Regime,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Training config (`key = value`); defaults to the benchmark schedule.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Train on a triplet CSV (for example one exported from the service).
    /// One fifth of it is held out for validation.
    #[arg(long)]
    triplets: Option<PathBuf>,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// `name=run_dir`, repeatable.
    #[arg(long = "run", required = true, value_parser = parse_named_run)]
    runs: Vec<(String, PathBuf)>,
    #[arg(long, value_delimiter = ',', default_values_t = EvalConfig::default().ks)]
    ks: Vec<usize>,
    #[arg(long, default_value_t = EvalConfig::default().tau)]
    tau: f64,
    /// Write the report CSV here as well as printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for the report and one run directory per regime.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// A binary PPM.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Group annotation journal; created if missing.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Relevance feedback journal; created if missing.
    #[arg(long)]
    feedback_log: Option<PathBuf>,
    /// Model architecture file; the default desk model when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    regime: Regime,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Take groups from this annotation journal instead of the manifest.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Annotation set to read; defaults by regime.
    #[arg(long)]
    set: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_named_run(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_owned(), dir.into())),
        _ => Err(format!("expected name=run_dir, got {s:?}")),
    }
}

fn load_run(dir: &Path) -> Result<(ModelConfig, derm_core::params::ParamSet)> {
    let model = ModelConfig::load(dir.join(MODEL_FILE)).with_context(|| format!("reading {}", dir.display()))?;
    let params = load_weights_for(dir.join(WEIGHTS_FILE), &model)?;
    Ok((model, params))
}

fn save_run(dir: &Path, model: &ModelConfig, params: &derm_core::params::ParamSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    model.save(dir.join(MODEL_FILE))?;
    save_weights(params, dir.join(WEIGHTS_FILE))?;
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_train: a.n_train,
        n_test: a.n_test,
        n_unconstrained: a.n_unconstrained,
        image_size: a.image_size,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let m = generate_synthetic(&cfg, &a.out)?;
    println!("wrote {} samples to {}", m.records.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let defaults = BenchConfig::default();
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None if a.init.is_some() => defaults.finetune.clone(),
        None => defaults.scratch.clone(),
    };
    let model = match &a.init {
        Some(p) => match p.parent().map(|d| d.join(MODEL_FILE)).filter(|m| m.is_file()) {
            Some(m) => ModelConfig::load(m)?,
            None => defaults.model.clone(),
        },
        None => defaults.model.clone(),
    };
    let init = a.init.as_ref().map(|p| load_weights_for(p, &model)).transpose()?;
    let (labels, images) = training_set(&data, a.regime)?;
    let out = match &a.triplets {
        None => train_regime(&model, &labels, &images, a.regime, &cfg, init)?,
        Some(path) => {
            let triplets = read_triplets_csv(fs::File::open(path)?)?;
            if triplets.len() < 5 {
                bail!("{} holds {} triplets, need at least 5", path.display(), triplets.len());
            }
            let (val, tr) = triplets.split_at(triplets.len() / 5);
            let init = match init {
                Some(p) => p,
                None => init_model(&model)?,
            };
            train(&model, init, &images, tr, val, &cfg)?
        }
    };
    save_run(&a.out, &model, &out.params)?;
    fs::write(a.out.join("train.kv"), cfg.to_kv().to_text())?;
    out.write_curve_csv(fs::File::create(a.out.join("curve.csv"))?)?;
    let last = out.curve.last().expect("curve has epoch 0");
    println!(
        "{}: epoch {} train {:.4} val {:.4} -> {}",
        a.regime,
        last.epoch,
        last.train_loss,
        last.val_loss,
        a.out.display()
    );
    Ok(())
}

fn index_cmd(a: IndexArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let (model, params) = load_run(&a.run)?;
    let index = build_index(&RegimeModel { name: "run".into(), model, params }, &data.train)?;
    index.save(&a.out)?;
    println!("indexed {} samples into {}", index.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let models = a
        .runs
        .iter()
        .map(|(name, dir)| {
            let (model, params) = load_run(dir)?;
            Ok(RegimeModel { name: name.clone(), model, params })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&models, &data.train, &data.test, &EvalConfig { ks: a.ks, tau: a.tau })?;
    if let Some(p) = &a.out {
        fs::write(p, report.to_csv()?)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let cfg = BenchConfig::default();
    let out = run_benchmark(&cfg, &data)?;
    fs::create_dir_all(&a.out)?;
    for m in &out.models {
        let dir = a.out.join(&m.name);
        save_run(&dir, &m.model, &m.params)?;
        if let Some(curve) = out.curves.get(&m.name) {
            let run = TrainOutcome { params: m.params.clone(), curve: curve.clone() };
            run.write_curve_csv(fs::File::create(dir.join("curve.csv"))?)?;
        }
    }
    fs::write(a.out.join("report.csv"), out.report.to_csv()?)?;
    print!("{}", out.report.to_table());
    Ok(())
}

fn query_cmd(a: QueryArgs) -> Result<()> {
    let (model, params) = load_run(&a.run)?;
    let index = EmbeddingIndex::load(&a.index)?;
    let img = read_ppm(&a.image)?;
    let input = if model.channels_in == 1 { img.to_gray_tensor() } else { img.to_tensor() };
    let out = embed(&model, &params, "query", &input)?;
    let nl = index.knn_query(&out.embedding, a.k)?;
    let labels = index.label_map();
    println!("rank  id            distance  disease               group");
    for (i, n) in nl.neighbors.iter().enumerate() {
        let l = &labels[&n.id];
        println!(
            "{:>4}  {:<12} {:>9.5}  {:<20}  {}",
            i + 1,
            n.id,
            n.distance,
            l.disease.as_ref().map_or("-".to_owned(), |d| d.to_string()),
            l.group.as_deref().unwrap_or("-")
        );
    }
    println!("melanoma score {:.4}", melanoma_score(&nl, &labels)?);
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let cfg = ServiceConfig {
        manifest: a.manifest,
        model: a.model,
        weights: a.weights,
        index: a.index,
        annotations: a.annotations,
        feedback_log: a.feedback_log,
        limits: Limits::default(),
    };
    let state = AppState::load(&cfg)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad --host/--port")?;
    tokio::runtime::Runtime::new()?.block_on(derm_service::serve(state, addr))?;
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let labels = match &a.annotations {
        None => training_set(&Dataset::load(&a.data)?, a.regime)?.0,
        Some(journal) => {
            let manifest = DatasetManifest::load(a.data.join(MANIFEST_FILE), ManifestKind::Hierarchical)?;
            let store = AnnotationStore::open(journal, &manifest)?;
            export_labels(&manifest, &store, a.regime, a.set.as_deref())?
        }
    };
    let triplets = sample_triplets(&labels, a.regime, a.count, a.seed, &SamplerOptions::default())?;
    write_or_print(a.out.as_deref(), &triplets_to_csv(&triplets))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Index(a) => index_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Query(a) => query_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::ExportTriplets(a) => export_cmd(a),
    }
}
