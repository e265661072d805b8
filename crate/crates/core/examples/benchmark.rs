//! Generates the default synthetic dataset (if missing), trains every regime
//! and prints the evaluation table.
//!
//! `cargo run --release -p derm-core --example benchmark -- [data-dir]`

use std::time::Instant;

use derm_core::bench::{null_model_rows, run_benchmark, untrained_rows, BenchConfig, Dataset};
use derm_core::data::synth::{generate_synthetic, SynthConfig, MANIFEST_FILE};

fn main() -> derm_core::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "target/synth-default".into());
    let start = Instant::now();
    if !std::path::Path::new(&dir).join(MANIFEST_FILE).is_file() {
        generate_synthetic(&SynthConfig::default(), &dir)?;
    }
    let data = Dataset::load(&dir)?;
    eprintln!("data ready in {:.1?}", start.elapsed());
    let cfg = BenchConfig::default();
    let out = run_benchmark(&cfg, &data)?;
    for (regime, curve) in &out.curves {
        let losses: Vec<String> = curve.iter().map(|e| format!("{:.3}/{:.3}", e.train_loss, e.val_loss)).collect();
        println!("{regime}: {}", losses.join(" "));
    }
    print!("{}", out.report.to_table());
    print!("{}", untrained_rows(&cfg, &data)?.to_table());
    print!("{}", null_model_rows(&data, cfg.model.embed_dim, &cfg.eval.ks, 1)?.to_table());
    eprintln!("total {:.1?}", start.elapsed());
    Ok(())
}
