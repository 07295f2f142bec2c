//! Train a small flux model on the bundled corpus and save a checkpoint.
//!
//! cargo run --release --example train_tiny -- [steps] [out.cflx]

use contextual_flux::model::ModelConfig;
use contextual_flux::training::{log_csv, save_checkpoint, train, TrainConfig};
use contextual_flux::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(60);
    let out = args.next().unwrap_or_else(|| "tiny.cflx".into());

    let model = ModelConfig { d_model: 32, n_heads: 4, n_layers: 2, context_len: 64, ..ModelConfig::default() };
    let cfg = TrainConfig {
        corpus_path: concat!(env!("CARGO_MANIFEST_DIR"), "/data/alice29.txt").into(),
        batch_size: 8,
        context_len: 64,
        max_steps: steps,
        eval_interval: 10,
        ..TrainConfig::default()
    };
    let run = train(&cfg, &model)?;
    print!("{}", log_csv(&run.log));
    save_checkpoint(&run.checkpoint, &out)?;
    println!("saved {out} (sha256 {})", run.checkpoint.hash()?);
    Ok(())
}
