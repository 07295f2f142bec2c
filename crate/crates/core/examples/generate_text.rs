//! Sample from a checkpoint at several temperatures and report the mean
//! predictive entropy. Trains a throwaway model when no path is given.
//!
//! cargo run --release --example generate_text -- [model.cflx]

use contextual_flux::model::{generate, ModelConfig};
use contextual_flux::training::{load_checkpoint, train, TrainConfig};
use contextual_flux::Result;

fn main() -> Result<()> {
    let ckpt = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path)?,
        None => {
            let model = ModelConfig { d_model: 32, n_heads: 4, context_len: 64, ..ModelConfig::default() };
            let cfg = TrainConfig {
                corpus_path: concat!(env!("CARGO_MANIFEST_DIR"), "/data/alice29.txt").into(),
                batch_size: 8,
                context_len: 64,
                max_steps: 80,
                ..TrainConfig::default()
            };
            train(&cfg, &model)?.checkpoint
        }
    };
    for temperature in [0.0001, 0.7, 1.0, 1.5] {
        let g = generate(&ckpt.params, &ckpt.model, b"Alice was ", 80, temperature, 1)?;
        let mean_h = g.entropies.iter().sum::<f64>() / g.entropies.len() as f64;
        println!("T={temperature:<6} H={mean_h:.3} | {}", String::from_utf8_lossy(&g.tokens).replace('\n', " "));
    }
    Ok(())
}
