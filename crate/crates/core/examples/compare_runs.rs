//! Train a baseline and a flux model from the same seed, then write the
//! side-by-side comparison directory.
//!
//! cargo run --release --example compare_runs -- [out_dir]

use contextual_flux::flux::FluxConfig;
use contextual_flux::metrics::{compare, write_comparison, EvalConfig};
use contextual_flux::model::ModelConfig;
use contextual_flux::training::{train, TrainConfig};
use contextual_flux::Result;

fn main() -> Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "compare_out".into());
    let flux_model = ModelConfig { d_model: 32, n_heads: 4, context_len: 64, ..ModelConfig::default() };
    let base_model = ModelConfig { flux: FluxConfig::off(), ..flux_model.clone() };
    let cfg = TrainConfig {
        corpus_path: concat!(env!("CARGO_MANIFEST_DIR"), "/data/alice29.txt").into(),
        batch_size: 8,
        context_len: 64,
        max_steps: 60,
        ..TrainConfig::default()
    };
    let base = train(&cfg, &base_model)?.checkpoint;
    let flux = train(&cfg, &flux_model)?.checkpoint;
    println!("final loss: baseline {:.4}, flux {:.4}", base.loss_history.last().unwrap(), flux.loss_history.last().unwrap());

    let eval = EvalConfig { n_new: 200, trials: 10, coherence_lengths: vec![100, 200], ..EvalConfig::default() };
    let cmp = compare(&base, &flux, &[b"Alice".to_vec(), b"The Queen".to_vec()], &eval)?;
    write_comparison(&cmp, out.as_ref())?;
    for (name, delta) in &cmp.deltas {
        println!("{name:<22} {delta:+.5}");
    }
    println!("wrote {out}/");
    Ok(())
}
