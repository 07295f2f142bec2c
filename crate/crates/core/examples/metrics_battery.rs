//! Each metric on hand-made inputs, then the full battery on generations from
//! an untrained model.
//!
//! cargo run --release --example metrics_battery

use contextual_flux::metrics::{
    coherence_score, count_repeated_ngrams, embedding_trajectory, evaluate, response_similarity,
    token_entropy_series, EvalConfig,
};
use contextual_flux::model::{init_params, ModelConfig};
use contextual_flux::training::{AdamMoments, Checkpoint};
use contextual_flux::{Result, Tensor};

fn main() -> Result<()> {
    let text = b"the cat sat on the mat and the cat sat still";
    for n in 2..=4 {
        println!("repeated {n}-grams: {}", count_repeated_ngrams(text, n)?);
    }
    let responses = [b"the cat sat".to_vec(), b"the cat ran".to_vec(), b"a dog ran".to_vec()];
    println!("bigram similarity: {:.4}", response_similarity(&responses)?);
    println!("entropy variance of [0, ln 2]: {:.4}", token_entropy_series(&[0.0, 2f64.ln()])?.1);

    let spiral: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let a = i as f64 * 0.3;
            vec![a.cos(), a.sin(), 0.05 * i as f64, 1.0]
        })
        .collect();
    let trace = Tensor::from_rows(&spiral)?;
    let (xy, divergence) = embedding_trajectory(&trace)?;
    println!("spiral: divergence {divergence:.4}, first point {:?}", xy.row(0));
    println!("spiral coherence (16/8 windows): {:.4}", coherence_score(&trace, 16, 8)?);

    let model = ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, context_len: 32, ..ModelConfig::default() };
    let params = init_params(&model)?;
    let ckpt = Checkpoint {
        moments: AdamMoments::zeros_like(&params.tensors()),
        model,
        train: None,
        params,
        step: 0,
        loss_history: vec![],
    };
    let cfg = EvalConfig { n_new: 64, trials: 4, coherence_lengths: vec![32, 64], ..EvalConfig::default() };
    let report = evaluate(&ckpt, &[b"Once".to_vec(), b"Then".to_vec()], &cfg)?;
    println!("untrained model: {}", serde_json::to_string(&report.repeated_ngrams)?);
    println!(
        "  similarity {:.4}, coherence {:.4}, entropy variance {:.5}",
        report.response_similarity, report.coherence, report.entropy_variance
    );
    Ok(())
}
