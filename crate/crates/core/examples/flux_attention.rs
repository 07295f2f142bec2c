//! One attention layer in baseline mode and with the flux path, and how far
//! the gate lets the output move as its bias is raised.
//!
//! cargo run --example flux_attention

use contextual_flux::flux::FluxConfig;
use contextual_flux::model::{flux_attention_forward, init_params, ModelConfig};
use contextual_flux::{Result, Tensor};

fn main() -> Result<()> {
    let cfg = ModelConfig { d_model: 16, n_heads: 4, n_layers: 1, context_len: 8, ..ModelConfig::default() };
    let baseline = ModelConfig { flux: FluxConfig::off(), ..cfg.clone() };
    let params = init_params(&cfg)?;
    let x = Tensor::matrix(8, 16, (0..128).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect())?;

    let h = flux_attention_forward(&x, &params.layers[0], &baseline)?;
    println!("baseline output norm: {:.4}", h.data().iter().map(|v| v * v).sum::<f64>().sqrt());
    for bias in [-6.0, -2.0, 0.0, 2.0, 6.0] {
        let mut layer = params.layers[0].clone();
        layer.bg = Tensor::full(&[16], bias);
        let y = flux_attention_forward(&x, &layer, &cfg)?;
        println!("gate bias {bias:>4}: max |flux - baseline| = {:.4}", y.max_abs_diff(&h));
    }
    Ok(())
}
