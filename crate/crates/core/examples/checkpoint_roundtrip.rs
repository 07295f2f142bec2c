//! Round-trip a checkpoint through disk; bytes and logits must survive unchanged.
//!
//! cargo run --example checkpoint_roundtrip

use contextual_flux::model::{init_params, transformer_forward, ModelConfig};
use contextual_flux::training::{load_checkpoint, save_checkpoint, AdamMoments, Checkpoint, MAGIC};
use contextual_flux::Result;

fn main() -> Result<()> {
    let model = ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, context_len: 16, ..ModelConfig::default() };
    let params = init_params(&model)?;
    let ckpt = Checkpoint {
        moments: AdamMoments::zeros_like(&params.tensors()),
        model,
        train: None,
        params,
        step: 0,
        loss_history: vec![5.54],
    };
    let path = std::env::temp_dir().join("checkpoint_roundtrip.cflx");
    save_checkpoint(&ckpt, &path)?;
    let bytes = std::fs::read(&path)?;
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    println!("magic {:?}, {} bytes, metadata {meta_len} bytes", std::str::from_utf8(MAGIC).unwrap(), bytes.len());
    println!("metadata head: {}", String::from_utf8_lossy(&bytes[12..12 + meta_len.min(120)]));

    let back = load_checkpoint(&path)?;
    let a = transformer_forward(b"round trip", &ckpt.params, &ckpt.model)?;
    let b = transformer_forward(b"round trip", &back.params, &back.model)?;
    println!("identical checkpoint: {}", back == ckpt);
    println!("identical logits:     {}", a.logits == b.logits);
    println!("sha256 {}", back.hash()?);
    Ok(())
}
