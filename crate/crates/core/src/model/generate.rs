use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::forward_last;
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

/// Result of autoregressive sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Prompt followed by the sampled bytes.
    pub tokens: Vec<u8>,
    pub prompt_len: usize,
    /// Shannon entropy (nats) of the model's untempered next-byte
    /// distribution at each sampled step.
    pub entropies: Vec<f64>,
    /// Final-layer embedding of the newest position at each sampled step.
    pub embeddings: Vec<Vec<f64>>,
}

impl Generation {
    pub fn generated(&self) -> &[u8] {
        &self.tokens[self.prompt_len..]
    }
}

/// Samples `n_new` bytes after `prompt` with a ChaCha8 stream seeded by
/// `seed`. The context slides to the last `context_len` bytes.
pub fn generate(
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &[u8],
    n_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::contract("generation needs a nonempty prompt"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::contract(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = prompt.to_vec();
    let mut entropies = Vec::with_capacity(n_new);
    let mut embeddings = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let start = tokens.len().saturating_sub(cfg.context_len);
        let out = forward_last(&tokens[start..], params, cfg)?;
        let logits = out.logits.data();
        let last = out.final_layer();
        embeddings.push(last.row(last.rows() - 1).to_vec());
        entropies.push(entropy(&softmax(logits, 1.0)));
        let probs = softmax(logits, temperature);
        let u: f64 = rng.gen();
        tokens.push(pick(&probs, u) as u8);
    }
    Ok(Generation {
        tokens,
        prompt_len: prompt.len(),
        entropies,
        embeddings,
    })
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Inverse-CDF draw; falls back to the most probable index if rounding
/// leaves `u` above the final cumulative sum.
fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    argmax(probs)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::FluxConfig;
    use crate::model::{init_params, transformer_forward};

    fn setup() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            vocab_size: 64,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            context_len: 6,
            flux: FluxConfig::default(),
            seed: 9,
        };
        let p = init_params(&cfg).unwrap();
        (cfg, p)
    }

    #[test]
    fn deterministic_and_bounded() {
        let (cfg, p) = setup();
        let a = generate(&p, &cfg, &[1, 2], 20, 1.0, 42).unwrap();
        let b = generate(&p, &cfg, &[1, 2], 20, 1.0, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.generated().len(), 20);
        assert_eq!(a.entropies.len(), 20);
        let cap = (cfg.vocab_size as f64).ln() + 1e-12;
        assert!(a.entropies.iter().all(|&h| (0.0..=cap).contains(&h)));
        assert!(a.generated().iter().all(|&t| (t as usize) < cfg.vocab_size));
    }

    #[test]
    fn cold_sampling_is_greedy() {
        let (cfg, p) = setup();
        let g = generate(&p, &cfg, b"!", 12, 1e-4, 7).unwrap();
        // independent greedy decode through the full forward pass
        let mut toks = b"!".to_vec();
        for _ in 0..12 {
            let start = toks.len().saturating_sub(cfg.context_len);
            let out = transformer_forward(&toks[start..], &p, &cfg).unwrap();
            let last = out.logits.row(out.logits.rows() - 1);
            toks.push(argmax(last) as u8);
        }
        assert_eq!(g.tokens, toks);
    }

    #[test]
    fn rejects_bad_arguments() {
        let (cfg, p) = setup();
        assert!(generate(&p, &cfg, b"", 3, 1.0, 0).is_err());
        assert!(generate(&p, &cfg, b"a", 3, 0.0, 0).is_err());
        assert!(generate(&p, &cfg, b"a", 3, f64::NAN, 0).is_err());
    }
}
