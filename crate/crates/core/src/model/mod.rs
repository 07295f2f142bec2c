//! Byte-level decoder-only transformer with optional flux-routed attention.

mod forward;
mod generate;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::FluxConfig;
use crate::tensor::Tensor;

pub use forward::{flux_attention_forward, transformer_forward, ForwardOutput, LN_EPS};
pub use generate::{generate, Generation};

/// Gate bias at initialization; the gate starts mostly closed.
pub const GATE_BIAS_INIT: f64 = -2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub flux: FluxConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 128,
            flux: FluxConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(2..=256).contains(&self.vocab_size) {
            return fail(format!(
                "vocab_size must be in 2..=256 for a byte vocabulary, got {}",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.context_len < 2 {
            return fail(format!("context_len must be >= 2, got {}", self.context_len));
        }
        self.flux.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub wg: Tensor,
    pub bg: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerParams {
    const NAMES: [&'static str; 14] = [
        "ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "wg", "bg", "ln2_gain", "ln2_bias",
        "w1", "b1", "w2", "b2",
    ];

    fn tensors(&self) -> [&Tensor; 14] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.wg,
            &self.bg,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = Tensor>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            wq: it.next()?,
            wk: it.next()?,
            wv: it.next()?,
            wo: it.next()?,
            wg: it.next()?,
            bg: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }
}

/// All learnable weights. Matrices are stored `[fan_in, fan_out]` and applied
/// as `x · W` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub w_out: Tensor,
}

impl ModelParams {
    /// Tensors in declaration order, the order used by checkpoints and the
    /// optimizer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.w_out]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for (i, _) in self.layers.iter().enumerate() {
            out.extend(LayerParams::NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        out.extend(["lnf_gain", "lnf_bias", "w_out"].map(String::from));
        out
    }

    /// Rebuilds from tensors in declaration order; shapes are checked against
    /// `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = Self::shapes(cfg);
        if tensors.len() != expected.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (t, shape) in tensors.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("ModelParams::from_tensors", t.shape(), shape));
            }
        }
        let mut it = tensors.into_iter();
        let tok_emb = it.next().unwrap();
        let pos_emb = it.next().unwrap();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams::from_iter(&mut it).unwrap())
            .collect();
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: it.next().unwrap(),
            lnf_bias: it.next().unwrap(),
            w_out: it.next().unwrap(),
        })
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> Self {
        let mut it = self.tensors().into_iter().map(&mut f).collect::<Vec<_>>().into_iter();
        let tok_emb = it.next().unwrap();
        let pos_emb = it.next().unwrap();
        let layers = self
            .layers
            .iter()
            .map(|_| LayerParams::from_iter(&mut it).unwrap())
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: it.next().unwrap(),
            lnf_bias: it.next().unwrap(),
            w_out: it.next().unwrap(),
        }
    }

    pub fn shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ffn_dim());
        let mut out = vec![vec![v, d], vec![cfg.context_len, d]];
        for _ in 0..cfg.n_layers {
            out.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ]);
        }
        out.extend([vec![d], vec![d], vec![d, v]]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Deterministic initialization from `cfg.seed`.
///
/// Matrices draw from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` in declaration
/// order. Layer-norm gains start at 1 and biases at 0, except the gate bias at
/// [`GATE_BIAS_INIT`].
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut uniform = |shape: [usize; 2]| {
        let bound = 1.0 / (shape[0] as f64).sqrt();
        let data = (0..shape[0] * shape[1])
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    };
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ffn_dim());
    let tok_emb = uniform([v, d]);
    let pos_emb = uniform([cfg.context_len, d]);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            wq: uniform([d, d]),
            wk: uniform([d, d]),
            wv: uniform([d, d]),
            wo: uniform([d, d]),
            wg: uniform([d, d]),
            bg: Tensor::full(&[d], GATE_BIAS_INIT),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w1: uniform([d, f]),
            b1: Tensor::zeros(&[f]),
            w2: uniform([f, d]),
            b2: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(ModelParams {
        tok_emb,
        pos_emb,
        layers,
        lnf_gain: Tensor::ones(&[d]),
        lnf_bias: Tensor::zeros(&[d]),
        w_out: uniform([d, v]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            context_len: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small();
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let other = ModelConfig { seed: 1, ..small() };
        assert_ne!(init_params(&cfg).unwrap(), init_params(&other).unwrap());
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = small();
        assert_eq!(cfg.head_dim(), 4);
        let p = init_params(&cfg).unwrap();
        let shapes: Vec<Vec<usize>> = p.tensors().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, ModelParams::shapes(&cfg));
        assert_eq!(p.names().len(), shapes.len());
        assert_eq!(p.layers[0].bg.data(), &[GATE_BIAS_INIT; 8]);
        let rebuilt =
            ModelParams::from_tensors(&cfg, p.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(rebuilt, p);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            ModelConfig { n_heads: 3, ..small() },
            ModelConfig { context_len: 1, ..small() },
            ModelConfig { vocab_size: 1, ..small() },
            ModelConfig { vocab_size: 300, ..small() },
            ModelConfig { n_layers: 0, ..small() },
            ModelConfig {
                flux: FluxConfig { alpha: -1.0, ..FluxConfig::default() },
                ..small()
            },
        ] {
            assert!(matches!(init_params(&bad), Err(Error::Config(_))), "{bad:?}");
        }
    }
}
