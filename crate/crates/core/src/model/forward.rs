use super::{LayerParams, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::flux::{flux_gate, flux_sequence};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Logits plus the residual stream after every block.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[t, vocab]`, or `[1, vocab]` for the last position only.
    pub logits: Tensor,
    /// One `[t, d]` tensor per layer, still attached to the tape if any.
    pub layers: Vec<Tensor>,
}

impl ForwardOutput {
    pub fn final_layer(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }

    /// Detached `[n_layers, t, d]` stack of the per-layer embeddings.
    pub fn trace(&self) -> Tensor {
        let first = &self.layers[0];
        let mut shape = vec![self.layers.len()];
        shape.extend_from_slice(first.shape());
        let data = self.layers.iter().flat_map(|l| l.data().iter().copied()).collect();
        Tensor::from_parts(shape, data)
    }
}

/// Causal multi-head self-attention with the flux path spliced in.
///
/// In baseline mode (gate disabled) this is plain attention `h`. Otherwise
/// each head also runs the flux update over its slice of the block input,
/// the head outputs are concatenated into `T`, and the gate mixes `h`
/// toward `T`.
pub fn flux_attention_forward(
    x: &Tensor,
    layer: &LayerParams,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let t = x.rows();
    if t > cfg.context_len {
        return Err(Error::ContextOverflow {
            len: t,
            context_len: cfg.context_len,
        });
    }
    if x.shape() != [t, cfg.d_model] {
        return Err(Error::dim("flux_attention_forward", x.shape(), &[t, cfg.d_model]));
    }
    let hd = cfg.head_dim();
    let q = x.matmul(&layer.wq)?;
    let k = x.matmul(&layer.wk)?;
    let v = x.matmul(&layer.wv)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let flux_on = cfg.flux.gate_enabled;

    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut flux_heads = Vec::new();
    for h in 0..cfg.n_heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = q.slice_cols(cols.start, cols.end)?;
        let kh = k.slice_cols(cols.start, cols.end)?;
        let vh = v.slice_cols(cols.start, cols.end)?;
        let att = qh.matmul(&kh.transpose()?)?.scale(scale).causal_softmax()?;
        heads.push(att.matmul(&vh)?);
        if flux_on {
            let xh = x.slice_cols(cols.start, cols.end)?;
            flux_heads.push(flux_sequence(&xh, &xh, &qh, &kh, &vh, &cfg.flux)?);
        }
    }
    let h = concat(heads)?.matmul(&layer.wo)?;
    if !flux_on {
        return Ok(h);
    }
    flux_gate(&h, &concat(flux_heads)?, &layer.wg, &layer.bg)
}

fn concat(parts: Vec<Tensor>) -> Result<Tensor> {
    if parts.len() == 1 {
        Ok(parts.into_iter().next().unwrap())
    } else {
        Tensor::concat_cols(&parts)
    }
}

fn block(x: &Tensor, layer: &LayerParams, cfg: &ModelConfig) -> Result<Tensor> {
    let a = x.layer_norm(&layer.ln1_gain, &layer.ln1_bias, LN_EPS)?;
    let x = x.add(&flux_attention_forward(&a, layer, cfg)?)?;
    let f = x
        .layer_norm(&layer.ln2_gain, &layer.ln2_bias, LN_EPS)?
        .matmul(&layer.w1)?
        .add_row(&layer.b1)?
        .gelu()
        .matmul(&layer.w2)?
        .add_row(&layer.b2)?;
    x.add(&f)
}

fn embed(tokens: &[u8], params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::contract("forward pass over an empty sequence"));
    }
    if t > cfg.context_len {
        return Err(Error::ContextOverflow {
            len: t,
            context_len: cfg.context_len,
        });
    }
    let ids: Vec<usize> = tokens.iter().map(|&b| b as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Index {
            what: "token",
            index: bad,
            bound: cfg.vocab_size,
        });
    }
    let positions: Vec<usize> = (0..t).collect();
    params
        .tok_emb
        .gather_rows(&ids)?
        .add(&params.pos_emb.gather_rows(&positions)?)
}

/// Pre-norm transformer stack over `tokens`.
pub fn transformer_forward(
    tokens: &[u8],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    run(tokens, params, cfg, false)
}

/// Like [`transformer_forward`] but only projects the last position to
/// logits. Used by generation.
pub(crate) fn forward_last(
    tokens: &[u8],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    run(tokens, params, cfg, true)
}

fn run(tokens: &[u8], params: &ModelParams, cfg: &ModelConfig, last_only: bool) -> Result<ForwardOutput> {
    let mut x = embed(tokens, params, cfg)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        x = block(&x, layer, cfg)?;
        layers.push(x.clone());
    }
    let head_in = if last_only {
        let t = x.rows();
        x.slice_rows(t - 1, t)?
    } else {
        x
    };
    let logits = head_in
        .layer_norm(&params.lnf_gain, &params.lnf_bias, LN_EPS)?
        .matmul(&params.w_out)?;
    Ok(ForwardOutput { logits, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::FluxConfig;
    use crate::model::init_params;

    fn cfg(flux: FluxConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            context_len: 8,
            flux,
            seed: 5,
        }
    }

    #[test]
    fn shapes_and_errors() {
        let c = cfg(FluxConfig::default());
        let p = init_params(&c).unwrap();
        let out = transformer_forward(&[1, 2, 3], &p, &c).unwrap();
        assert_eq!(out.logits.shape(), &[3, 32]);
        assert_eq!(out.trace().shape(), &[2, 3, 8]);
        assert!(matches!(
            transformer_forward(&[40], &p, &c),
            Err(Error::Index { index: 40, .. })
        ));
        assert!(matches!(
            transformer_forward(&[0; 9], &p, &c),
            Err(Error::ContextOverflow { len: 9, .. })
        ));
        let x = Tensor::zeros(&[9, 8]);
        assert!(matches!(
            flux_attention_forward(&x, &p.layers[0], &c),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn last_only_matches_full() {
        let c = cfg(FluxConfig::default());
        let p = init_params(&c).unwrap();
        let toks = [3, 1, 4, 1, 5];
        let full = transformer_forward(&toks, &p, &c).unwrap();
        let last = forward_last(&toks, &p, &c).unwrap();
        assert_eq!(last.logits.data(), full.logits.row(4));
    }

    #[test]
    fn causal_in_both_modes() {
        for flux in [FluxConfig::off(), FluxConfig::default()] {
            let c = cfg(flux);
            let p = init_params(&c).unwrap();
            let a = transformer_forward(&[1, 2, 3, 4, 5, 6], &p, &c).unwrap();
            let b = transformer_forward(&[1, 2, 3, 9, 9, 9], &p, &c).unwrap();
            for i in 0..3 {
                assert_eq!(a.logits.row(i), b.logits.row(i));
            }
            assert_ne!(a.logits.row(3), b.logits.row(3));
        }
    }

    #[test]
    fn flux_changes_output_once_gate_is_on() {
        let off = cfg(FluxConfig::off());
        let on = cfg(FluxConfig::default());
        let p = init_params(&off).unwrap();
        let a = transformer_forward(&[1, 2, 3], &p, &off).unwrap();
        let b = transformer_forward(&[1, 2, 3], &p, &on).unwrap();
        assert!(a.logits.max_abs_diff(&b.logits) > 1e-6);
    }
}
