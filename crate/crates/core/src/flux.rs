//! Contextual flux: attention-derived, cumulative modulation of token
//! embeddings.
//!
//! For a sequence with per-position queries `q`, keys `k`, values `v` and
//! embeddings `e`, the modulated embedding at position `t` is
//!
//! ```text
//! T_t = T0_t + alpha * sum_{j<=t} lambda_j e_j + beta * m_t
//! lambda   = softmax over the prefix of (q_j . k_j) [optionally / sqrt(d)]
//! m_t      = k_t * v_t - sum_{j<=t} (k_j - k_{j-1}) * v_j,   k_0 = 0
//! ```
//!
//! `m_t` is the unit-step discretization of `K(t)V(t) - int_0^t K'(s)V(s) ds`
//! with the kernel product realized elementwise. Two evaluation routes exist:
//! the incremental [`flux_step`] that carries a [`FluxState`] across
//! positions, and the batched [`flux_sequence`] used inside the model. They
//! are tested against each other and against a from-scratch summation.
//!
//! [`embedding_entropy`] is the Shannon entropy of the distribution of row
//! norms; [`entropy_penalty`] scales it by `mu` for use as a soft loss term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    None,
    InvSqrtD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxConfig {
    /// Weight on the softmax-weighted embedding sum.
    pub alpha: f64,
    /// Weight on the key/value memory term.
    pub beta: f64,
    /// Entropy penalty coefficient.
    pub mu: f64,
    pub score_scale: ScoreScale,
    pub gate_enabled: bool,
}

impl Default for FluxConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            mu: 0.01,
            score_scale: ScoreScale::InvSqrtD,
            gate_enabled: true,
        }
    }
}

impl FluxConfig {
    /// Baseline mode: plain attention with the entropy penalty disabled.
    pub fn off() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            mu: 0.0,
            score_scale: ScoreScale::InvSqrtD,
            gate_enabled: false,
        }
    }

    pub fn is_off(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && !self.gate_enabled
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("mu", self.mu)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "flux.{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Running accumulators of the incremental flux recurrence for one sequence.
#[derive(Clone, Debug)]
pub struct FluxState {
    /// `sum_j lambda_j e_j` under the current prefix softmax.
    pub cum_weighted_emb: Tensor,
    pub prev_key: Tensor,
    /// `sum_j (k_j - k_{j-1}) * v_j`.
    pub cum_derivative_term: Tensor,
    pub position: usize,
}

impl FluxState {
    pub fn new(d: usize) -> Self {
        Self {
            cum_weighted_emb: Tensor::zeros(&[d]),
            prev_key: Tensor::zeros(&[d]),
            cum_derivative_term: Tensor::zeros(&[d]),
            position: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.prev_key.numel()
    }
}

fn check_vec(op: &'static str, v: &Tensor, d: usize) -> Result<()> {
    if v.ndim() != 1 || v.numel() != d {
        return Err(Error::dim(op, v.shape(), &[d]));
    }
    Ok(())
}

fn score_factor(scale: ScoreScale, d: usize) -> f64 {
    match scale {
        ScoreScale::None => 1.0,
        ScoreScale::InvSqrtD => 1.0 / (d as f64).sqrt(),
    }
}

/// Per-position self-affinity scores `q_i . k_i`, scaled: shape `[t]`.
pub fn contextual_scores(q: &Tensor, k: &Tensor, scale: ScoreScale) -> Result<Tensor> {
    if q.shape() != k.shape() || q.ndim() != 2 {
        return Err(Error::dim("contextual_weights", q.shape(), k.shape()));
    }
    let s = q.mul(k)?.sum_last_axis()?;
    Ok(match scale {
        ScoreScale::None => s,
        ScoreScale::InvSqrtD => s.scale(score_factor(scale, q.cols())),
    })
}

/// Contextual influence weights: softmax over positions of the scores.
pub fn contextual_weights(q: &Tensor, k: &Tensor, scale: ScoreScale) -> Result<Tensor> {
    contextual_scores(q, k, scale)?.softmax(0)
}

/// Advances the memory recurrence by one position and returns
/// `m_t = k_t * v_t - sum_{j<=t} (k_j - k_{j-1}) * v_j`.
pub fn memory_term(state: &FluxState, k_t: &Tensor, v_t: &Tensor) -> Result<(Tensor, FluxState)> {
    let d = state.dim();
    check_vec("memory_term", k_t, d)?;
    check_vec("memory_term", v_t, d)?;
    let increment = k_t.sub(&state.prev_key)?.mul(v_t)?;
    let cum = state.cum_derivative_term.add(&increment)?;
    let m = k_t.mul(v_t)?.sub(&cum)?;
    let next = FluxState {
        cum_weighted_emb: state.cum_weighted_emb.clone(),
        prev_key: k_t.clone(),
        cum_derivative_term: cum,
        position: state.position + 1,
    };
    Ok((m, next))
}

/// One incremental flux update at position `t = state.position + 1`.
///
/// `e` holds the first `t` embedding rows and `lambda` the prefix softmax
/// over those `t` positions. Recomputing the softmax on a longer prefix
/// rescales every earlier weight by `1 - lambda_t`, so the weighted sum is
/// carried forward as `(1 - lambda_t) * acc + lambda_t * e_t`.
pub fn flux_step(
    t0: &Tensor,
    e: &Tensor,
    lambda: &Tensor,
    state: &FluxState,
    k_t: &Tensor,
    v_t: &Tensor,
    cfg: &FluxConfig,
) -> Result<(Tensor, FluxState)> {
    let d = state.dim();
    let t = state.position + 1;
    check_vec("flux_step", t0, d)?;
    if e.shape() != [t, d] {
        return Err(Error::contract(format!(
            "flux_step at position {t} needs {t}x{d} embeddings, got {:?}",
            e.shape()
        )));
    }
    if lambda.numel() != t {
        return Err(Error::contract(format!(
            "flux_step at position {t} needs {t} weights, got {}",
            lambda.numel()
        )));
    }

    let lam_t = lambda.reshape(&[1, t])?.slice_cols(t - 1, t)?;
    let e_t = e.slice_rows(t - 1, t)?.reshape(&[d])?;
    let carried = state
        .cum_weighted_emb
        .mul(&Tensor::scalar(1.0).sub(&lam_t)?)?;
    let weighted = carried.add(&e_t.mul(&lam_t)?)?;

    let (m, mut next) = memory_term(state, k_t, v_t)?;
    next.cum_weighted_emb = weighted.clone();

    let mut out = t0.clone();
    if cfg.alpha != 0.0 {
        out = out.add(&weighted.scale(cfg.alpha))?;
    }
    if cfg.beta != 0.0 {
        out = out.add(&m.scale(cfg.beta))?;
    }
    Ok((out, next))
}

/// Lower-triangular ones (inclusive) and the sub-diagonal shift, `[t, t]`.
fn prefix_matrices(t: usize) -> (Tensor, Tensor) {
    let mut lower = vec![0.0; t * t];
    let mut shift = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..=i {
            lower[i * t + j] = 1.0;
        }
        if i > 0 {
            shift[i * t + i - 1] = 1.0;
        }
    }
    (
        Tensor::from_parts(vec![t, t], lower),
        Tensor::from_parts(vec![t, t], shift),
    )
}

/// All positions of the flux update at once, `[t, d]` in and out.
///
/// Row `i` of the result equals the `i`-th [`flux_step`] output. Prefix
/// softmax weights are a causal softmax over a matrix whose rows all repeat
/// the score vector; prefix sums are products with a triangular matrix.
pub fn flux_sequence(
    t0: &Tensor,
    e: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &FluxConfig,
) -> Result<Tensor> {
    let shape = t0.shape();
    for other in [e, q, k, v] {
        if other.shape() != shape {
            return Err(Error::dim("flux_sequence", shape, other.shape()));
        }
    }
    let t = t0.rows();
    let mut out = t0.clone();
    if cfg.alpha != 0.0 {
        let s = contextual_scores(q, k, cfg.score_scale)?.reshape(&[1, t])?;
        let rows_of_scores = Tensor::ones(&[t, 1]).matmul(&s)?;
        let weights = rows_of_scores.causal_softmax()?;
        out = out.add(&weights.matmul(e)?.scale(cfg.alpha))?;
    }
    if cfg.beta != 0.0 {
        let (lower, shift) = prefix_matrices(t);
        let dk = k.sub(&shift.matmul(k)?)?;
        let cum = lower.matmul(&dk.mul(v)?)?;
        let m = k.mul(v)?.sub(&cum)?;
        out = out.add(&m.scale(cfg.beta))?;
    }
    Ok(out)
}

/// Shannon entropy (nats) of `p_i = |T_i| / sum_j |T_j|` over rows.
pub fn embedding_entropy(t: &Tensor) -> Result<Tensor> {
    let norms = t.row_norms()?;
    let total = norms.sum()?;
    if total.item() == 0.0 {
        return Err(Error::Degenerate(
            "embedding entropy of an all-zero matrix".into(),
        ));
    }
    let p = norms.div(&total)?;
    Ok(p.xlogx()?.sum()?.neg())
}

pub fn entropy_penalty(t: &Tensor, mu: f64) -> Result<Tensor> {
    if !(mu >= 0.0) {
        return Err(Error::Config(format!("entropy coefficient must be >= 0, got {mu}")));
    }
    if mu == 0.0 {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(embedding_entropy(t)?.scale(mu))
}

/// Mixes the attention output `h` toward the flux embeddings `t` with a
/// learned logistic gate: `h + sigma(h Wg + bg) * (t - h)`.
pub fn flux_gate(h: &Tensor, t: &Tensor, wg: &Tensor, bg: &Tensor) -> Result<Tensor> {
    if h.shape() != t.shape() {
        return Err(Error::dim("flux_gate", h.shape(), t.shape()));
    }
    let d = h.cols();
    if wg.shape() != [d, d] || bg.numel() != d {
        return Err(Error::dim("flux_gate", wg.shape(), &[d, d]));
    }
    let gate = h.matmul(wg)?.add_row(bg)?.logistic();
    h.add(&gate.mul(&t.sub(h)?)?)
}
