//! Independent reference implementations shared by the integration tests.
//! None of these touch the tape or the crate's tensor kernels.
#![allow(dead_code)]

use std::collections::HashMap;

use contextual_flux::flux::FluxConfig;
use contextual_flux::model::{init_params, ModelConfig, ModelParams};
use contextual_flux::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dm(t: &Tensor) -> DMatrix<f64> {
    match t.shape() {
        [r, c] => DMatrix::from_row_slice(*r, *c, t.data()),
        [n] => DMatrix::from_row_slice(1, *n, t.data()),
        s => panic!("unsupported shape {s:?}"),
    }
}

fn layer_norm(x: &DMatrix<f64>, gain: &DMatrix<f64>, bias: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    let d = x.ncols() as f64;
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}

fn add_bias(x: DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = x;
    for mut row in x.row_iter_mut() {
        row += b;
    }
    x
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Plain pre-norm causal transformer with no flux path; returns logits.
pub fn plain_transformer(tokens: &[u8], p: &ModelParams, cfg: &ModelConfig) -> DMatrix<f64> {
    let t = tokens.len();
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let tok = dm(&p.tok_emb);
    let pos = dm(&p.pos_emb);
    let mut x = DMatrix::from_fn(t, d, |i, j| tok[(tokens[i] as usize, j)] + pos[(i, j)]);
    for l in &p.layers {
        let a = layer_norm(&x, &dm(&l.ln1_gain), &dm(&l.ln1_bias));
        let (q, k, v) = (&a * dm(&l.wq), &a * dm(&l.wk), &a * dm(&l.wv));
        let mut heads = DMatrix::<f64>::zeros(t, d);
        for h in 0..cfg.n_heads {
            let c0 = h * hd;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|c| q[(i, c0 + c)] * k[(j, c0 + c)]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = w.iter().sum();
                for c in 0..hd {
                    heads[(i, c0 + c)] = (0..=i).map(|j| w[j] / z * v[(j, c0 + c)]).sum();
                }
            }
        }
        x += heads * dm(&l.wo);
        let f = add_bias(layer_norm(&x, &dm(&l.ln2_gain), &dm(&l.ln2_bias)) * dm(&l.w1), &dm(&l.b1)).map(gelu);
        x += add_bias(f * dm(&l.w2), &dm(&l.b2));
    }
    layer_norm(&x, &dm(&p.lnf_gain), &dm(&p.lnf_bias)) * dm(&p.w_out)
}

/// Repeated n-gram count by explicit occurrence counting.
pub fn brute_force_ngrams(tokens: &[u8], n: usize) -> usize {
    let mut counts: HashMap<Vec<u8>, usize> = HashMap::new();
    for i in 0..=tokens.len() - n {
        *counts.entry(tokens[i..i + n].to_vec()).or_default() += 1;
    }
    counts.values().map(|c| c - 1).sum()
}

/// From-scratch flux output at every position: fresh prefix softmax and a
/// fresh memory-term sum for each `t`.
pub fn direct_flux(
    t0: &[Vec<f64>],
    e: &[Vec<f64>],
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    alpha: f64,
    beta: f64,
    score_factor: f64,
) -> Vec<Vec<f64>> {
    let d = t0[0].len();
    let scores: Vec<f64> = q
        .iter()
        .zip(k)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * score_factor)
        .collect();
    (0..t0.len())
        .map(|t| {
            let m = scores[..=t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores[..=t].iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            (0..d)
                .map(|c| {
                    let weighted: f64 = (0..=t).map(|j| w[j] / z * e[j][c]).sum();
                    let integral: f64 = (0..=t)
                        .map(|j| {
                            let prev = if j == 0 { 0.0 } else { k[j - 1][c] };
                            (k[j][c] - prev) * v[j][c]
                        })
                        .sum();
                    t0[t][c] + alpha * weighted + beta * (k[t][c] * v[t][c] - integral)
                })
                .collect()
        })
        .collect()
}

/// Random flux-off model (all parameters perturbed) and token sequence.
pub fn random_baseline(seed: u64) -> (ModelConfig, ModelParams, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let cfg = ModelConfig {
        vocab_size: rng.gen_range(8..=256),
        d_model: heads * rng.gen_range(2..=4),
        n_layers: rng.gen_range(1..=3),
        n_heads: heads,
        context_len: 12,
        flux: FluxConfig::off(),
        seed,
    };
    // move layer-norm gains and biases off their identity init
    let params = init_params(&cfg)
        .unwrap()
        .map(|t| t.add(&Tensor::new(t.shape().to_vec(), (0..t.numel()).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap()).unwrap());
    let len = rng.gen_range(1..=12);
    let tokens = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size) as u8).collect();
    (cfg, params, tokens)
}
