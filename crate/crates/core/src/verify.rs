//! The gradient-check suite: every differentiable op, the flux block and a
//! full two-layer model against central finite differences.

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flux::{
    embedding_entropy, entropy_penalty, flux_gate, flux_sequence, flux_step, FluxConfig, FluxState,
    ScoreScale,
};
use crate::gradcheck::{grad_check_many, DEFAULT_STEP};
use crate::model::{flux_attention_forward, init_params, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::training::{loss_fn, Batch};

/// Threshold for single operations.
pub const PRIMITIVE_THRESHOLD: f64 = 1e-5;
/// Threshold for composite blocks and the full model.
pub const COMPOSITE_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    /// Number of perturbed coordinates.
    pub coordinates: usize,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    /// One line per check, `PASS`/`FAIL` first.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s += &format!(
                "{} {:<24} max_rel_err={:.3e} threshold={:.0e} coords={} ({:.2?})\n",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_error,
                c.threshold,
                c.coordinates,
                c.elapsed
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    /// Adds a check whose gradient rule is deliberately wrong, so the suite
    /// must fail.
    pub inject_fault: bool,
}

type Check = (&'static str, f64, Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>);

struct Inputs(ChaCha8Rng);

impl Inputs {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("nonzero extents")
    }

    fn signed(&mut self, shape: &[usize]) -> Tensor {
        self.uniform(shape, -1.0, 1.0)
    }
}

/// `sum(y * w)` for a fixed pseudo-random `w`, so every output coordinate
/// contributes a distinct weight to the gradient.
fn probe(y: Tensor) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(y.numel() as u64);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 }).collect();
    y.mul(&Tensor::new(y.shape().to_vec(), w)?)?.sum()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        context_len: 5,
        flux: FluxConfig {
            mu: 0.1,
            ..FluxConfig::default()
        },
        seed: 11,
    }
}

fn checks(opts: SuiteOptions) -> Result<Vec<Check>> {
    let mut r = Inputs(ChaCha8Rng::seed_from_u64(2024));
    let p = PRIMITIVE_THRESHOLD;
    let c = COMPOSITE_THRESHOLD;
    let mut list: Vec<Check> = vec![
        ("matmul", p, vec![r.signed(&[3, 4]), r.signed(&[4, 2])], Box::new(|x| probe(x[0].matmul(&x[1])?))),
        (
            "add_sub_mul",
            p,
            vec![r.signed(&[2, 3]), r.signed(&[2, 3]), r.signed(&[1])],
            Box::new(|x| probe(x[0].add(&x[1])?.mul(&x[0].sub(&x[1])?)?.mul(&x[2])?)),
        ),
        (
            "div",
            p,
            vec![r.signed(&[2, 3]), r.uniform(&[2, 3], 0.5, 2.0), r.uniform(&[1], 0.5, 2.0)],
            Box::new(|x| probe(x[0].div(&x[1])?.div(&x[2])?)),
        ),
        ("scale_neg", p, vec![r.signed(&[4])], Box::new(|x| probe(x[0].scale(-2.5).neg()))),
        ("exp", p, vec![r.signed(&[5])], Box::new(|x| probe(x[0].exp()))),
        ("log", p, vec![r.uniform(&[5], 0.5, 2.0)], Box::new(|x| probe(x[0].log()?))),
        ("logistic", p, vec![r.uniform(&[5], -3.0, 3.0)], Box::new(|x| probe(x[0].logistic()))),
        ("tanh", p, vec![r.uniform(&[5], -2.0, 2.0)], Box::new(|x| probe(x[0].tanh()))),
        ("gelu", p, vec![r.uniform(&[6], -3.0, 3.0)], Box::new(|x| probe(x[0].gelu()))),
        ("recip", p, vec![r.uniform(&[4], 0.5, 2.0)], Box::new(|x| probe(x[0].recip()?))),
        ("xlogx", p, vec![r.uniform(&[4], 0.1, 1.0)], Box::new(|x| probe(x[0].xlogx()?))),
        ("softmax_rows", p, vec![r.signed(&[3, 4])], Box::new(|x| probe(x[0].softmax(1)?))),
        ("softmax_cols", p, vec![r.signed(&[3, 4])], Box::new(|x| probe(x[0].softmax(0)?))),
        ("causal_softmax", p, vec![r.signed(&[4, 4])], Box::new(|x| probe(x[0].causal_softmax()?))),
        (
            "layer_norm",
            p,
            vec![r.signed(&[3, 5]), r.uniform(&[5], 0.5, 1.5), r.signed(&[5])],
            Box::new(|x| probe(x[0].layer_norm(&x[1], &x[2], 1e-5)?)),
        ),
        (
            "cross_entropy",
            p,
            vec![r.uniform(&[4, 6], -2.0, 2.0)],
            Box::new(|x| x[0].cross_entropy(&[0, 5, 2, 2])),
        ),
        (
            "reductions",
            p,
            vec![r.signed(&[3, 4])],
            Box::new(|x| x[0].sum_last_axis()?.mul(&x[0].mean()?)?.sum()),
        ),
        (
            "transpose_reshape",
            p,
            vec![r.signed(&[2, 3])],
            Box::new(|x| probe(x[0].transpose()?.reshape(&[6])?.reshape(&[3, 2])?.matmul(&x[0])?)),
        ),
        (
            "slice_concat",
            p,
            vec![r.signed(&[4, 5])],
            Box::new(|x| {
                let a = x[0].slice_cols(1, 3)?.slice_rows(0, 3)?;
                let b = x[0].slice_cols(4, 5)?.slice_rows(1, 4)?;
                probe(Tensor::concat_cols(&[a.clone(), b, a])?)
            }),
        ),
        (
            "gather_rows",
            p,
            vec![r.signed(&[4, 3])],
            Box::new(|x| probe(x[0].gather_rows(&[3, 0, 3, 1])?)),
        ),
        ("add_row", p, vec![r.signed(&[3, 4]), r.signed(&[4])], Box::new(|x| probe(x[0].add_row(&x[1])?))),
        ("row_norms", p, vec![r.signed(&[4, 3])], Box::new(|x| probe(x[0].row_norms()?))),
        (
            "contextual_weights",
            p,
            vec![r.signed(&[5, 3]), r.signed(&[5, 3])],
            Box::new(|x| probe(crate::flux::contextual_weights(&x[0], &x[1], ScoreScale::InvSqrtD)?)),
        ),
        (
            "embedding_entropy",
            p,
            vec![r.signed(&[5, 3])],
            Box::new(|x| embedding_entropy(&x[0])),
        ),
        (
            "entropy_penalty",
            p,
            vec![r.signed(&[4, 6])],
            Box::new(|x| entropy_penalty(&x[0], 0.37)),
        ),
        (
            "flux_gate",
            p,
            vec![r.signed(&[3, 4]), r.signed(&[3, 4]), r.signed(&[4, 4]), r.signed(&[4])],
            Box::new(|x| probe(flux_gate(&x[0], &x[1], &x[2], &x[3])?)),
        ),
        (
            "flux_sequence",
            c,
            vec![r.signed(&[5, 4]), r.signed(&[5, 4]), r.signed(&[5, 4]), r.signed(&[5, 4]), r.signed(&[5, 4])],
            Box::new(|x| {
                let cfg = FluxConfig { alpha: 0.8, beta: 0.3, ..FluxConfig::default() };
                probe(flux_sequence(&x[0], &x[1], &x[2], &x[3], &x[4], &cfg)?)
            }),
        ),
        (
            "flux_step_chain",
            c,
            vec![r.signed(&[4, 3]), r.signed(&[4, 3]), r.signed(&[4, 3])],
            Box::new(|x| {
                let cfg = FluxConfig { alpha: 0.8, beta: 0.3, ..FluxConfig::default() };
                let (e, q, k) = (&x[0], &x[1], &x[2]);
                let mut state = FluxState::new(3);
                let mut outs = Vec::new();
                for t in 1..=4 {
                    let lambda = crate::flux::contextual_weights(
                        &q.slice_rows(0, t)?,
                        &k.slice_rows(0, t)?,
                        cfg.score_scale,
                    )?;
                    let row = |m: &Tensor| m.slice_rows(t - 1, t)?.reshape(&[3]);
                    let (out, next) =
                        flux_step(&row(e)?, &e.slice_rows(0, t)?, &lambda, &state, &row(k)?, &row(e)?, &cfg)?;
                    outs.push(out.reshape(&[1, 3])?);
                    state = next;
                }
                probe(Tensor::concat_cols(&outs)?)
            }),
        ),
    ];

    let attn_cfg = ModelConfig {
        d_model: 4,
        n_heads: 2,
        n_layers: 1,
        context_len: 4,
        vocab_size: 8,
        ..tiny_model()
    };
    let layer = init_params(&attn_cfg)?.layers.remove(0);
    let mut layer_inputs: Vec<Tensor> = vec![r.signed(&[4, 4])];
    layer_inputs.extend([&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.wg, &layer.bg].map(|t| t.clone()));
    list.push((
        "flux_attention",
        c,
        layer_inputs,
        Box::new(move |x| {
            let mut l = layer.clone();
            (l.wq, l.wk, l.wv, l.wo, l.wg, l.bg) =
                (x[1].clone(), x[2].clone(), x[3].clone(), x[4].clone(), x[5].clone(), x[6].clone());
            probe(flux_attention_forward(&x[0], &l, &attn_cfg)?)
        }),
    ));

    let model = tiny_model();
    let params = init_params(&model)?;
    let batch = Batch {
        inputs: vec![b"flux!".to_vec()],
        targets: vec![b"lux!?".to_vec()],
        offsets: vec![0],
    };
    let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    list.push((
        "full_model_2layer",
        c,
        inputs,
        Box::new(move |x| {
            let p = ModelParams::from_tensors(&model, x.to_vec())?;
            Ok(loss_fn(&p, &batch, &model)?.total)
        }),
    ));

    if opts.inject_fault {
        list.push((
            "corrupted_rule",
            p,
            vec![r.uniform(&[3], 0.5, 1.5)],
            Box::new(|x| {
                // forward is x^2, the declared derivative is x
                probe(x[0].custom_unary(|v| v * v, Rc::new(|g, x, _| g.iter().zip(x).map(|(g, x)| g * x).collect())))
            }),
        ));
    }
    Ok(list)
}

/// Runs every check. Fails only on infrastructure errors; threshold
/// failures are reported in the result.
pub fn run_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for (name, threshold, inputs, f) in checks(opts)? {
        let start = Instant::now();
        let err = grad_check_many(|x| f(x), &inputs, DEFAULT_STEP)?;
        report.checks.push(CheckResult {
            name: name.to_string(),
            max_rel_error: err,
            threshold,
            coordinates: inputs.iter().map(Tensor::numel).sum(),
            elapsed: start.elapsed(),
        });
    }
    Ok(report)
}
