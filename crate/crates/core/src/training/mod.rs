//! Byte-level language-model training with the entropy-penalized objective.

mod adam;
mod checkpoint;
mod data;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::{embedding_entropy, entropy_penalty};
use crate::model::{init_params, transformer_forward, ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor};

pub use adam::{adam_step, clip_by_global_norm, global_norm, AdamMoments, StepStats};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use data::{load_corpus, sample_batch, Batch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub corpus_path: PathBuf,
    pub batch_size: usize,
    pub context_len: usize,
    /// Optimizer step size.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay.
    pub weight_decay: f64,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            corpus_path: PathBuf::from("crates/core/data/alice29.txt"),
            batch_size: 16,
            context_len: 128,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_steps: 200,
            eval_interval: 10,
            grad_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("train.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return fail(format!("train.eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.grad_clip_norm > 0.0) {
            return fail(format!("train.grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return fail("train.batch_size and train.eval_interval must be positive".into());
        }
        if self.context_len < 1 || self.context_len > model.context_len {
            return fail(format!(
                "train.context_len ({}) must be in 1..={} (model.context_len)",
                self.context_len, model.context_len
            ));
        }
        Ok(())
    }
}

/// Batch objective and its parts, averaged over sequences.
#[derive(Clone, Debug)]
pub struct Loss {
    /// Cross-entropy plus `mu * H`; attached to the tape when params are.
    pub total: Tensor,
    pub cross_entropy: f64,
    /// Norm entropy of the final-layer embeddings.
    pub entropy: f64,
}

/// `mean_b [ CE(logits_b, targets_b) + mu * H(final layer_b) ]`.
pub fn loss_fn(params: &ModelParams, batch: &Batch, cfg: &ModelConfig) -> Result<Loss> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mu = cfg.flux.mu;
    let mut total: Option<Tensor> = None;
    let (mut ce_sum, mut h_sum) = (0.0, 0.0);
    for (inputs, targets) in batch.inputs.iter().zip(&batch.targets) {
        let out = transformer_forward(inputs, params, cfg)?;
        let targets: Vec<usize> = targets.iter().map(|&b| b as usize).collect();
        let ce = out.logits.cross_entropy(&targets)?;
        ce_sum += ce.item();
        let term = if mu > 0.0 {
            let h = embedding_entropy(out.final_layer())?;
            h_sum += h.item();
            ce.add(&h.scale(mu))?
        } else {
            h_sum += embedding_entropy(&out.final_layer().detach())?.item();
            ce
        };
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let n = batch.len() as f64;
    Ok(Loss {
        total: total.expect("nonempty batch").scale(1.0 / n),
        cross_entropy: ce_sum / n,
        entropy: h_sum / n,
    })
}

/// Same objective built from [`entropy_penalty`], for callers that want the
/// penalty term on its own.
pub fn penalty_for(params: &ModelParams, tokens: &[u8], cfg: &ModelConfig) -> Result<Tensor> {
    let out = transformer_forward(tokens, params, cfg)?;
    entropy_penalty(out.final_layer(), cfg.flux.mu)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub entropy_h: f64,
    pub grad_norm: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,entropy_H,grad_norm\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.step, r.loss, r.entropy_h, r.grad_norm).unwrap();
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Runs `train_cfg.max_steps` optimizer steps from a fresh initialization.
pub fn train(train_cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainRun> {
    let corpus = load_corpus(&train_cfg.corpus_path)?;
    train_on(&corpus, train_cfg, model_cfg)
}

/// [`train`] over an in-memory corpus.
pub fn train_on(corpus: &[u8], train_cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainRun> {
    model_cfg.validate()?;
    train_cfg.validate(model_cfg)?;
    let mut params = init_params(model_cfg)?;
    let mut moments = AdamMoments::zeros_like(&params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut history = Vec::with_capacity(train_cfg.max_steps);
    let mut log = Vec::new();

    let snapshot = |params: &ModelParams, moments: &AdamMoments, step: usize, history: &[f64]| Checkpoint {
        model: model_cfg.clone(),
        train: Some(train_cfg.clone()),
        params: params.clone(),
        moments: moments.clone(),
        step: step as u64,
        loss_history: history.to_vec(),
    };

    for step in 1..=train_cfg.max_steps {
        let batch = sample_batch(&corpus, train_cfg.batch_size, train_cfg.context_len, &mut rng)?;
        let (loss, grads) = {
            let tape = Tape::new()?;
            let watched = params.map(|t| tape.watch(t));
            let loss = loss_fn(&watched, &batch, model_cfg)?;
            if !loss.total.item().is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss is {}", loss.total.item()),
                    last_good: Some(Box::new(snapshot(&params, &moments, step - 1, &history))),
                });
            }
            let g = tape.backward(&loss.total)?;
            let grads: Vec<Tensor> = watched.tensors().into_iter().map(|w| g.wrt(w)).collect();
            (loss, grads)
        };

        // moments are committed only once the step is known good
        let mut next_moments = moments.clone();
        let stats = match adam_step(&params.tensors(), &grads, &mut next_moments, step as u64, train_cfg) {
            Ok((updated, stats)) => {
                let next = ModelParams::from_tensors(model_cfg, updated)?;
                if !next.all_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: "parameters became non-finite".into(),
                        last_good: Some(Box::new(snapshot(&params, &moments, step - 1, &history))),
                    });
                }
                params = next;
                moments = next_moments;
                stats
            }
            Err(Error::Divergence { detail, .. }) => {
                return Err(Error::Divergence {
                    step,
                    detail,
                    last_good: Some(Box::new(snapshot(&params, &moments, step - 1, &history))),
                })
            }
            Err(e) => return Err(e),
        };

        let loss_value = loss.total.item();
        history.push(loss_value);
        if step % train_cfg.eval_interval == 0 || step == 1 || step == train_cfg.max_steps {
            log.push(LogRow {
                step,
                loss: loss_value,
                entropy_h: loss.entropy,
                grad_norm: stats.grad_norm,
            });
        }
    }

    Ok(TrainRun {
        checkpoint: snapshot(&params, &moments, train_cfg.max_steps, &history),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::FluxConfig;

    fn tiny_model(flux: FluxConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: 256,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            context_len: 8,
            flux,
            seed: 1,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            context_len: 8,
            max_steps: 5,
            eval_interval: 2,
            ..TrainConfig::default()
        }
    }

    const TEXT: &[u8] = b"It was the best of times, it was the worst of times, it was the age of wisdom.";

    #[test]
    fn zero_steps_returns_initial_params() {
        let m = tiny_model(FluxConfig::default());
        let t = TrainConfig { max_steps: 0, ..tiny_train() };
        let run = train_on(TEXT, &t, &m).unwrap();
        assert_eq!(run.checkpoint.params, init_params(&m).unwrap());
        assert!(run.log.is_empty());
    }

    #[test]
    fn training_is_reproducible() {
        let m = tiny_model(FluxConfig::default());
        let a = train_on(TEXT, &tiny_train(), &m).unwrap();
        let b = train_on(TEXT, &tiny_train(), &m).unwrap();
        assert_eq!(a.checkpoint.hash().unwrap(), b.checkpoint.hash().unwrap());
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.checkpoint.loss_history.len(), 5);
        assert_eq!(a.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 4, 5]);
    }

    #[test]
    fn mu_adds_exactly_mu_times_entropy() {
        let base = tiny_model(FluxConfig { mu: 0.0, ..FluxConfig::default() });
        let pen = tiny_model(FluxConfig { mu: 0.5, ..FluxConfig::default() });
        let p = init_params(&base).unwrap();
        let batch = sample_batch(TEXT, 3, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let a = loss_fn(&p, &batch, &base).unwrap();
        let b = loss_fn(&p, &batch, &pen).unwrap();
        assert_eq!(a.total.item(), a.cross_entropy);
        assert!((b.total.item() - a.total.item() - 0.5 * a.entropy).abs() < 1e-10);
    }

    #[test]
    fn config_validation() {
        let m = tiny_model(FluxConfig::default());
        for bad in [
            TrainConfig { beta1: 1.0, ..tiny_train() },
            TrainConfig { learning_rate: -1.0, ..tiny_train() },
            TrainConfig { context_len: 9, ..tiny_train() },
            TrainConfig { grad_clip_norm: 0.0, ..tiny_train() },
        ] {
            assert!(matches!(bad.validate(&m), Err(Error::Config(_))));
        }
    }
}
