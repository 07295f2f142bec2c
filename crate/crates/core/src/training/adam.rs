use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::TrainConfig;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamMoments {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: z.clone(), v: z }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_by_global_norm(grads: &[Tensor], max_norm: f64) -> (Vec<Tensor>, f64) {
    let norm = global_norm(grads);
    if norm <= max_norm {
        return (grads.to_vec(), norm);
    }
    let s = max_norm / norm;
    (grads.iter().map(|g| g.scale(s)).collect(), norm)
}

/// One AdamW update at 1-based `step`: global-norm clipping, bias-corrected
/// moments, then decoupled weight decay.
pub fn adam_step(
    params: &[&Tensor],
    grads: &[Tensor],
    moments: &mut AdamMoments,
    step: u64,
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, StepStats)> {
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    if step == 0 {
        return Err(Error::contract("adam steps are 1-based"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Divergence {
                step: step as usize,
                detail: format!("non-finite gradient in parameter tensor {i}"),
                last_good: None,
            });
        }
    }

    let (grads, grad_norm) = clip_by_global_norm(grads, cfg.grad_clip_norm);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let lr = cfg.learning_rate;

    let mut updated = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
        let n = p.numel();
        let mut m = moments.m[i].to_vec();
        let mut v = moments.v[i].to_vec();
        let mut out = p.to_vec();
        for j in 0..n {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            out[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * out[j]);
        }
        moments.m[i] = Tensor::new(p.shape().to_vec(), m)?;
        moments.v[i] = Tensor::new(p.shape().to_vec(), v)?;
        updated.push(Tensor::new(p.shape().to_vec(), out)?);
    }
    Ok((
        updated,
        StepStats {
            grad_norm,
            clipped_norm: global_norm(&grads),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> TrainConfig {
        TrainConfig {
            weight_decay: 0.0,
            grad_clip_norm: 1e6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let p = Tensor::vector(vec![0.5, -1.0]);
        let mut mom = AdamMoments::zeros_like(&[&p]);
        let (out, _) = adam_step(&[&p], &[Tensor::zeros(&[2])], &mut mom, 1, &cfg()).unwrap();
        assert_eq!(out[0], p);
    }

    #[test]
    fn first_step_closed_form() {
        let c = cfg();
        let p = Tensor::scalar(2.0);
        let g = 0.3;
        let mut mom = AdamMoments::zeros_like(&[&p]);
        let (out, _) = adam_step(&[&p], &[Tensor::scalar(g)], &mut mom, 1, &c).unwrap();
        let expect = 2.0 - c.learning_rate * g / (g.abs() + c.eps);
        assert_abs_diff_eq!(out[0].item(), expect, epsilon = 1e-15);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let c = cfg();
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let g = Tensor::vector(vec![0.7, -0.2]);
        let mut mom = AdamMoments::zeros_like(&[&p]);
        for step in 1..=50 {
            let (out, _) = adam_step(&[&p], &[g.clone()], &mut mom, step, &c).unwrap();
            let delta = out[0].sub(&p).unwrap();
            assert!(delta.data()[0] < 0.0 && delta.data()[1] > 0.0);
            p = out.into_iter().next().unwrap();
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let grads = vec![Tensor::vector(vec![3.0, 4.0]), Tensor::vector(vec![12.0])];
        let (clipped, norm) = clip_by_global_norm(&grads, 1.0);
        assert_abs_diff_eq!(norm, 13.0, epsilon = 1e-12);
        assert!(global_norm(&clipped) <= 1.0 + 1e-9);
    }

    #[test]
    fn zero_learning_rate_freezes() {
        let c = TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        };
        let p = Tensor::vector(vec![0.25, 9.0]);
        let mut mom = AdamMoments::zeros_like(&[&p]);
        let (out, _) =
            adam_step(&[&p], &[Tensor::vector(vec![1.0, -5.0])], &mut mom, 1, &c).unwrap();
        assert_eq!(out[0], p);
    }

    #[test]
    fn nan_gradient_diverges() {
        let p = Tensor::scalar(1.0);
        let mut mom = AdamMoments::zeros_like(&[&p]);
        let err = adam_step(&[&p], &[Tensor::scalar(f64::NAN)], &mut mom, 1, &cfg()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }
}
