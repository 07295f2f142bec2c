//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator so that coordinates with a true
/// gradient of zero do not produce 0/0.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), h)
}

/// Multi-input form of [`grad_check`]: every coordinate of every input is
/// perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new()?;
        let watched: Vec<Tensor> = xs.iter().map(|x| tape.watch(x)).collect();
        let y = f(&watched)?;
        let grads = tape.backward(&y)?;
        watched.iter().map(|w| grads.wrt(w)).collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let y = f(inputs)?;
        if !y.is_scalar() {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok(y.item())
    };

    let mut worst = 0.0f64;
    let mut inputs: Vec<Tensor> = xs.iter().map(Tensor::detach).collect();
    for (which, x) in xs.iter().enumerate() {
        for i in 0..x.numel() {
            let mut plus = x.to_vec();
            plus[i] += h;
            let mut minus = x.to_vec();
            minus[i] -= h;

            inputs[which] = Tensor::new(x.shape().to_vec(), plus)?;
            let fp = eval(&inputs)?;
            inputs[which] = Tensor::new(x.shape().to_vec(), minus)?;
            let fm = eval(&inputs)?;
            inputs[which] = x.detach();

            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[which].data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::rc::Rc;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let err = grad_check(|x| x.mul(x)?.sum(), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_a_wrong_rule() {
        let x = Tensor::vector(vec![0.5, 1.5]);
        // forward x^2 but claim derivative x
        let err = grad_check(
            |x| {
                x.custom_unary(|v| v * v, Rc::new(|g, x, _| g.iter().zip(x).map(|(g, x)| g * x).collect()))
                    .sum()
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_bad_step_and_nested_tape() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|x| x.sum(), &x, 0.0).is_err());
        let _tape = Tape::new().unwrap();
        assert!(grad_check(|x| x.sum(), &x, 1e-5).is_err());
    }

    #[test]
    fn floor_handles_dead_units() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(0.0, 1e-12) < 1e-3);
    }
}
