//! Pull gradients back through a small recorded computation and compare
//! them with central differences.
//!
//! cargo run --example autodiff

use contextual_flux::gradcheck::{grad_check, DEFAULT_STEP};
use contextual_flux::tensor::Tape;
use contextual_flux::{Result, Tensor};

fn main() -> Result<()> {
    let w = Tensor::matrix(2, 3, vec![0.2, -0.4, 0.1, 0.7, 0.3, -0.5])?;
    let x = Tensor::matrix(1, 2, vec![1.5, -2.0])?;

    // y = sum(tanh(x W))
    let tape = Tape::new()?;
    let w_t = tape.watch(&w);
    let x_t = tape.watch(&x);
    let y = x_t.matmul(&w_t)?.tanh().sum()?;
    let grads = tape.backward(&y)?;
    println!("y        = {:.6}", y.item());
    println!("dy/dW    = {:?}", grads.wrt(&w_t).data());
    println!("dy/dx    = {:?}", grads.wrt(&x_t).data());
    println!("tape ops = {}", tape.len());
    drop(tape);

    let err = grad_check(|w| x.matmul(w)?.tanh().sum(), &w, DEFAULT_STEP)?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}
