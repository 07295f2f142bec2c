//! Step the flux recurrence position by position and compare it with the
//! batched form used inside the model.
//!
//! cargo run --example flux_dynamics

use contextual_flux::flux::{
    contextual_weights, embedding_entropy, flux_sequence, flux_step, FluxConfig, FluxState,
};
use contextual_flux::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Result<Tensor> {
    Tensor::matrix(t, d, (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn main() -> Result<()> {
    let (t, d) = (6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let e = random(&mut rng, t, d)?;
    let q = random(&mut rng, t, d)?;
    let k = random(&mut rng, t, d)?;
    let v = random(&mut rng, t, d)?;
    let cfg = FluxConfig { alpha: 1.0, beta: 0.5, ..FluxConfig::default() };

    let batched = flux_sequence(&e, &e, &q, &k, &v, &cfg)?;
    let mut state = FluxState::new(d);
    println!("pos  lambda_t   |T_t - batched row|");
    for i in 0..t {
        let lambda = contextual_weights(&q.slice_rows(0, i + 1)?, &k.slice_rows(0, i + 1)?, cfg.score_scale)?;
        let row = |m: &Tensor| m.slice_rows(i, i + 1)?.reshape(&[d]);
        let (out, next) = flux_step(&row(&e)?, &e.slice_rows(0, i + 1)?, &lambda, &state, &row(&k)?, &row(&v)?, &cfg)?;
        let diff = out.data().iter().zip(batched.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("{:>3}  {:.6}   {diff:.1e}", i + 1, lambda.data()[i]);
        state = next;
    }

    println!("H(E)       = {:.6}  (ln t = {:.6})", embedding_entropy(&e)?.item(), (t as f64).ln());
    println!("H(flux(E)) = {:.6}", embedding_entropy(&batched)?.item());
    Ok(())
}
