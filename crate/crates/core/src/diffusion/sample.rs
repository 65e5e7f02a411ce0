use rayon::prelude::*;

use super::denoiser::ConditionalDenoiser;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::rng;

/// Samples are generated in fixed blocks of this many indices so that the
/// batched arithmetic, and hence every output bit, is independent of the
/// thread count.
const BLOCK: usize = 64;

/// Ancestral DDPM sampling under `token`.
///
/// Sample `i` draws all of its noise from PRNG stream `i` of `seed`. Each
/// step applies the posterior mean
/// `z ← (z − β_t/√(1−ᾱ_t)·ε̂)/√α_t` and adds `√β_t·ξ` for `t > 1`.
pub fn sample(model: &ConditionalDenoiser, token: usize, n: usize, seed: u64) -> Result<Vec<Vector>> {
    model.check_token(token)?;
    let blocks: Vec<(usize, usize)> = (0..n)
        .step_by(BLOCK)
        .map(|start| (start, (start + BLOCK).min(n)))
        .collect();
    let out: Result<Vec<Vec<Vector>>> = blocks
        .par_iter()
        .map(|&(start, end)| sample_block(model, token, start, end, seed))
        .collect();
    Ok(out?.into_iter().flatten().collect())
}

fn sample_block(model: &ConditionalDenoiser, token: usize, start: usize, end: usize, seed: u64) -> Result<Vec<Vector>> {
    let d = model.data_dim();
    let count = end - start;
    let mut rngs: Vec<_> = (start..end).map(|i| rng::stream(seed, i as u64)).collect();
    let mut z = Matrix::zeros(count, d);
    for (i, r) in rngs.iter_mut().enumerate() {
        z.row_mut(i).copy_from_slice(&rng::normal_vec(r, d));
    }
    let schedule = model.schedule();
    let tokens = vec![token; count];
    for t in (1..=schedule.steps()).rev() {
        let ts = vec![t; count];
        let eps_hat = model.predict_batch(&z, &tokens, &ts)?;
        let beta = schedule.beta(t);
        let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let sigma = beta.sqrt();
        for (i, r) in rngs.iter_mut().enumerate() {
            let row = z.row_mut(i);
            for (zj, ej) in row.iter_mut().zip(eps_hat.row(i)) {
                *zj = (*zj - coef * ej) * inv_sqrt_alpha;
            }
            if t > 1 {
                for zj in row.iter_mut() {
                    *zj += sigma * rng::normal(r);
                }
            }
        }
    }
    if !z.is_finite() {
        return Err(Error::non_finite("sampled latents"));
    }
    Ok(z.to_rows())
}
