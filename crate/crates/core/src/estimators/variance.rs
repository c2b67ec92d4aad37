//! Monte Carlo evaluation of the asymptotic variance
//! Sigma = Var(E[Y1 | X, P, D]) + E[P Var(Y1 | X, P, D = 1)].

use crate::dgp::{derive_seed, std_normal, substream, treated_outcome_moments, DesignSpec};
use crate::error::{Error, Result};
use crate::num::norm_cdf;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Sigma from a draw function returning (E[Y1 | X, P, D], P * Var(Y1 | X, P, D = 1))
/// for one population draw of (X, P, D).
pub fn asymptotic_variance_from<F>(draws: usize, seed: u64, draw: F) -> Result<f64>
where
    F: Fn(&mut ChaCha8Rng) -> Result<(f64, f64)> + Sync,
{
    if draws < 2 {
        return Err(Error::Config("variance oracle needs at least two draws".into()));
    }
    const CHUNK: usize = 1 << 15;
    let chunks = draws.div_ceil(CHUNK);
    let parts: Vec<Result<(f64, f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(derive_seed(seed, &[0x51]), c as u64);
            let len = CHUNK.min(draws - c * CHUNK);
            let (mut s, mut s2, mut sv) = (0.0, 0.0, 0.0);
            for _ in 0..len {
                let (m, pv) = draw(&mut rng)?;
                s += m;
                s2 += m * m;
                sv += pv;
            }
            Ok((s, s2, sv))
        })
        .collect();
    let (mut s, mut s2, mut sv) = (0.0, 0.0, 0.0);
    for p in parts {
        let p = p?;
        s += p.0;
        s2 += p.1;
        sv += p.2;
    }
    let n = draws as f64;
    let mean = s / n;
    let var_mean = (s2 / n - mean * mean).max(0.0);
    Ok(var_mean + sv / n)
}

/// Sigma for a normal-error design, using closed-form truncated moments.
pub fn asymptotic_variance_oracle(design: &DesignSpec, draws: usize, seed: u64) -> Result<f64> {
    design.validate()?;
    if !design.kind.is_normal_family() {
        return Err(Error::Config("variance oracle needs a design with a scalar outcome".into()));
    }
    asymptotic_variance_from(draws, seed, |rng| {
        let x = std_normal(rng);
        let z = std_normal(rng);
        let u = std_normal(rng);
        let p = norm_cdf(z);
        let d = u8::from(z - u > 0.0);
        let (m, _) = treated_outcome_moments(design, x, p, d)?;
        let (_, v1) = treated_outcome_moments(design, x, p, 1)?;
        Ok((m, p * v1))
    })
}
