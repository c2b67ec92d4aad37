//! Mean-matching benchmark with known index-mean functions.

use super::{prepare_sample, Estimate, EstimatorConfig};
use crate::dgp::{margin_mean, DesignSpec, Sample};
use crate::error::{Error, Result};
use crate::num::{std_pop, WEIGHT_FLOOR};

/// For each control unit, finds x~ with E[Y | x~, D=0, U=P_i] equal to
/// E[Y | x_i, D=1, U=P_i] by bisection, then imputes Y1 by kernel regression
/// of control outcomes on (X, P) at (x~, P_i). Units whose root is not
/// bracketed by the covariate range +-1 are dropped.
pub fn vy_ate_infeasible(sample: &Sample, design: &DesignSpec, cfg: &EstimatorConfig) -> Result<Estimate> {
    cfg.validate()?;
    design.validate()?;
    if !design.kind.is_normal_family() {
        return Err(Error::Config("the mean-matching benchmark needs a scalar-covariate design".into()));
    }
    let sample = prepare_sample(sample, cfg)?;
    if sample.is_empty() {
        return Err(Error::Undefined("empty sample".into()));
    }
    let obs = &sample.observations;
    let xs: Vec<f64> = obs.iter().map(|o| o.x[0]).collect();
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;

    let controls: Vec<usize> = (0..obs.len()).filter(|&j| obs[j].d == 0).collect();
    let cx: Vec<f64> = controls.iter().map(|&j| obs[j].x[0]).collect();
    let cp: Vec<f64> = controls.iter().map(|&j| obs[j].p).collect();
    let h = cfg.second_stage_bandwidth(obs.len());
    let hx = std_pop(&cx).max(f64::MIN_POSITIVE) * h;
    let hp = std_pop(&cp).max(f64::MIN_POSITIVE) * h;

    let mut sum = 0.0;
    let mut used = 0usize;
    let mut dropped = 0usize;
    for o in obs {
        if o.d == 1 {
            sum += o.y;
            used += 1;
            continue;
        }
        let target = margin_mean(design, 1, o.x[0], o.p)?;
        let f = |t: f64| margin_mean(design, 0, t, o.p).map(|m| m - target);
        let (mut a, mut b) = (lo, hi);
        let (fa, fb) = (f(a)?, f(b)?);
        if fa == 0.0 || fb == 0.0 {
            // root on the boundary
        } else if fa.signum() == fb.signum() {
            dropped += 1;
            continue;
        }
        let x_tilde = if fa == 0.0 {
            a
        } else if fb == 0.0 {
            b
        } else {
            let rising = fb > 0.0;
            while b - a > 1e-8 {
                let mid = 0.5 * (a + b);
                let fm = f(mid)?;
                if (fm > 0.0) == rising {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            0.5 * (a + b)
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..controls.len() {
            let u = (cx[k] - x_tilde) / hx;
            let v = (cp[k] - o.p) / hp;
            let w = (-0.5 * (u * u + v * v)).exp();
            num += w * obs[controls[k]].y;
            den += w;
        }
        if den >= WEIGHT_FLOOR {
            sum += num / den;
            used += 1;
        } else {
            dropped += 1;
        }
    }
    if used == 0 {
        return Err(Error::Undefined("every unit failed to match".into()));
    }
    Ok(Estimate { value: sum / used as f64, used, dropped })
}
