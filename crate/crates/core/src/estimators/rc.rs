//! Outcome matching for the random-coefficient model: t-hat solves
//! h0(x, t, p1, p2) = h1(x, y, p1, p2), tau-hat averages t-hat over
//! propensity pairs, and Pr{Y1 <= y} is estimated by plug-in.

use super::{prepare_sample, Estimate, EstimatorConfig};
use crate::dgp::{substream, Sample};
use crate::error::{Error, Result};
use crate::hfunc::{design_cdf, h_interval, HContext, OutcomeEvent};
use crate::num::norm_inv_cdf;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcMatch {
    pub t: f64,
    /// The target was outside the reachable range of h0 and `t` is a
    /// search boundary.
    pub boundary: bool,
}

/// Root of a nondecreasing `g` on [lo, hi]. When g(lo) >= 0 or g(hi) <= 0 the
/// matching boundary is returned with the flag set.
pub fn solve_monotone<F: FnMut(f64) -> Result<f64>>(mut g: F, lo: f64, hi: f64, tol: f64) -> Result<RcMatch> {
    if !(hi > lo) {
        return Err(Error::Domain(format!("empty search range [{lo}, {hi}]")));
    }
    let (mut a, mut b) = (lo, hi);
    let mut ga = g(a)?;
    if ga >= 0.0 {
        return Ok(RcMatch { t: a, boundary: true });
    }
    let mut gb = g(b)?;
    if gb <= 0.0 {
        return Ok(RcMatch { t: b, boundary: true });
    }
    // Illinois false position, with a bisection step whenever the bracket
    // fails to halve
    let mut side = 0i8;
    let mut width = b - a;
    while b - a > tol {
        let mut c = (a * gb - b * ga) / (gb - ga);
        if !(c > a && c < b) {
            c = 0.5 * (a + b);
        }
        let gc = g(c)?;
        if gc == 0.0 {
            return Ok(RcMatch { t: c, boundary: false });
        }
        if gc < 0.0 {
            a = c;
            ga = gc;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        } else {
            b = c;
            gb = gc;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        }
        if b - a > 0.5 * width {
            let m = 0.5 * (a + b);
            let gm = g(m)?;
            if gm == 0.0 {
                return Ok(RcMatch { t: m, boundary: false });
            }
            if gm < 0.0 {
                a = m;
                ga = gm;
            } else {
                b = m;
                gb = gm;
            }
            side = 0;
        }
        width = b - a;
    }
    Ok(RcMatch { t: 0.5 * (a + b), boundary: false })
}

/// Like [`solve_monotone`] but brackets the root by expanding outward from
/// `guess` first, falling back to the full range.
pub fn solve_monotone_near<F: FnMut(f64) -> Result<f64>>(
    mut g: F,
    guess: f64,
    step: f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<RcMatch> {
    let guess = guess.clamp(lo, hi);
    let g0 = g(guess)?;
    if g0 == 0.0 {
        return Ok(RcMatch { t: guess, boundary: false });
    }
    let up = g0 < 0.0;
    let mut inner = guess;
    let mut w = step;
    loop {
        let outer = if up { (guess + w).min(hi) } else { (guess - w).max(lo) };
        let go = g(outer)?;
        if go == 0.0 {
            return Ok(RcMatch { t: outer, boundary: false });
        }
        if (go > 0.0) == up {
            return if up { solve_monotone(g, inner, outer, tol) } else { solve_monotone(g, outer, inner, tol) };
        }
        if outer == hi || outer == lo {
            return Ok(RcMatch { t: outer, boundary: true });
        }
        inner = outer;
        w *= 2.0;
    }
}

const T_TOL: f64 = 1e-10;
const T_STEP: f64 = 0.05;

/// t-hat(x, y, p1, p2) over the search range `range`.
pub fn rc_match_t(ctx: &HContext, x: &[f64], y: f64, p1: f64, p2: f64, range: (f64, f64)) -> Result<RcMatch> {
    let target = h_interval(ctx, 1, x, OutcomeEvent::AtMost(y), p1, p2)?;
    solve_monotone(|t| Ok(h_interval(ctx, 0, x, OutcomeEvent::AtMost(t), p1, p2)? - target), range.0, range.1, T_TOL)
}

/// Quadrature nodes over (p2, p1) shared by every unit.
struct PairNodes {
    p1: f64,
    p2: f64,
    nodes: Vec<(f64, f64, f64)>,
}

fn draw_pairs(ps: &[f64], cap: Option<usize>, seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut sorted = ps.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(Error::Undefined("need at least two distinct propensities to form pairs".into()));
    }
    let n = ps.len();
    let total_ordered = n * (n - 1) / 2;
    match cap {
        Some(c) if c < total_ordered => {
            let mut rng = substream(seed, 0x5a1);
            let mut out = Vec::with_capacity(c);
            while out.len() < c {
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                if ps[i] == ps[j] {
                    continue;
                }
                out.push(if ps[i] > ps[j] { (ps[i], ps[j]) } else { (ps[j], ps[i]) });
            }
            Ok(out)
        }
        _ => {
            let mut out = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if ps[i] > ps[j] {
                        out.push((ps[i], ps[j]));
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Delta2-hat(y) = mean of D 1{Y <= y} + (1 - D) 1{Y <= tau-hat(X, y)}.
pub fn rc_distributional(sample: &Sample, ctx: &HContext, y: f64, cfg: &EstimatorConfig) -> Result<Estimate> {
    cfg.validate()?;
    let sample = prepare_sample(sample, cfg)?;
    let obs = &sample.observations;
    let ps: Vec<f64> = obs
        .iter()
        .map(|o| o.p)
        .filter(|p| *p >= cfg.trim_c0 && *p <= 1.0 - cfg.trim_c0)
        .collect();
    let pairs = draw_pairs(&ps, cfg.pair_cap, cfg.seed)?;
    let ys = sample.ys();
    let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (ymax - ymin).max(1.0);
    let range = (ymin - span, ymax + span);

    let nodes: Option<Vec<PairNodes>> = match ctx {
        HContext::Analytic { quadrature_m, .. } => Some(
            pairs
                .iter()
                .map(|&(p1, p2)| {
                    let m = ((*quadrature_m as f64 * (p1 - p2)).ceil() as usize).max(1);
                    let du = (p1 - p2) / m as f64;
                    PairNodes {
                        p1,
                        p2,
                        nodes: (0..m)
                            .map(|i| {
                                let u = p2 + (i as f64 + 0.5) * du;
                                (u, norm_inv_cdf(u), du)
                            })
                            .collect(),
                    }
                })
                .collect(),
        ),
        HContext::Empirical(_) => None,
    };

    let mut sum = 0.0;
    let mut boundary_hits = 0usize;
    for o in obs {
        if o.d == 1 {
            sum += f64::from(o.y <= y);
            continue;
        }
        let mut tau = 0.0;
        let mut warm = y;
        match (&nodes, ctx) {
            (Some(nodes), HContext::Analytic { design, .. }) => {
                for pn in nodes {
                    let integral = |ev: OutcomeEvent, arm: u8| -> Result<f64> {
                        let mut acc = 0.0;
                        for &(u, s, du) in &pn.nodes {
                            acc += du * design_cdf(design, ev, arm, &o.x, u, s)?;
                        }
                        Ok(acc)
                    };
                    let target = integral(OutcomeEvent::AtMost(y), 1)?;
                    let r = solve_monotone_near(
                        |t| Ok(integral(OutcomeEvent::AtMost(t), 0)? - target),
                        warm,
                        T_STEP,
                        range.0,
                        range.1,
                        T_TOL,
                    )?;
                    warm = r.t;
                    debug_assert!(pn.p1 > pn.p2);
                    boundary_hits += usize::from(r.boundary);
                    tau += r.t;
                }
            }
            _ => {
                for &(p1, p2) in &pairs {
                    let r = rc_match_t(ctx, &o.x, y, p1, p2, range)?;
                    boundary_hits += usize::from(r.boundary);
                    tau += r.t;
                }
            }
        }
        tau /= pairs.len() as f64;
        sum += f64::from(o.y <= tau);
    }
    if boundary_hits > 0 {
        log::debug!("t-hat hit the search boundary {boundary_hits} times");
    }
    Ok(Estimate { value: sum / obs.len() as f64, used: obs.len(), dropped: 0 })
}

/// Plug-in estimate with a supplied outcome map t(x, y).
pub fn rc_distributional_with_t(sample: &Sample, y: f64, t: &dyn Fn(&[f64], f64) -> f64) -> Result<Estimate> {
    if sample.is_empty() {
        return Err(Error::Undefined("empty sample".into()));
    }
    let s: f64 = sample
        .observations
        .iter()
        .map(|o| if o.d == 1 { f64::from(o.y <= y) } else { f64::from(o.y <= t(&o.x, y)) })
        .sum();
    Ok(Estimate { value: s / sample.len() as f64, used: sample.len(), dropped: 0 })
}
