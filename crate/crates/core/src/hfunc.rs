//! Truncated outcome distributions h1*, h0*, their interval differences, the
//! distance between h-profiles and propensity trimming.
//!
//! u always denotes the selection error on its uniform scale, so treatment is
//! D = 1{U < P}. The normal designs use s = Phi^{-1}(u).

use crate::dgp::{multinomial_choice_probs, DesignKind, DesignSpec, Sample};
use crate::error::{Error, Result};
use crate::num::{norm_cdf, norm_inv_cdf, std_sample, FRAC_1_SQRT_2PI, WEIGHT_FLOOR};
use serde::{Deserialize, Serialize};

/// The event whose truncated probability is tracked: 1{Y <= y} or 1{Y = j}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OutcomeEvent {
    AtMost(f64),
    Equals(usize),
}

impl OutcomeEvent {
    #[inline]
    pub fn holds(&self, y: f64) -> bool {
        match *self {
            OutcomeEvent::AtMost(t) => y <= t,
            OutcomeEvent::Equals(j) => y == j as f64,
        }
    }
}

/// Kernel-estimated h functions: the sample columns plus product-kernel
/// bandwidths for (x_1, .., x_k, p).
#[derive(Clone, Debug)]
pub struct EmpiricalH {
    dim: usize,
    xs: Vec<f64>,
    d: Vec<u8>,
    y: Vec<f64>,
    p: Vec<f64>,
    bandwidths: Vec<f64>,
}

impl EmpiricalH {
    pub fn new(sample: &Sample, bandwidths: Vec<f64>) -> Result<EmpiricalH> {
        if sample.is_empty() {
            return Err(Error::Domain("empty sample".into()));
        }
        let dim = sample.covariate_dim();
        if bandwidths.len() != dim + 1 {
            return Err(Error::Config(format!("need {} bandwidths (covariates and p), got {}", dim + 1, bandwidths.len())));
        }
        if bandwidths.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::Config("empirical bandwidths must be positive".into()));
        }
        let obs = &sample.observations;
        Ok(EmpiricalH {
            dim,
            xs: obs.iter().flat_map(|o| o.x.iter().copied()).collect(),
            d: obs.iter().map(|o| o.d).collect(),
            y: obs.iter().map(|o| o.y).collect(),
            p: obs.iter().map(|o| o.p).collect(),
            bandwidths,
        })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    fn len(&self) -> usize {
        self.d.len()
    }

    /// Unnormalized covariate kernel weights at `x`.
    fn x_weights(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let h = &self.bandwidths[..self.dim];
        for m in 0..self.len() {
            let row = &self.xs[m * self.dim..(m + 1) * self.dim];
            let mut q = 0.0;
            for k in 0..self.dim {
                let u = (x[k] - row[k]) / h[k];
                q += u * u;
            }
            out.push((-0.5 * q).exp());
        }
    }

    fn p_weight(&self, p: f64, m: usize) -> f64 {
        let u = (p - self.p[m]) / self.bandwidths[self.dim];
        (-0.5 * u * u).exp()
    }

    fn h_star(&self, arm: u8, x: &[f64], event: OutcomeEvent, p: f64) -> Result<f64> {
        let mut kx = Vec::with_capacity(self.len());
        self.x_weights(x, &mut kx);
        let mut num = 0.0;
        let mut den = 0.0;
        for m in 0..self.len() {
            let w = kx[m] * self.p_weight(p, m);
            den += w;
            if self.d[m] == arm && event.holds(self.y[m]) {
                num += w;
            }
        }
        if !(den >= WEIGHT_FLOOR) {
            return Err(Error::EmptyNeighborhood(den));
        }
        Ok(num / den)
    }
}

/// Rule-of-thumb bandwidths: scale * sd * n^(-1/5) for each covariate and p.
pub fn default_bandwidths(sample: &Sample, scale: f64) -> Vec<f64> {
    rule_of_thumb(sample, scale, -0.2)
}

/// Bandwidths 1.06 * sd * n^(-1/7), used for the multinomial design.
pub fn multinomial_bandwidths(sample: &Sample) -> Vec<f64> {
    rule_of_thumb(sample, 1.06, -1.0 / 7.0)
}

fn rule_of_thumb(sample: &Sample, scale: f64, exponent: f64) -> Vec<f64> {
    let n = sample.len() as f64;
    let dim = sample.covariate_dim();
    let mut cols: Vec<Vec<f64>> = (0..dim).map(|k| sample.observations.iter().map(|o| o.x[k]).collect()).collect();
    cols.push(sample.observations.iter().map(|o| o.p).collect());
    cols.iter()
        .map(|c| {
            let sd = std_sample(c);
            scale * if sd > 0.0 { sd } else { 1.0 } * n.powf(exponent)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub enum HContext {
    /// Known design; integrals by the midpoint rule with `quadrature_m`
    /// nodes per unit length of u.
    Analytic { design: DesignSpec, quadrature_m: usize },
    Empirical(EmpiricalH),
}

impl HContext {
    pub fn analytic(design: DesignSpec, quadrature_m: usize) -> Result<HContext> {
        design.validate()?;
        if quadrature_m == 0 {
            return Err(Error::Config("quadrature_m must be positive".into()));
        }
        Ok(HContext::Analytic { design, quadrature_m })
    }

    pub fn empirical(sample: &Sample, bandwidths: Vec<f64>) -> Result<HContext> {
        Ok(HContext::Empirical(EmpiricalH::new(sample, bandwidths)?))
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self, HContext::Analytic { .. })
    }
}

fn nodes_for(m: usize, len: f64) -> usize {
    ((m as f64 * len).ceil() as usize).max(1)
}

/// F_{g|u} for a known design, with s = Phi^{-1}(u) supplied by the caller.
#[inline]
pub(crate) fn design_cdf(design: &DesignSpec, event: OutcomeEvent, d: u8, x: &[f64], u: f64, s: f64) -> Result<f64> {
    let rho = design.rho_v;
    let sig = (1.0 - rho * rho).sqrt();
    let df = d as f64;
    let rs = rho * s;
    let y = match (design.kind, event) {
        (DesignKind::Multinomial, OutcomeEvent::Equals(j)) => {
            if j > 2 {
                return Ok(0.0);
            }
            return Ok(multinomial_choice_probs(design, x, d, u)[j]);
        }
        (DesignKind::Multinomial, OutcomeEvent::AtMost(t)) => {
            let pr = multinomial_choice_probs(design, x, d, u);
            return Ok((0..3).filter(|j| *j as f64 <= t).map(|j| pr[j]).sum());
        }
        (_, OutcomeEvent::AtMost(t)) => t,
        (_, OutcomeEvent::Equals(_)) => {
            return Err(Error::Config("category events only apply to the multinomial design".into()))
        }
    };
    let x = x[0];
    Ok(match design.kind {
        DesignKind::Design1 => norm_cdf((y - x - 0.5 * df - rs) / sig),
        DesignKind::Design2 => {
            let a = x + df;
            let c = x + 0.5 * df;
            if a > 0.0 {
                norm_cdf(((y - c) / a - rs) / sig)
            } else if a < 0.0 {
                1.0 - norm_cdf(((y - c) / a - rs) / sig)
            } else {
                f64::from(y >= c)
            }
        }
        DesignKind::Design3 => {
            if y <= 0.0 {
                0.0
            } else {
                let c = x + 0.5 * df + rs;
                let r = y.sqrt();
                norm_cdf((r - c) / sig) - norm_cdf((-r - c) / sig)
            }
        }
        DesignKind::RandomCoef => {
            let cf = &design.coefficients;
            let sd = (sig * sig + x * x).sqrt();
            norm_cdf((y - cf.rc_alpha[d as usize] - x * cf.rc_beta[d as usize] - rs) / sd)
        }
        DesignKind::Multinomial => unreachable!(),
    })
}

fn check_arm(arm: u8) -> Result<()> {
    if arm > 1 {
        return Err(Error::Domain(format!("arm must be 0 or 1, got {arm}")));
    }
    Ok(())
}

/// F_{g|u}(event; v(x, arm)): probability of the event given U = u.
pub fn f_g_given_u(ctx: &HContext, event: OutcomeEvent, arm: u8, x: &[f64], u: f64) -> Result<f64> {
    check_arm(arm)?;
    match ctx {
        HContext::Analytic { design, .. } => {
            if !(u > 0.0 && u < 1.0) {
                return Err(Error::Domain(format!("u = {u} outside (0, 1)")));
            }
            design_cdf(design, event, arm, x, u, norm_inv_cdf(u))
        }
        HContext::Empirical(_) => Err(Error::UnsupportedMode("F_{g|u} is only available for a known design".into())),
    }
}

/// Integral of F_{g|u} over [a, b] on a fixed grid of `m` cells per unit
/// length: each cell contributes its overlap with [a, b] times the integrand
/// at the cell midpoint. The result is additive over adjacent intervals and
/// monotone in both endpoints.
fn analytic_integral(design: &DesignSpec, m: usize, event: OutcomeEvent, arm: u8, x: &[f64], a: f64, b: f64) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let mf = m.max(1) as f64;
    let first = (a * mf).floor().max(0.0) as usize;
    let last = ((b * mf).ceil() as usize).min(m.max(1));
    let mut acc = 0.0;
    for k in first..last {
        let lo = (k as f64 / mf).max(a);
        let hi = ((k + 1) as f64 / mf).min(b);
        if hi <= lo {
            continue;
        }
        let u = (k as f64 + 0.5) / mf;
        acc += (hi - lo) * design_cdf(design, event, arm, x, u, norm_inv_cdf(u))?;
    }
    Ok(acc)
}

/// h1*(x, y, p) = E[D 1{event} | X = x, P = p] (arm 1) or
/// h0*(x, y, p) = E[(1 - D) 1{event} | X = x, P = p] (arm 0).
pub fn h_star(ctx: &HContext, arm: u8, x: &[f64], event: OutcomeEvent, p: f64) -> Result<f64> {
    check_arm(arm)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("p = {p} outside (0, 1)")));
    }
    match ctx {
        HContext::Analytic { design, quadrature_m } => {
            let (a, b) = if arm == 1 { (0.0, p) } else { (p, 1.0) };
            analytic_integral(design, *quadrature_m, event, arm, x, a, b)
        }
        HContext::Empirical(e) => e.h_star(arm, x, event, p),
    }
}

/// h1(x, y, p1, p2) = h1*(p1) - h1*(p2) and h0(x, y, p1, p2) = h0*(p2) - h0*(p1).
pub fn h_interval(ctx: &HContext, arm: u8, x: &[f64], event: OutcomeEvent, p1: f64, p2: f64) -> Result<f64> {
    check_arm(arm)?;
    if !(p1 > p2) {
        return Err(Error::Ordering { p1, p2 });
    }
    match ctx {
        HContext::Analytic { design, quadrature_m } => {
            if !(p2 >= 0.0 && p1 <= 1.0) {
                return Err(Error::Domain(format!("interval [{p2}, {p1}] outside [0, 1]")));
            }
            analytic_integral(design, *quadrature_m, event, arm, x, p2, p1)
        }
        HContext::Empirical(_) => {
            let a = h_star(ctx, arm, x, event, p1)?;
            let b = h_star(ctx, arm, x, event, p2)?;
            Ok(if arm == 1 { a - b } else { b - a })
        }
    }
}

/// Weighted L2 distance between h1(x1, .) and h0(x0, .) over events and
/// propensity pairs.
pub fn distance_norm(
    ctx: &HContext,
    x1: &[f64],
    x0: &[f64],
    events: &[OutcomeEvent],
    p_pairs: &[(f64, f64)],
    w: &dyn Fn(&OutcomeEvent) -> f64,
) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::Config("distance needs at least one outcome event".into()));
    }
    if p_pairs.is_empty() {
        return Err(Error::Config("distance needs at least one propensity pair".into()));
    }
    let mut acc = 0.0;
    for e in events {
        let we = w(e);
        for &(p1, p2) in p_pairs {
            let diff = h_interval(ctx, 1, x1, *e, p1, p2)? - h_interval(ctx, 0, x0, *e, p1, p2)?;
            acc += we * diff * diff;
        }
    }
    Ok(acc.max(0.0).sqrt())
}

/// Kernel estimate of the density of P given X = x at p. Returns 0 when
/// there is no covariate mass near x.
pub fn estimate_p_density(sample: &Sample, x: &[f64], p: f64, bandwidths: &[f64]) -> Result<f64> {
    let dim = x.len();
    if bandwidths.len() != dim + 1 || bandwidths.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Config(format!("need {} positive bandwidths", dim + 1)));
    }
    let hp = bandwidths[dim];
    let mut joint = 0.0;
    let mut marg = 0.0;
    for o in &sample.observations {
        let mut q = 0.0;
        for k in 0..dim {
            let u = (x[k] - o.x[k]) / bandwidths[k];
            q += u * u;
        }
        let kx = (-0.5 * q).exp();
        let u = (p - o.p) / hp;
        marg += kx;
        joint += kx * (-0.5 * u * u).exp();
    }
    if !(marg >= WEIGHT_FLOOR) {
        return Ok(0.0);
    }
    Ok(joint * FRAC_1_SQRT_2PI / (hp * marg))
}

#[derive(Clone, Debug)]
enum DensitySource<'a> {
    /// P independent of X and uniform on (0, 1), as in every simulated design.
    Uniform,
    Kernel { sample: &'a Sample, bandwidths: Vec<f64> },
}

/// Trimmed propensity support {p : f_P(p | x) > c}.
#[derive(Clone, Debug)]
pub struct TrimSet<'a> {
    pub x: Vec<f64>,
    pub c: f64,
    source: DensitySource<'a>,
}

impl<'a> TrimSet<'a> {
    pub fn known_uniform(x: Vec<f64>, c: f64) -> TrimSet<'static> {
        TrimSet { x, c, source: DensitySource::Uniform }
    }

    pub fn estimated(sample: &'a Sample, x: Vec<f64>, c: f64, bandwidths: Vec<f64>) -> TrimSet<'a> {
        TrimSet { x, c, source: DensitySource::Kernel { sample, bandwidths } }
    }

    pub fn density(&self, p: f64) -> f64 {
        match &self.source {
            DensitySource::Uniform => f64::from(p > 0.0 && p < 1.0),
            DensitySource::Kernel { sample, bandwidths } => {
                estimate_p_density(sample, &self.x, p, bandwidths).unwrap_or(0.0)
            }
        }
    }

    pub fn accepts(&self, p: f64) -> bool {
        self.density(p) > self.c
    }
}

/// Evenly spaced propensity grid on [c0, 1 - c0].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PGrid {
    pub points: Vec<f64>,
}

impl PGrid {
    pub fn new(c0: f64, size: usize) -> Result<PGrid> {
        if !(c0 > 0.0 && c0 < 0.5) {
            return Err(Error::Config(format!("trim_c0 = {c0} must lie in (0, 0.5)")));
        }
        if size < 2 {
            return Err(Error::Config("p grid needs at least two points".into()));
        }
        let step = (1.0 - 2.0 * c0) / (size - 1) as f64;
        Ok(PGrid { points: (0..size).map(|k| c0 + k as f64 * step).collect() })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// All ordered pairs (p_k, p_l) with k > l.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for k in 0..self.points.len() {
            for l in 0..k {
                out.push((self.points[k], self.points[l]));
            }
        }
        out
    }
}

/// h-profile of one unit on a p-grid: `values[e * K + k]`, where each entry
/// equals h_arm*(x, e, p_k) up to a per-event constant that cancels in
/// interval differences.
#[derive(Clone, Debug, PartialEq)]
pub struct HProfile {
    pub values: Vec<f64>,
}

/// Squared distance from profiles. For the treated-arm profile a and the
/// control-arm profile b, h1 - h0 over the pair (k, l) equals
/// (a_k + b_k) - (a_l + b_l), and summing squares over k > l gives
/// K * sum_k (A_k - mean A)^2.
pub fn profile_distance(a: &HProfile, b: &HProfile, weights: &[f64], k: usize) -> f64 {
    let mut acc = 0.0;
    let mut buf = [0.0f64; 64];
    for (e, w) in weights.iter().enumerate() {
        let ra = &a.values[e * k..(e + 1) * k];
        let rb = &b.values[e * k..(e + 1) * k];
        let mut s = 0.0;
        for i in 0..k {
            let v = ra[i] + rb[i];
            if i < 64 {
                buf[i] = v;
            }
            s += v;
        }
        let mean = s / k as f64;
        let mut q = 0.0;
        for i in 0..k {
            let v = if i < 64 { buf[i] } else { ra[i] + rb[i] };
            q += (v - mean) * (v - mean);
        }
        acc += w * q;
    }
    (acc * k as f64).max(0.0).sqrt()
}

/// Computes h-profiles on a fixed p-grid for many units.
pub struct ProfileBuilder<'c> {
    ctx: &'c HContext,
    events: Vec<OutcomeEvent>,
    grid: PGrid,
    trim_c: f64,
    // analytic: per-segment quadrature nodes (u, s, du)
    segments: Vec<Vec<(f64, f64, f64)>>,
    // empirical: event bucket per unit and p-kernel per grid point
    buckets: Vec<Option<usize>>,
    cumulative: bool,
    kp: Vec<Vec<f64>>,
}

impl<'c> ProfileBuilder<'c> {
    pub fn new(ctx: &'c HContext, events: Vec<OutcomeEvent>, grid: PGrid, trim_c: f64) -> Result<ProfileBuilder<'c>> {
        if events.is_empty() {
            return Err(Error::Config("profiles need at least one outcome event".into()));
        }
        let mut b = ProfileBuilder {
            ctx,
            events,
            grid,
            trim_c,
            segments: Vec::new(),
            buckets: Vec::new(),
            cumulative: false,
            kp: Vec::new(),
        };
        match ctx {
            HContext::Analytic { quadrature_m, .. } => {
                let pts = &b.grid.points;
                for k in 1..pts.len() {
                    let (a, c) = (pts[k - 1], pts[k]);
                    let m = nodes_for(*quadrature_m, c - a);
                    let du = (c - a) / m as f64;
                    b.segments.push(
                        (0..m)
                            .map(|i| {
                                let u = a + (i as f64 + 0.5) * du;
                                (u, norm_inv_cdf(u), du)
                            })
                            .collect(),
                    );
                }
            }
            HContext::Empirical(emp) => {
                let all_at_most = b.events.iter().all(|e| matches!(e, OutcomeEvent::AtMost(_)));
                let all_equals = b.events.iter().all(|e| matches!(e, OutcomeEvent::Equals(_)));
                if all_at_most {
                    let ts: Vec<f64> = b.events.iter().map(|e| if let OutcomeEvent::AtMost(t) = e { *t } else { 0.0 }).collect();
                    if ts.windows(2).any(|w| w[1] < w[0]) {
                        return Err(Error::Config("outcome grid must be increasing".into()));
                    }
                    b.cumulative = true;
                    b.buckets = emp.y.iter().map(|y| {
                        let idx = ts.partition_point(|t| t < y);
                        (idx < ts.len()).then_some(idx)
                    }).collect();
                } else if all_equals {
                    b.buckets = emp.y.iter().map(|y| b.events.iter().position(|e| e.holds(*y))).collect();
                } else {
                    return Err(Error::Config("cannot mix threshold and category events".into()));
                }
                b.kp = b.grid.points.iter().map(|&p| (0..emp.len()).map(|m| emp.p_weight(p, m)).collect()).collect();
            }
        }
        Ok(b)
    }

    pub fn events(&self) -> &[OutcomeEvent] {
        &self.events
    }

    pub fn grid(&self) -> &PGrid {
        &self.grid
    }

    /// Profile of h_arm at `x`. `Ok(None)` when the p-grid leaves the trimmed
    /// support of x.
    pub fn profile(&self, arm: u8, x: &[f64]) -> Result<Option<HProfile>> {
        check_arm(arm)?;
        let k = self.grid.len();
        let ne = self.events.len();
        let mut values = vec![0.0; ne * k];
        match self.ctx {
            HContext::Analytic { design, .. } => {
                let sign = if arm == 1 { 1.0 } else { -1.0 };
                if design.kind == DesignKind::Multinomial {
                    // one softmax per node serves every category event
                    let mut acc = vec![0.0; ne];
                    for (si, seg) in self.segments.iter().enumerate() {
                        for &(u, _, du) in seg {
                            let pr = multinomial_choice_probs(design, x, arm, u);
                            for (e, ev) in self.events.iter().enumerate() {
                                acc[e] += du * match *ev {
                                    OutcomeEvent::Equals(j) => pr.get(j).copied().unwrap_or(0.0),
                                    OutcomeEvent::AtMost(t) => (0..3).filter(|j| *j as f64 <= t).map(|j| pr[j]).sum(),
                                };
                            }
                        }
                        for e in 0..ne {
                            values[e * k + si + 1] = sign * acc[e];
                        }
                    }
                } else {
                    for (e, ev) in self.events.iter().enumerate() {
                        let mut acc = 0.0;
                        for (si, seg) in self.segments.iter().enumerate() {
                            for &(u, s, du) in seg {
                                acc += du * design_cdf(design, *ev, arm, x, u, s)?;
                            }
                            values[e * k + si + 1] = sign * acc;
                        }
                    }
                }
                Ok(Some(HProfile { values }))
            }
            HContext::Empirical(emp) => {
                let mut kx = Vec::with_capacity(emp.len());
                emp.x_weights(x, &mut kx);
                let marg: f64 = kx.iter().sum();
                if !(marg >= WEIGHT_FLOOR) {
                    return Ok(None);
                }
                let hp = emp.bandwidths[emp.dim];
                let mut num = vec![0.0; ne];
                for (kk, kp) in self.kp.iter().enumerate() {
                    num.iter_mut().for_each(|v| *v = 0.0);
                    let mut den = 0.0;
                    for m in 0..emp.len() {
                        let w = kx[m] * kp[m];
                        den += w;
                        if emp.d[m] == arm {
                            if let Some(bk) = self.buckets[m] {
                                num[bk] += w;
                            }
                        }
                    }
                    let density = den * FRAC_1_SQRT_2PI / (hp * marg);
                    if !(density > self.trim_c) || !(den >= WEIGHT_FLOOR) {
                        return Ok(None);
                    }
                    let mut run = 0.0;
                    for e in 0..ne {
                        let v = if self.cumulative {
                            run += num[e];
                            run
                        } else {
                            num[e]
                        };
                        values[e * k + kk] = v / den;
                    }
                }
                Ok(Some(HProfile { values }))
            }
        }
    }
}
