//! Numerical primitives: normal kernel, Nadaraya-Watson regression, midpoint
//! quadrature, outcome grids and Monte Carlo summary statistics.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::function::erf;

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Total kernel mass below this is treated as an empty neighborhood.
pub const WEIGHT_FLOOR: f64 = 1e-300;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal cdf.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal quantile. `p` must lie in (0, 1).
#[inline]
pub fn norm_inv_cdf(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p)
}

/// Gaussian kernel (2π)^(-1/2) exp(-u²/2).
pub fn kernel_weight(u: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(Error::Domain(format!("kernel argument {u} is not finite")));
    }
    Ok(norm_pdf(u))
}

/// Nadaraya-Watson estimate at `query` with a product Gaussian kernel.
pub fn nw_regress(xs: &[Vec<f64>], ys: &[f64], query: &[f64], bandwidths: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Domain("nw_regress needs at least one point".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Domain(format!(
            "{} regressor rows but {} responses",
            xs.len(),
            ys.len()
        )));
    }
    let dim = query.len();
    if bandwidths.len() != dim || xs.iter().any(|x| x.len() != dim) {
        return Err(Error::Domain("inconsistent regressor dimensions".into()));
    }
    if bandwidths.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(Error::Domain("bandwidths must be positive".into()));
    }
    let norm = FRAC_1_SQRT_2PI.powi(dim as i32) / bandwidths.iter().product::<f64>();
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let mut q = 0.0;
        for k in 0..dim {
            let u = (query[k] - x[k]) / bandwidths[k];
            q += u * u;
        }
        let w = norm * (-0.5 * q).exp();
        num += w * y;
        den += w;
    }
    if !(den >= WEIGHT_FLOOR) {
        return Err(Error::EmptyNeighborhood(den));
    }
    Ok(num / den)
}

/// Composite midpoint rule with `m` panels.
pub fn midpoint_integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Domain("midpoint rule needs m >= 1".into()));
    }
    if !(a <= b) {
        return Err(Error::Domain(format!("integration bounds out of order: [{a}, {b}]")));
    }
    let step = (b - a) / m as f64;
    let mut acc = 0.0;
    for k in 0..m {
        acc += f(a + (k as f64 + 0.5) * step);
    }
    Ok(acc * step)
}

/// Type-7 quantile (linear interpolation between order statistics) of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by n).
pub fn std_pop(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Sample standard deviation (divides by n - 1).
pub fn std_sample(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Evenly spaced outcome points used by the distance norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YGrid {
    pub points: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl YGrid {
    pub fn linspace(lo: f64, hi: f64, size: usize) -> Result<YGrid> {
        if size < 2 {
            return Err(Error::Domain(format!("grid size {size} < 2")));
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Degenerate(format!("grid range [{lo}, {hi}] is a single point")));
        }
        let step = (hi - lo) / (size - 1) as f64;
        let mut points: Vec<f64> = (0..size).map(|k| lo + k as f64 * step).collect();
        points[size - 1] = hi;
        Ok(YGrid { points, lo, hi })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Default grid size: ceil(n / 50), at least 5.
pub fn default_y_grid_size(n: usize) -> usize {
    n.div_ceil(50).max(5)
}

/// Grid of `size` points between the 2.5% and 97.5% quantiles of `ys`.
pub fn build_y_grid(ys: &[f64], size: usize) -> Result<YGrid> {
    if ys.is_empty() {
        return Err(Error::Domain("cannot build a grid from no outcomes".into()));
    }
    let mut v = ys.to_vec();
    v.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&v, 0.025);
    let hi = quantile_sorted(&v, 0.975);
    YGrid::linspace(lo, hi, size)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scaling {
    /// Divide bias, rmse and mad by the true value.
    Scaled,
    Unscaled,
}

/// Monte Carlo summary of replicated estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mean_bias: f64,
    pub median_bias: f64,
    pub rmse: f64,
    pub mad: f64,
    /// Always unscaled.
    pub mse: f64,
    pub n: usize,
    pub replications: usize,
}

impl SummaryRow {
    pub fn with_sample_size(mut self, n: usize) -> Self {
        self.n = n;
        self
    }
}

pub fn summary_stats(estimates: &[f64], true_value: f64, scaling: Scaling) -> Result<SummaryRow> {
    if estimates.is_empty() {
        return Err(Error::Domain("no estimates to summarize".into()));
    }
    let scale = match scaling {
        Scaling::Scaled => {
            if true_value == 0.0 || !true_value.is_finite() {
                return Err(Error::Domain(
                    "cannot scale by a zero true value; use unscaled mode".into(),
                ));
            }
            true_value
        }
        Scaling::Unscaled => 1.0,
    };
    let errs: Vec<f64> = estimates.iter().map(|e| e - true_value).collect();
    let abs: Vec<f64> = errs.iter().map(|e| e.abs()).collect();
    let bias = mean(&errs);
    let mse = mean(&errs.iter().map(|e| e * e).collect::<Vec<_>>());
    let constant = errs.iter().all(|e| *e == errs[0]);
    let rmse = if constant { bias.abs() } else { mse.sqrt().max(bias.abs()) };
    Ok(SummaryRow {
        mean_bias: bias / scale,
        median_bias: median(&errs) / scale,
        rmse: rmse / scale.abs(),
        mad: median(&abs) / scale.abs(),
        mse,
        n: 0,
        replications: estimates.len(),
    })
}

/// Summary for a vector-valued estimate; errors are Euclidean norms.
pub fn summary_stats_vector(estimates: &[Vec<f64>], truth: &[f64]) -> Result<SummaryRow> {
    if estimates.is_empty() {
        return Err(Error::Domain("no estimates to summarize".into()));
    }
    let dim = truth.len();
    let mut mean_err = vec![0.0; dim];
    let mut sq = Vec::with_capacity(estimates.len());
    for e in estimates {
        if e.len() != dim {
            return Err(Error::Domain("vector estimate dimension mismatch".into()));
        }
        let mut s = 0.0;
        for k in 0..dim {
            let d = e[k] - truth[k];
            mean_err[k] += d / estimates.len() as f64;
            s += d * d;
        }
        sq.push(s);
    }
    let norms: Vec<f64> = sq.iter().map(|s| s.sqrt()).collect();
    let bias = mean_err.iter().map(|m| m * m).sum::<f64>().sqrt();
    let mse = mean(&sq);
    Ok(SummaryRow {
        mean_bias: bias,
        median_bias: median(&norms),
        rmse: mse.sqrt().max(bias),
        mad: median(&norms),
        mse,
        n: 0,
        replications: estimates.len(),
    })
}
