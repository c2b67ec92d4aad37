//! Treatment-effect estimators built on h-profile matching, plus the
//! mean-matching benchmark and the asymptotic variance oracle.

mod ckt;
mod multinomial;
mod rc;
mod variance;
mod vy;

pub use ckt::{ckt_ate, ckt_conditional_ate, ckt_impute_outcome, MatchResult};
pub use multinomial::{multinomial_pmf_estimate, multinomial_pmf_vector, PmfEstimate};
pub use rc::{rc_distributional, rc_distributional_with_t, rc_match_t, solve_monotone, solve_monotone_near, RcMatch};
pub use variance::{asymptotic_variance_from, asymptotic_variance_oracle};
pub use vy::vy_ate_infeasible;

use crate::dgp::Sample;
use crate::error::{Error, Result};
use crate::num::{build_y_grid, default_y_grid_size, std_sample, YGrid, WEIGHT_FLOOR};
use serde::{Deserialize, Serialize};
use std::borrow::Cow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// Use the propensity stored with each observation.
    Known,
    /// Re-estimate P(z) by kernel regression of D on Z.
    Estimated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Outcome grid size; `None` means ceil(n / 50), at least 5.
    pub y_grid_size: Option<usize>,
    /// Fixed outcome grid range; `None` uses the 2.5% and 97.5% quantiles.
    pub y_grid_range: Option<(f64, f64)>,
    pub p_grid_size: usize,
    pub bandwidth_scale: f64,
    pub trim_c: f64,
    pub trim_c0: f64,
    pub propensity_mode: PropensityMode,
    /// Maximum number of propensity pairs averaged in t-hat; `None` uses all.
    pub pair_cap: Option<usize>,
    /// Midpoint nodes per unit length of u in analytic integrals.
    pub quadrature_m: usize,
    /// Seed for any randomness inside an estimator (pair subsampling).
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            y_grid_size: None,
            y_grid_range: None,
            p_grid_size: 10,
            bandwidth_scale: 1.0,
            trim_c: 0.05,
            trim_c0: 0.05,
            propensity_mode: PropensityMode::Known,
            pair_cap: Some(500),
            quadrature_m: 200,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if matches!(self.y_grid_size, Some(k) if k < 2) {
            return bad("y_grid_size must be at least 2");
        }
        if let Some((lo, hi)) = self.y_grid_range {
            if !(hi > lo) {
                return bad("y_grid_range must have lo < hi");
            }
        }
        if self.p_grid_size < 2 {
            return bad("p_grid_size must be at least 2");
        }
        if !(self.bandwidth_scale > 0.0 && self.bandwidth_scale.is_finite()) {
            return bad("bandwidth_scale must be positive");
        }
        if !(self.trim_c > 0.0) {
            return bad("trim_c must be positive");
        }
        if !(self.trim_c0 > 0.0 && self.trim_c0 < 0.5) {
            return bad("trim_c0 must lie in (0, 0.5)");
        }
        if matches!(self.pair_cap, Some(0)) {
            return bad("pair_cap must be positive");
        }
        if self.quadrature_m == 0 {
            return bad("quadrature_m must be positive");
        }
        Ok(())
    }

    pub(crate) fn y_grid(&self, sample: &Sample) -> Result<YGrid> {
        let size = self.y_grid_size.unwrap_or_else(|| default_y_grid_size(sample.len()));
        match self.y_grid_range {
            Some((lo, hi)) => YGrid::linspace(lo, hi, size),
            None => build_y_grid(&sample.ys(), size),
        }
    }

    /// Bandwidth for standardized second-stage regressors.
    pub(crate) fn second_stage_bandwidth(&self, n: usize) -> f64 {
        self.bandwidth_scale * (n as f64).powf(-0.2)
    }
}

/// Point estimate with the number of units used and dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub used: usize,
    pub dropped: usize,
}

impl Estimate {
    pub fn drop_fraction(&self) -> f64 {
        let total = self.used + self.dropped;
        if total == 0 {
            0.0
        } else {
            self.dropped as f64 / total as f64
        }
    }
}

/// Applies the configured propensity mode, re-estimating P when requested.
pub fn prepare_sample<'a>(sample: &'a Sample, cfg: &EstimatorConfig) -> Result<Cow<'a, Sample>> {
    match cfg.propensity_mode {
        PropensityMode::Known => Ok(Cow::Borrowed(sample)),
        PropensityMode::Estimated => {
            let zs: Vec<f64> = sample.observations.iter().map(|o| o.z).collect();
            let sd = std_sample(&zs);
            if !(sd > 0.0) {
                return Err(Error::Degenerate("instrument has no variation".into()));
            }
            let h = 1.06 * sd * (sample.len() as f64).powf(-0.2);
            let mut out = sample.clone();
            for (k, o) in out.observations.iter_mut().enumerate() {
                let mut num = 0.0;
                let mut den = 0.0;
                for s in &sample.observations {
                    let u = (zs[k] - s.z) / h;
                    let w = (-0.5 * u * u).exp();
                    num += w * s.d as f64;
                    den += w;
                }
                if !(den >= WEIGHT_FLOOR) {
                    return Err(Error::EmptyNeighborhood(den));
                }
                o.p = (num / den).clamp(1e-6, 1.0 - 1e-6);
            }
            Ok(Cow::Owned(out))
        }
    }
}
