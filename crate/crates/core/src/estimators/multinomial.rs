//! Distribution of a categorical potential outcome over a covariate region.

use super::ckt::ckt_core;
use super::{prepare_sample, Estimate, EstimatorConfig};
use crate::dgp::{Region, Sample};
use crate::error::{Error, Result};
use crate::hfunc::{HContext, OutcomeEvent};
use serde::{Deserialize, Serialize};

/// Estimated Pr{Y_arm = j | X in region} for j = 0, 1, 2. The j = 0 cell is
/// the complement of the other two.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfEstimate {
    pub probs: [f64; 3],
    pub used: usize,
    pub dropped: usize,
}

pub fn multinomial_pmf_vector(
    sample: &Sample,
    ctx: &HContext,
    arm: u8,
    region: &Region,
    cfg: &EstimatorConfig,
) -> Result<PmfEstimate> {
    cfg.validate()?;
    if arm > 1 {
        return Err(Error::Domain(format!("arm must be 0 or 1, got {arm}")));
    }
    let sample = prepare_sample(sample, cfg)?;
    if !sample.observations.iter().any(|o| region.contains(&o.x)) {
        return Err(Error::Undefined("no unit has covariates in the region".into()));
    }
    let columns: Vec<Vec<f64>> = (1..=2)
        .map(|j| sample.observations.iter().map(|o| f64::from(o.y == j as f64)).collect())
        .collect();
    let events = vec![OutcomeEvent::Equals(1), OutcomeEvent::Equals(2)];
    let (v, used, dropped) = ckt_core(&sample, ctx, cfg, arm, events, &columns, &|o| region.contains(&o.x))?;
    Ok(PmfEstimate { probs: [1.0 - v[0] - v[1], v[0], v[1]], used, dropped })
}

pub fn multinomial_pmf_estimate(
    sample: &Sample,
    ctx: &HContext,
    arm: u8,
    j: usize,
    region: &Region,
    cfg: &EstimatorConfig,
) -> Result<Estimate> {
    if j > 2 {
        return Err(Error::Domain(format!("category {j} outside 0..=2")));
    }
    let v = multinomial_pmf_vector(sample, ctx, arm, region, cfg)?;
    Ok(Estimate { value: v.probs[j], used: v.used, dropped: v.dropped })
}
