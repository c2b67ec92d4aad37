//! Matching on h-profiles: impute the missing potential outcome of a unit by
//! kernel regression over same-arm donors, weighting by the profile distance
//! and by closeness in the propensity.

use super::{prepare_sample, Estimate, EstimatorConfig};
use crate::dgp::{Observation, Sample};
use crate::error::{Error, Result};
use crate::hfunc::{profile_distance, HContext, HProfile, OutcomeEvent, PGrid, ProfileBuilder};
use crate::num::{std_pop, WEIGHT_FLOOR};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub target_index: usize,
    pub imputed_outcome: f64,
    pub effective_weight_mass: f64,
}

/// Donor pool and profiles for imputing potential outcome `arm`.
///
/// A unit with D != arm has its own h_arm profile compared against the
/// h_{1-arm} profiles of donors that share its treatment status.
pub(crate) struct Matcher {
    arm: u8,
    n: usize,
    donors: Vec<usize>,
    donor_profiles: Vec<HProfile>,
    donor_p: Vec<f64>,
    sd_p: f64,
    event_weights: Vec<f64>,
    k: usize,
    h: f64,
}

impl Matcher {
    pub(crate) fn new(
        sample: &Sample,
        builder: &ProfileBuilder<'_>,
        arm: u8,
        cfg: &EstimatorConfig,
    ) -> Result<Matcher> {
        let mut donors = Vec::new();
        let mut donor_profiles = Vec::new();
        for (j, o) in sample.observations.iter().enumerate() {
            if o.d == arm {
                continue;
            }
            if let Some(pr) = builder.profile(1 - arm, &o.x)? {
                donors.push(j);
                donor_profiles.push(pr);
            }
        }
        let donor_p: Vec<f64> = donors.iter().map(|&j| sample.observations[j].p).collect();
        let sd_p = if donor_p.is_empty() { 0.0 } else { std_pop(&donor_p) };
        Ok(Matcher {
            arm,
            n: sample.len(),
            donors,
            donor_profiles,
            donor_p,
            sd_p,
            event_weights: vec![1.0; builder.events().len()],
            k: builder.grid().len(),
            h: cfg.second_stage_bandwidth(sample.len()),
        })
    }

    /// Kernel weights over donors for a target with profile `target` and
    /// propensity `p`. The distance regressor is evaluated at the smallest
    /// attained distance.
    pub(crate) fn weights(&self, target: &HProfile, p: f64, out: &mut Vec<f64>) -> Result<f64> {
        if self.donors.is_empty() {
            return Err(Error::EmptyNeighborhood(0.0));
        }
        out.clear();
        out.extend(self.donor_profiles.iter().map(|b| profile_distance(target, b, &self.event_weights, self.k)));
        let sd_d = std_pop(out);
        let d_min = out.iter().cloned().fold(f64::INFINITY, f64::min);
        let hd = sd_d * self.h;
        let hp = self.sd_p * self.h;
        let mut total = 0.0;
        for (w, &pj) in out.iter_mut().zip(&self.donor_p) {
            let mut q = 0.0;
            if hd > 0.0 {
                let u = (*w - d_min) / hd;
                q += u * u;
            }
            if hp > 0.0 {
                let u = (pj - p) / hp;
                q += u * u;
            }
            *w = (-0.5 * q).exp();
            total += *w;
        }
        if !(total >= WEIGHT_FLOOR) {
            return Err(Error::EmptyNeighborhood(total));
        }
        Ok(total)
    }

    pub(crate) fn donors(&self) -> &[usize] {
        &self.donors
    }

    #[allow(dead_code)]
    pub(crate) fn sample_size(&self) -> usize {
        self.n
    }

    pub(crate) fn arm(&self) -> u8 {
        self.arm
    }
}

pub(crate) fn y_events(sample: &Sample, cfg: &EstimatorConfig) -> Result<Vec<OutcomeEvent>> {
    Ok(cfg.y_grid(sample)?.points.into_iter().map(OutcomeEvent::AtMost).collect())
}

/// Averages D_arm * col + (1 - D_arm) * imputed col over included units, for
/// every column at once. Returns (means, used, dropped).
pub(crate) fn ckt_core(
    sample: &Sample,
    ctx: &HContext,
    cfg: &EstimatorConfig,
    arm: u8,
    events: Vec<OutcomeEvent>,
    columns: &[Vec<f64>],
    include: &dyn Fn(&Observation) -> bool,
) -> Result<(Vec<f64>, usize, usize)> {
    let grid = PGrid::new(cfg.trim_c0, cfg.p_grid_size)?;
    let builder = ProfileBuilder::new(ctx, events, grid, cfg.trim_c)?;
    let needs_matching = sample.observations.iter().any(|o| o.d != arm && include(o));
    let matcher = if needs_matching { Some(Matcher::new(sample, &builder, arm, cfg)?) } else { None };
    let nc = columns.len();
    let mut sums = vec![0.0; nc];
    let mut used = 0usize;
    let mut dropped = 0usize;
    let mut w = Vec::new();
    for (i, o) in sample.observations.iter().enumerate() {
        if !include(o) {
            continue;
        }
        if o.d == arm {
            for c in 0..nc {
                sums[c] += columns[c][i];
            }
            used += 1;
            continue;
        }
        let m = matcher.as_ref().expect("matcher exists when a unit needs imputation");
        let Some(target) = builder.profile(arm, &o.x)? else {
            dropped += 1;
            continue;
        };
        match m.weights(&target, o.p, &mut w) {
            Ok(total) => {
                for c in 0..nc {
                    let col = &columns[c];
                    let s: f64 = m.donors().iter().zip(&w).map(|(&j, wj)| wj * col[j]).sum();
                    sums[c] += s / total;
                }
                used += 1;
            }
            Err(Error::EmptyNeighborhood(_)) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Undefined(format!("no unit could be imputed ({dropped} dropped)")));
    }
    Ok((sums.into_iter().map(|s| s / used as f64).collect(), used, dropped))
}

/// Imputes the unobserved potential outcome of unit `i`: Y1 when D_i = 0,
/// Y0 when D_i = 1.
pub fn ckt_impute_outcome(sample: &Sample, ctx: &HContext, i: usize, cfg: &EstimatorConfig) -> Result<MatchResult> {
    cfg.validate()?;
    let sample = prepare_sample(sample, cfg)?;
    let o = sample
        .observations
        .get(i)
        .ok_or_else(|| Error::Domain(format!("unit {i} out of range")))?;
    let arm = 1 - o.d;
    let grid = PGrid::new(cfg.trim_c0, cfg.p_grid_size)?;
    let builder = ProfileBuilder::new(ctx, y_events(&sample, cfg)?, grid, cfg.trim_c)?;
    let matcher = Matcher::new(&sample, &builder, arm, cfg)?;
    debug_assert_eq!(matcher.arm(), arm);
    let target = builder
        .profile(arm, &o.x)?
        .ok_or_else(|| Error::MatchFailed(format!("unit {i} is outside the trimmed support")))?;
    let mut w = Vec::new();
    let total = matcher.weights(&target, o.p, &mut w).map_err(|e| match e {
        Error::EmptyNeighborhood(_) => Error::MatchFailed(format!("no donor near unit {i}")),
        other => other,
    })?;
    let value: f64 = matcher.donors().iter().zip(&w).map(|(&j, wj)| wj * sample.observations[j].y).sum::<f64>() / total;
    Ok(MatchResult { target_index: i, imputed_outcome: value, effective_weight_mass: total })
}

/// Mean of D Y + (1 - D) Y1-hat: the estimate of E[Y1].
pub fn ckt_ate(sample: &Sample, ctx: &HContext, cfg: &EstimatorConfig) -> Result<Estimate> {
    ckt_conditional_ate(sample, ctx, &|_| true, cfg)
}

/// E[Y1 | X in A], averaging over units with X in A.
pub fn ckt_conditional_ate(
    sample: &Sample,
    ctx: &HContext,
    a: &dyn Fn(&[f64]) -> bool,
    cfg: &EstimatorConfig,
) -> Result<Estimate> {
    cfg.validate()?;
    let sample = prepare_sample(sample, cfg)?;
    if sample.is_empty() {
        return Err(Error::Undefined("empty sample".into()));
    }
    if !sample.observations.iter().any(|o| a(&o.x)) {
        return Err(Error::Undefined("no unit has covariates in the conditioning set".into()));
    }
    let ys = vec![sample.ys()];
    let events = if sample.observations.iter().any(|o| o.d == 0) {
        y_events(&sample, cfg)?
    } else {
        vec![OutcomeEvent::AtMost(0.0)]
    };
    let (v, used, dropped) = ckt_core(&sample, ctx, cfg, 1, events, &ys, &|o| a(&o.x))?;
    Ok(Estimate { value: v[0], used, dropped })
}
