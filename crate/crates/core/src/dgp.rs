//! Simulation designs, seeded substreams and ground-truth oracles.

use crate::error::{Error, Result};
use crate::num::{midpoint_integrate, norm_cdf, norm_inv_cdf, norm_pdf};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Scale of a unit-variance Gumbel, sqrt(6)/pi.
pub const GUMBEL_UNIT_SCALE: f64 = 0.779_696_801_233_676_1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Design1,
    Design2,
    Design3,
    RandomCoef,
    Multinomial,
}

impl DesignKind {
    pub fn parse(s: &str) -> Result<DesignKind> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "design1" | "d1" => DesignKind::Design1,
            "design2" | "d2" => DesignKind::Design2,
            "design3" | "d3" => DesignKind::Design3,
            "random_coef" | "randomcoef" | "rc" => DesignKind::RandomCoef,
            "multinomial" | "mn" => DesignKind::Multinomial,
            other => return Err(Error::Config(format!("unknown design kind '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DesignKind::Design1 => "design1",
            DesignKind::Design2 => "design2",
            DesignKind::Design3 => "design3",
            DesignKind::RandomCoef => "random_coef",
            DesignKind::Multinomial => "multinomial",
        }
    }

    pub fn covariate_dim(&self) -> usize {
        match self {
            DesignKind::Multinomial => 2,
            _ => 1,
        }
    }

    /// Designs whose outcome error is normal given the selection error.
    pub fn is_normal_family(&self) -> bool {
        !matches!(self, DesignKind::Multinomial)
    }
}

/// Intercepts and slopes per arm. Index `[d]` for the random-coefficient
/// block, `[d][j - 1]` for the multinomial indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub rc_alpha: [f64; 2],
    pub rc_beta: [f64; 2],
    pub mn_alpha: [[f64; 2]; 2],
    pub mn_beta: [[f64; 2]; 2],
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            rc_alpha: [0.0, 1.0],
            rc_beta: [1.0, 2.0],
            mn_alpha: [[0.0, 1.0], [1.0, 2.0]],
            mn_beta: [[0.8, 1.0], [1.0, 2.0]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub kind: DesignKind,
    pub rho_v: f64,
    pub delta: f64,
    pub coefficients: Coefficients,
}

impl DesignSpec {
    pub fn new(kind: DesignKind) -> Self {
        DesignSpec { kind, rho_v: 0.0, delta: 0.25, coefficients: Coefficients::default() }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho_v = rho;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho_v) {
            return Err(Error::Config(format!("rho_v = {} must lie in [0, 1)", self.rho_v)));
        }
        if !self.delta.is_finite() {
            return Err(Error::Config("delta must be finite".into()));
        }
        Ok(())
    }

    fn sigma(&self) -> f64 {
        (1.0 - self.rho_v * self.rho_v).sqrt()
    }

    /// Multinomial index v_j(x, d) for j = 1, 2; v_0 = 0.
    pub fn mn_index(&self, x: &[f64], d: u8, j: usize) -> f64 {
        let c = &self.coefficients;
        c.mn_alpha[d as usize][j - 1] + x[j - 1] * c.mn_beta[d as usize][j - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Outcome, or the category label 0/1/2 in the multinomial design.
    pub y: f64,
    pub d: u8,
    pub x: Vec<f64>,
    pub z: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub observations: Vec<Observation>,
    pub design: DesignSpec,
    pub seed: u64,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.observations.first().map_or(self.design.kind.covariate_dim(), |o| o.x.len())
    }

    pub fn ys(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.y).collect()
    }

    pub fn treated_count(&self) -> usize {
        self.observations.iter().filter(|o| o.d == 1).count()
    }

    /// Write `y,d,x1[,x2],z,p`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let dim = self.covariate_dim();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["y".to_string(), "d".to_string()];
        header.extend((1..=dim).map(|k| format!("x{k}")));
        header.push("z".into());
        header.push("p".into());
        wr.write_record(&header)?;
        for o in &self.observations {
            let mut rec = vec![o.y.to_string(), o.d.to_string()];
            rec.extend(o.x.iter().map(|v| v.to_string()));
            rec.push(o.z.to_string());
            rec.push(o.p.to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Read a sample written by [`Sample::write_csv`]. The design is only
    /// metadata here; analytic contexts still take it from the caller.
    pub fn read_csv(path: &Path, design: DesignSpec) -> Result<Sample> {
        let mut rd = csv::Reader::from_path(path)?;
        let headers = rd.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (iy, id, iz, ip) = match (col("y"), col("d"), col("z"), col("p")) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(Error::Config("sample csv needs columns y,d,x1[,x2],z,p".into())),
        };
        let mut xcols = Vec::new();
        while let Some(c) = col(&format!("x{}", xcols.len() + 1)) {
            xcols.push(c);
        }
        if xcols.is_empty() {
            return Err(Error::Config("sample csv has no covariate column x1".into()));
        }
        let num = |rec: &csv::StringRecord, k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("bad number in column {k}")))
        };
        let mut observations = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let d = num(&rec, id)?;
            if d != 0.0 && d != 1.0 {
                return Err(Error::Config(format!("treatment must be 0 or 1, got {d}")));
            }
            let p = num(&rec, ip)?;
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("propensity {p} outside (0, 1)")));
            }
            observations.push(Observation {
                y: num(&rec, iy)?,
                d: d as u8,
                x: xcols.iter().map(|&k| num(&rec, k)).collect::<Result<_>>()?,
                z: num(&rec, iz)?,
                p,
            });
        }
        if observations.is_empty() {
            return Err(Error::Config("sample csv has no rows".into()));
        }
        Ok(Sample { observations, design, seed: 0 })
    }
}

/// splitmix64 finalizer, used to derive independent seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a keyed child stream.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(seed), |acc, k| mix64(acc ^ mix64(*k)))
}

/// Independent substream `index` of the generator keyed by `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform on the open interval (0, 1).
#[inline]
pub fn open_uniform<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

#[inline]
pub fn std_normal<R: RngCore>(rng: &mut R) -> f64 {
    norm_inv_cdf(open_uniform(rng))
}

/// (eps, u) standard bivariate normal with correlation rho.
pub fn draw_correlated_normal_pair<R: RngCore>(rho: f64, rng: &mut R) -> Result<(f64, f64)> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Domain(format!("|rho| = {} must be < 1", rho.abs())));
    }
    let u = std_normal(rng);
    let xi = std_normal(rng);
    Ok((rho * u + (1.0 - rho * rho).sqrt() * xi, u))
}

/// Gumbel draw with unit variance and the requested mean.
pub fn draw_unit_variance_gumbel<R: RngCore>(target_mean: f64, rng: &mut R) -> f64 {
    let g = -(-open_uniform(rng).ln()).ln();
    target_mean - EULER_GAMMA * GUMBEL_UNIT_SCALE + GUMBEL_UNIT_SCALE * g
}

fn draw_unit<R: RngCore>(design: &DesignSpec, rng: &mut R) -> Observation {
    let rho = design.rho_v;
    let sig = design.sigma();
    match design.kind {
        DesignKind::Design1 | DesignKind::Design2 | DesignKind::Design3 => {
            let x = std_normal(rng);
            let z = std_normal(rng);
            let u = std_normal(rng);
            let eps = rho * u + sig * std_normal(rng);
            let d = u8::from(z - u > 0.0);
            let df = d as f64;
            let y = match design.kind {
                DesignKind::Design1 => x + 0.5 * df + eps,
                DesignKind::Design2 => x + 0.5 * df + (x + df) * eps,
                _ => {
                    let a = x + 0.5 * df + eps;
                    a * a
                }
            };
            Observation { y, d, x: vec![x], z, p: norm_cdf(z) }
        }
        DesignKind::RandomCoef => {
            let x = std_normal(rng);
            let z = std_normal(rng);
            let u = std_normal(rng);
            let xi = [std_normal(rng), std_normal(rng)];
            let slope = [std_normal(rng), std_normal(rng)];
            let d = u8::from(z - u > 0.0) as usize;
            let c = &design.coefficients;
            let eta = rho * u + sig * xi[d];
            let y = c.rc_alpha[d] + eta + x * (c.rc_beta[d] + slope[d]);
            Observation { y, d: d as u8, x: vec![x], z, p: norm_cdf(z) }
        }
        DesignKind::Multinomial => {
            let x = vec![std_normal(rng), std_normal(rng)];
            let z = open_uniform(rng);
            let u = open_uniform(rng);
            let d = u8::from(u < z);
            let mut best = (0usize, draw_unit_variance_gumbel(0.0, rng));
            for j in 1..=2 {
                let e = draw_unit_variance_gumbel(j as f64 * design.delta * u, rng);
                let util = design.mn_index(&x, d, j) + e;
                if util > best.1 {
                    best = (j, util);
                }
            }
            Observation { y: best.0 as f64, d, x, z, p: z }
        }
    }
}

/// Draw `n` units; unit i uses substream i of the sample seed.
pub fn simulate_design(design: &DesignSpec, n: usize, seed: u64) -> Result<Sample> {
    design.validate()?;
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let observations = (0..n)
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            draw_unit(design, &mut rng)
        })
        .collect();
    Ok(Sample { observations, design: design.clone(), seed })
}

pub fn propensity_truth(design: &DesignSpec, z: f64) -> f64 {
    match design.kind {
        DesignKind::Multinomial => z,
        _ => norm_cdf(z),
    }
}

/// Box of covariate values, inclusive on both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Region {
    pub fn unit_box(dim: usize) -> Region {
        Region { lo: vec![-1.0; dim], hi: vec![1.0; dim] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// E[Y1].
    MeanTreated,
    /// Pr{Y1 <= y}.
    TreatedCdf { y: f64 },
    /// Pr{Y_arm = category | X in region}.
    Pmf { arm: u8, category: usize, region: Region },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub monte_carlo: f64,
    pub std_error: f64,
    pub exact: Option<f64>,
}

impl OracleValue {
    pub fn best(&self) -> f64 {
        self.exact.unwrap_or(self.monte_carlo)
    }
}

/// Potential outcome Y_d for one counterfactual draw; `None` when the draw
/// falls outside the estimand's conditioning region.
fn counterfactual_draw<R: RngCore>(design: &DesignSpec, estimand: &Estimand, rng: &mut R) -> Option<f64> {
    let rho = design.rho_v;
    let sig = design.sigma();
    match (design.kind, estimand) {
        (DesignKind::Multinomial, Estimand::Pmf { arm, category, region }) => {
            let x = vec![std_normal(rng), std_normal(rng)];
            if !region.contains(&x) {
                return None;
            }
            let u = open_uniform(rng);
            let mut best = (0usize, draw_unit_variance_gumbel(0.0, rng));
            for j in 1..=2 {
                let util = design.mn_index(&x, *arm, j) + draw_unit_variance_gumbel(j as f64 * design.delta * u, rng);
                if util > best.1 {
                    best = (j, util);
                }
            }
            Some(f64::from(best.0 == *category))
        }
        (DesignKind::RandomCoef, Estimand::TreatedCdf { y }) => {
            let x = std_normal(rng);
            let u = std_normal(rng);
            let c = &design.coefficients;
            let y1 = c.rc_alpha[1] + rho * u + sig * std_normal(rng) + x * (c.rc_beta[1] + std_normal(rng));
            Some(f64::from(y1 <= *y))
        }
        (_, Estimand::MeanTreated) => {
            let x = std_normal(rng);
            let u = std_normal(rng);
            let eps = rho * u + sig * std_normal(rng);
            Some(match design.kind {
                DesignKind::Design1 => x + 0.5 + eps,
                DesignKind::Design2 => x + 0.5 + (x + 1.0) * eps,
                DesignKind::Design3 => (x + 0.5 + eps).powi(2),
                DesignKind::RandomCoef => {
                    let c = &design.coefficients;
                    c.rc_alpha[1] + eps + x * (c.rc_beta[1] + std_normal(rng))
                }
                DesignKind::Multinomial => unreachable!(),
            })
        }
        _ => unreachable!(),
    }
}

fn check_estimand(design: &DesignSpec, estimand: &Estimand) -> Result<()> {
    let ok = match (design.kind, estimand) {
        (DesignKind::Multinomial, Estimand::Pmf { arm, category, region }) => {
            *arm <= 1 && *category <= 2 && region.lo.len() == 2 && region.hi.len() == 2
        }
        (DesignKind::Multinomial, _) | (_, Estimand::Pmf { .. }) => false,
        (DesignKind::RandomCoef, Estimand::TreatedCdf { .. }) => true,
        (_, Estimand::TreatedCdf { .. }) => false,
        (_, Estimand::MeanTreated) => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("estimand {estimand:?} is not supported for {}", design.kind.name())))
    }
}

/// Closed form (or deterministic quadrature) where one is available.
pub fn exact_value(design: &DesignSpec, estimand: &Estimand) -> Result<Option<f64>> {
    check_estimand(design, estimand)?;
    Ok(match (design.kind, estimand) {
        (DesignKind::Design1 | DesignKind::Design2, Estimand::MeanTreated) => Some(0.5),
        // E(X + 0.5 + eps)^2 = Var X + Var eps + 0.25
        (DesignKind::Design3, Estimand::MeanTreated) => Some(2.25),
        (DesignKind::RandomCoef, Estimand::MeanTreated) => Some(design.coefficients.rc_alpha[1]),
        (DesignKind::RandomCoef, Estimand::TreatedCdf { y }) => {
            // Y1 | X=x ~ N(a1 + b1 x, 1 + x^2); integrate over x on a wide grid.
            let c = &design.coefficients;
            let f = |x: f64| norm_pdf(x) * norm_cdf((y - c.rc_alpha[1] - c.rc_beta[1] * x) / (1.0 + x * x).sqrt());
            Some(midpoint_integrate(f, -9.0, 9.0, 20_000)?)
        }
        (DesignKind::Multinomial, Estimand::Pmf { arm, category, region }) => {
            Some(multinomial_region_pmf(design, *arm, *category, region, 160, 80)?)
        }
        _ => None,
    })
}

/// Choice probabilities given (x, d, U = u), integrated over the Gumbel errors.
pub fn multinomial_choice_probs(design: &DesignSpec, x: &[f64], d: u8, u: f64) -> [f64; 3] {
    let b = GUMBEL_UNIT_SCALE;
    let l1 = (design.mn_index(x, d, 1) + design.delta * u) / b;
    let l2 = (design.mn_index(x, d, 2) + 2.0 * design.delta * u) / b;
    let m = l1.max(l2).max(0.0);
    let e0 = (-m).exp();
    let e1 = (l1 - m).exp();
    let e2 = (l2 - m).exp();
    let s = e0 + e1 + e2;
    [e0 / s, e1 / s, e2 / s]
}

/// Pr{Y_d = j | X in box} by midpoint quadrature over the box (truncated
/// normal weights) and over u.
fn multinomial_region_pmf(design: &DesignSpec, d: u8, j: usize, region: &Region, mx: usize, mu: usize) -> Result<f64> {
    let nodes = |lo: f64, hi: f64| -> Vec<(f64, f64)> {
        let step = (hi - lo) / mx as f64;
        (0..mx)
            .map(|k| {
                let x = lo + (k as f64 + 0.5) * step;
                (x, norm_pdf(x) * step)
            })
            .collect()
    };
    let a = nodes(region.lo[0].max(-9.0), region.hi[0].min(9.0));
    let b = nodes(region.lo[1].max(-9.0), region.hi[1].min(9.0));
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x1, w1) in &a {
        for &(x2, w2) in &b {
            let w = w1 * w2;
            let x = [x1, x2];
            let p = midpoint_integrate(|u| multinomial_choice_probs(design, &x, d, u)[j], 0.0, 1.0, mu)?;
            num += w * p;
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(Error::Config("empty conditioning region".into()));
    }
    Ok(num / den)
}

/// Brute-force ground truth with exogenous treatment, plus a closed form
/// where available.
pub fn true_value_oracle(design: &DesignSpec, estimand: &Estimand, draws: usize, seed: u64) -> Result<OracleValue> {
    design.validate()?;
    check_estimand(design, estimand)?;
    if draws == 0 {
        return Err(Error::Config("oracle needs at least one draw".into()));
    }
    const CHUNK: usize = 1 << 16;
    let chunks = draws.div_ceil(CHUNK);
    let parts: Vec<(f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(derive_seed(seed, &[0x0bac1e]), c as u64);
            let len = CHUNK.min(draws - c * CHUNK);
            let (mut s, mut s2, mut k) = (0.0, 0.0, 0usize);
            for _ in 0..len {
                if let Some(v) = counterfactual_draw(design, estimand, &mut rng) {
                    s += v;
                    s2 += v * v;
                    k += 1;
                }
            }
            (s, s2, k)
        })
        .collect();
    let (s, s2, k) = parts.iter().fold((0.0, 0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if k < 2 {
        return Err(Error::Undefined("too few oracle draws landed in the conditioning region".into()));
    }
    let m = s / k as f64;
    let var = (s2 / k as f64 - m * m).max(0.0) * k as f64 / (k - 1) as f64;
    Ok(OracleValue { monte_carlo: m, std_error: (var / k as f64).sqrt(), exact: exact_value(design, estimand)? })
}

/// E[Y | X = x, D = d, U = u] on the selection margin, u the uniform rank.
/// Only defined for the normal-error designs.
pub fn margin_mean(design: &DesignSpec, d: u8, x: f64, u: f64) -> Result<f64> {
    let rs = design.rho_v * norm_inv_cdf(u);
    let df = d as f64;
    Ok(match design.kind {
        DesignKind::Design1 => x + 0.5 * df + rs,
        DesignKind::Design2 => x + 0.5 * df + (x + df) * rs,
        DesignKind::Design3 => {
            let c = x + 0.5 * df + rs;
            c * c + 1.0 - design.rho_v * design.rho_v
        }
        DesignKind::RandomCoef => {
            let c = &design.coefficients;
            c.rc_alpha[d as usize] + x * c.rc_beta[d as usize] + rs
        }
        DesignKind::Multinomial => {
            return Err(Error::UnsupportedMode("margin mean is not defined for the multinomial design".into()))
        }
    })
}

/// Raw moments E[U^k], k = 0..=4, of a standard normal truncated to
/// U < a (`below`) or U > a.
fn truncated_normal_moments(a: f64, below: bool) -> [f64; 5] {
    let mut m = [0.0; 5];
    m[0] = 1.0;
    // hazard-type ratio with the sign folded in
    let r = if below { -norm_pdf(a) / norm_cdf(a) } else { norm_pdf(a) / norm_cdf(-a) };
    let mut apow = 1.0;
    for k in 1..5 {
        let prev2 = if k >= 2 { m[k - 2] } else { 0.0 };
        m[k] = (k - 1) as f64 * prev2 + apow * r;
        apow *= a;
    }
    m
}

/// Mean and variance of Y1 given X = x, P = p and D = d, for the
/// normal-error designs.
pub fn treated_outcome_moments(design: &DesignSpec, x: f64, p: f64, d: u8) -> Result<(f64, f64)> {
    let rho = design.rho_v;
    let sig2 = 1.0 - rho * rho;
    let a = norm_inv_cdf(p);
    let mu = truncated_normal_moments(a, d == 1);
    // moments of eps = rho U + sigma xi; xi moments are 1, 0, 1, 0, 3
    let xi = [1.0, 0.0, sig2, 0.0, 3.0 * sig2 * sig2];
    let binom = [[1.0, 0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0, 0.0], [1.0, 3.0, 3.0, 1.0, 0.0], [1.0, 4.0, 6.0, 4.0, 1.0]];
    let mut e = [0.0; 5];
    for k in 0..5 {
        for i in 0..=k {
            e[k] += binom[k][i] * rho.powi(i as i32) * mu[i] * xi[k - i];
        }
    }
    let var_eps = (e[2] - e[1] * e[1]).max(0.0);
    Ok(match design.kind {
        DesignKind::Design1 => (x + 0.5 + e[1], var_eps),
        DesignKind::Design2 => (x + 0.5 + (x + 1.0) * e[1], (x + 1.0).powi(2) * var_eps),
        DesignKind::Design3 => {
            let c = x + 0.5;
            let m1 = c * c + 2.0 * c * e[1] + e[2];
            let m2 = c.powi(4) + 4.0 * c.powi(3) * e[1] + 6.0 * c * c * e[2] + 4.0 * c * e[3] + e[4];
            (m1, (m2 - m1 * m1).max(0.0))
        }
        DesignKind::RandomCoef => {
            let c = &design.coefficients;
            (c.rc_alpha[1] + c.rc_beta[1] * x + e[1], var_eps + x * x)
        }
        DesignKind::Multinomial => {
            return Err(Error::UnsupportedMode("outcome moments are not defined for the multinomial design".into()))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
    }

    #[test]
    fn correlated_pairs() {
        for rho in [0.0, 0.5] {
            let mut rng = substream(17, 0);
            let draws: Vec<(f64, f64)> =
                (0..1_000_000).map(|_| draw_correlated_normal_pair(rho, &mut rng).unwrap()).collect();
            let e: Vec<f64> = draws.iter().map(|d| d.0).collect();
            let u: Vec<f64> = draws.iter().map(|d| d.1).collect();
            assert!((corr(&e, &u) - rho).abs() < 0.005);
            for v in [&e, &u] {
                let (m, s2) = mean_var(v);
                assert!(m.abs() < 0.005 && (s2 - 1.0).abs() < 0.01, "{m} {s2}");
            }
        }
        assert!(draw_correlated_normal_pair(1.0, &mut substream(1, 0)).is_err());
        assert!(draw_correlated_normal_pair(-1.2, &mut substream(1, 0)).is_err());
    }

    #[test]
    fn gumbel_moments_and_shift() {
        let mut rng = substream(5, 1);
        let g: Vec<f64> = (0..1_000_000).map(|_| draw_unit_variance_gumbel(0.0, &mut rng)).collect();
        let (m, v) = mean_var(&g);
        assert!(m.abs() < 0.005 && (v - 1.0).abs() < 0.01, "{m} {v}");
        let mut rng = substream(5, 2);
        let g2: Vec<f64> = (0..1_000_000).map(|_| draw_unit_variance_gumbel(2.0, &mut rng)).collect();
        assert!((mean_var(&g2).0 - 2.0).abs() < 0.005);
        let a = draw_unit_variance_gumbel(0.0, &mut substream(9, 9));
        let b = draw_unit_variance_gumbel(1.25, &mut substream(9, 9));
        assert!((b - a - 1.25).abs() < 1e-12);
    }

    #[test]
    fn design1_treated_mean_and_share() {
        let s = simulate_design(&DesignSpec::new(DesignKind::Design1), 1_000_000, 3).unwrap();
        let treated: Vec<f64> = s.observations.iter().filter(|o| o.d == 1).map(|o| o.y).collect();
        let m = treated.iter().sum::<f64>() / treated.len() as f64;
        assert!((m - 0.5).abs() < 0.01, "{m}");
        assert!((treated.len() as f64 / 1e6 - 0.5).abs() < 0.005);
    }

    #[test]
    fn treated_share_all_designs() {
        for kind in [DesignKind::Design2, DesignKind::Design3, DesignKind::RandomCoef, DesignKind::Multinomial] {
            let s = simulate_design(&DesignSpec::new(kind).with_rho(0.5), 1_000_000, 8).unwrap();
            let share = s.treated_count() as f64 / 1e6;
            assert!((share - 0.5).abs() < 0.005, "{kind:?} {share}");
        }
    }

    #[test]
    fn multinomial_labels() {
        let s = simulate_design(&DesignSpec::new(DesignKind::Multinomial), 2000, 1).unwrap();
        assert!(s.observations.iter().all(|o| [0.0, 1.0, 2.0].contains(&o.y) && o.x.len() == 2 && o.p == o.z));
    }

    #[test]
    fn determinism() {
        for kind in [DesignKind::Design1, DesignKind::RandomCoef, DesignKind::Multinomial] {
            let d = DesignSpec::new(kind).with_rho(0.25);
            assert_eq!(simulate_design(&d, 50, 42).unwrap(), simulate_design(&d, 50, 42).unwrap());
            assert_ne!(simulate_design(&d, 50, 42).unwrap(), simulate_design(&d, 50, 43).unwrap());
        }
    }

    #[test]
    fn prefix_stability() {
        let d = DesignSpec::new(DesignKind::Design2);
        let a = simulate_design(&d, 10, 4).unwrap();
        let b = simulate_design(&d, 30, 4).unwrap();
        assert_eq!(a.observations[..], b.observations[..10]);
    }

    #[test]
    fn propensity_matches_truth() {
        for kind in [DesignKind::Design1, DesignKind::Multinomial] {
            let design = DesignSpec::new(kind).with_rho(0.5);
            let z = if kind == DesignKind::Multinomial { 0.3 } else { 0.4 };
            let mut rng = substream(77, 0);
            let mut hits = 0usize;
            for _ in 0..1_000_000 {
                let d = if kind == DesignKind::Multinomial {
                    open_uniform(&mut rng) < z
                } else {
                    z - std_normal(&mut rng) > 0.0
                };
                hits += usize::from(d);
            }
            assert!((hits as f64 / 1e6 - propensity_truth(&design, z)).abs() < 0.01);
        }
        let d1 = DesignSpec::new(DesignKind::Design1);
        assert_eq!(propensity_truth(&d1, 0.0), 0.5);
        assert!(propensity_truth(&d1, -0.2) < propensity_truth(&d1, 0.1));
        assert_eq!(propensity_truth(&DesignSpec::new(DesignKind::Multinomial), 0.3), 0.3);
    }

    #[test]
    fn oracle_values() {
        let d1 = DesignSpec::new(DesignKind::Design1);
        let o = true_value_oracle(&d1, &Estimand::MeanTreated, 1_000_000, 1).unwrap();
        assert_eq!(o.exact, Some(0.5));
        assert!((o.monte_carlo - 0.5).abs() < 4.0 * o.std_error);

        let d3 = DesignSpec::new(DesignKind::Design3).with_rho(0.5);
        let o = true_value_oracle(&d3, &Estimand::MeanTreated, 10_000_000, 2).unwrap();
        assert!((o.monte_carlo - 2.25).abs() < 4.0 * o.std_error, "{o:?}");

        let rc = DesignSpec::new(DesignKind::RandomCoef).with_rho(0.5);
        let o = true_value_oracle(&rc, &Estimand::TreatedCdf { y: 1.0 }, 2_000_000, 3).unwrap();
        assert!((o.exact.unwrap() - 0.5).abs() < 1e-9);
        assert!((o.monte_carlo - 0.5).abs() < 4.0 * o.std_error);

        let mn = DesignSpec::new(DesignKind::Multinomial).with_delta(0.25);
        let est = Estimand::Pmf { arm: 1, category: 1, region: Region::unit_box(2) };
        let o = true_value_oracle(&mn, &est, 10_000_000, 4).unwrap();
        assert!((o.monte_carlo - o.exact.unwrap()).abs() < 4.0 * o.std_error, "{o:?}");

        assert!(true_value_oracle(&mn, &Estimand::MeanTreated, 100, 1).is_err());
        assert!(true_value_oracle(&d1, &Estimand::TreatedCdf { y: 0.0 }, 100, 1).is_err());
    }

    #[test]
    fn rc_exogenous_regression_slope() {
        // D independent of (Y0, Y1) when rho = 0: difference in means is E[Y1 - Y0] = 1
        let s = simulate_design(&DesignSpec::new(DesignKind::RandomCoef), 400_000, 12).unwrap();
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
        for o in &s.observations {
            if o.d == 1 {
                s1 += o.y;
                n1 += 1.0;
            } else {
                s0 += o.y;
                n0 += 1.0;
            }
        }
        assert!((s1 / n1 - s0 / n0 - 1.0).abs() < 0.03);
    }

    #[test]
    fn multinomial_zero_delta_matches_softmax() {
        let d = DesignSpec::new(DesignKind::Multinomial).with_delta(0.0);
        let x = [0.3, -0.4];
        let p = multinomial_choice_probs(&d, &x, 1, 0.7);
        let mut rng = substream(6, 0);
        let mut counts = [0usize; 3];
        let reps = 400_000;
        for _ in 0..reps {
            let mut best = (0usize, draw_unit_variance_gumbel(0.0, &mut rng));
            for j in 1..=2 {
                let u = d.mn_index(&x, 1, j) + draw_unit_variance_gumbel(0.0, &mut rng);
                if u > best.1 {
                    best = (j, u);
                }
            }
            counts[best.0] += 1;
        }
        for j in 0..3 {
            let f = counts[j] as f64 / reps as f64;
            assert!((f - p[j]).abs() < 4.0 * (p[j] * (1.0 - p[j]) / reps as f64).sqrt() + 1e-4);
        }
    }

    #[test]
    fn treated_moments_match_simulation() {
        for kind in [DesignKind::Design1, DesignKind::Design2, DesignKind::Design3, DesignKind::RandomCoef] {
            let design = DesignSpec::new(kind).with_rho(0.5);
            let (x, p) = (0.4, 0.3);
            let a = norm_inv_cdf(p);
            for d in [0u8, 1] {
                let (m, v) = treated_outcome_moments(&design, x, p, d).unwrap();
                let mut rng = substream(31, d as u64);
                let mut ys = Vec::new();
                while ys.len() < 300_000 {
                    let u = std_normal(&mut rng);
                    let xi = std_normal(&mut rng);
                    let e = std_normal(&mut rng);
                    if (u < a) != (d == 1) {
                        continue;
                    }
                    let eps = 0.5 * u + (0.75f64).sqrt() * xi;
                    ys.push(match kind {
                        DesignKind::Design1 => x + 0.5 + eps,
                        DesignKind::Design2 => x + 0.5 + (x + 1.0) * eps,
                        DesignKind::Design3 => (x + 0.5 + eps).powi(2),
                        _ => 1.0 + eps + x * (2.0 + e),
                    });
                }
                let (mm, vv) = mean_var(&ys);
                assert!((mm - m).abs() < 0.01 * (1.0 + v.sqrt()), "{kind:?} d={d} {mm} {m}");
                assert!((vv / v - 1.0).abs() < 0.03, "{kind:?} d={d} {vv} {v}");
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let s = simulate_design(&DesignSpec::new(DesignKind::Multinomial), 20, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        s.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("y,d,x1,x2,z,p\n"));
        let back = Sample::read_csv(&path, s.design.clone()).unwrap();
        assert_eq!(back.observations, s.observations);
    }
}
