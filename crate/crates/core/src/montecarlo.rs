//! Replicated simulation studies, table output and run manifests.

use crate::dgp::{derive_seed, exact_value, simulate_design, true_value_oracle, DesignKind, DesignSpec, Estimand, Region, Sample};
use crate::error::{Error, Result};
use crate::estimators::{ckt_ate, multinomial_pmf_vector, rc_distributional, vy_ate_infeasible, EstimatorConfig};
use crate::hfunc::{default_bandwidths, multinomial_bandwidths, HContext};
use crate::num::{summary_stats, summary_stats_vector, Scaling, SummaryRow};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::{Duration, Instant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    /// Profile matching estimate of E[Y1].
    Ckt,
    /// Mean-matching benchmark for E[Y1].
    Vy,
    /// Random-coefficient plug-in for Pr{Y1 <= y}.
    Rc,
    /// Category distribution of Y0 and Y1 over a covariate region.
    Multinomial,
}

impl EstimatorId {
    pub fn parse(s: &str) -> Result<EstimatorId> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "ckt" => EstimatorId::Ckt,
            "vy" => EstimatorId::Vy,
            "rc" => EstimatorId::Rc,
            "multinomial" | "mn" => EstimatorId::Multinomial,
            other => return Err(Error::Config(format!("unknown estimator '{other}' (expected ckt, vy, rc, multinomial)"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorId::Ckt => "ckt",
            EstimatorId::Vy => "vy",
            EstimatorId::Rc => "rc",
            EstimatorId::Multinomial => "multinomial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// h functions from the known design.
    Analytic,
    /// Kernel-estimated h functions.
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub design: DesignSpec,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorId>,
    /// For the multinomial estimator only the region is used; every arm and
    /// category is reported.
    pub estimand: Estimand,
    pub cfg: EstimatorConfig,
    pub context: ContextMode,
    /// Draws for the Monte Carlo truth when no closed form exists.
    pub oracle_draws: usize,
}

impl StudyConfig {
    pub fn new(design: DesignSpec, estimators: Vec<EstimatorId>, estimand: Estimand) -> StudyConfig {
        StudyConfig {
            design,
            sample_sizes: vec![100, 200, 400],
            replications: 401,
            seed: 1,
            estimators,
            estimand,
            cfg: EstimatorConfig::default(),
            context: ContextMode::Analytic,
            oracle_draws: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub design: DesignKind,
    pub rho_v: f64,
    pub delta: f64,
    pub n: usize,
    pub estimator: EstimatorId,
    pub target: String,
    pub true_value: f64,
    pub summary: SummaryRow,
    pub drop_fraction: f64,
    /// Replications in which the estimator failed outright.
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl StudyResult {
    pub fn merge(results: Vec<StudyResult>) -> StudyResult {
        let elapsed = results.iter().map(|r| r.elapsed).sum();
        StudyResult { rows: results.into_iter().flat_map(|r| r.rows).collect(), elapsed }
    }

    pub fn find(&self, estimator: EstimatorId, n: usize, target: &str) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.n == n && r.target == target)
    }
}

fn check_compat(study: &StudyConfig, est: EstimatorId) -> Result<()> {
    let kind = study.design.kind;
    let ok = match est {
        EstimatorId::Ckt | EstimatorId::Vy => kind.is_normal_family() && study.estimand == Estimand::MeanTreated,
        EstimatorId::Rc => kind == DesignKind::RandomCoef && matches!(study.estimand, Estimand::TreatedCdf { .. }),
        EstimatorId::Multinomial => kind == DesignKind::Multinomial && matches!(study.estimand, Estimand::Pmf { .. }),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "estimator {} cannot target {:?} on {}",
            est.name(),
            study.estimand,
            kind.name()
        )))
    }
}

/// One scalar statistic produced by an estimator in each replication.
#[derive(Clone, Debug)]
struct Target {
    estimator: EstimatorId,
    label: String,
    truth: f64,
}

fn pmf_region(estimand: &Estimand) -> Region {
    match estimand {
        Estimand::Pmf { region, .. } => region.clone(),
        _ => Region::unit_box(2),
    }
}

fn truth(study: &StudyConfig, estimand: &Estimand) -> Result<f64> {
    match exact_value(&study.design, estimand)? {
        Some(v) => Ok(v),
        None => Ok(true_value_oracle(&study.design, estimand, study.oracle_draws, derive_seed(study.seed, &[0x7e]))?.best()),
    }
}

fn build_targets(study: &StudyConfig) -> Result<Vec<Target>> {
    let mut out = Vec::new();
    for &est in &study.estimators {
        match est {
            EstimatorId::Ckt | EstimatorId::Vy => {
                out.push(Target { estimator: est, label: "E[Y1]".into(), truth: truth(study, &study.estimand)? })
            }
            EstimatorId::Rc => {
                let y = if let Estimand::TreatedCdf { y } = study.estimand { y } else { unreachable!() };
                out.push(Target { estimator: est, label: format!("Pr{{Y1<={y}}}"), truth: truth(study, &study.estimand)? })
            }
            EstimatorId::Multinomial => {
                let region = pmf_region(&study.estimand);
                for arm in [0u8, 1] {
                    for j in [1usize, 2] {
                        let e = Estimand::Pmf { arm, category: j, region: region.clone() };
                        out.push(Target { estimator: est, label: format!("Pr{{Y{arm}={j}}}"), truth: truth(study, &e)? });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn rep_context(study: &StudyConfig, analytic: &Option<HContext>, sample: &Sample) -> Result<HContext> {
    match (study.context, analytic) {
        (ContextMode::Analytic, Some(ctx)) => Ok(ctx.clone()),
        _ => {
            let bw = if study.design.kind == DesignKind::Multinomial {
                multinomial_bandwidths(sample)
            } else {
                default_bandwidths(sample, study.cfg.bandwidth_scale)
            };
            HContext::empirical(sample, bw)
        }
    }
}

/// Values in target order plus the drop fraction of each estimator; `None`
/// marks an estimator that failed in this replication.
type RepOutput = Vec<Option<(Vec<f64>, f64)>>;

fn run_replication(study: &StudyConfig, analytic: &Option<HContext>, n: usize, r: usize) -> Result<RepOutput> {
    let seed = derive_seed(study.seed, &[n as u64, r as u64]);
    let sample = simulate_design(&study.design, n, seed)?;
    let ctx = rep_context(study, analytic, &sample)?;
    let cfg = EstimatorConfig { seed: derive_seed(seed, &[0xc0f]), ..study.cfg.clone() };
    let mut out = Vec::with_capacity(study.estimators.len());
    for &est in &study.estimators {
        let res = match est {
            EstimatorId::Ckt => ckt_ate(&sample, &ctx, &cfg).map(|e| (vec![e.value], e.drop_fraction())),
            EstimatorId::Vy => vy_ate_infeasible(&sample, &study.design, &cfg).map(|e| (vec![e.value], e.drop_fraction())),
            EstimatorId::Rc => {
                let y = if let Estimand::TreatedCdf { y } = study.estimand { y } else { unreachable!() };
                rc_distributional(&sample, &ctx, y, &cfg).map(|e| (vec![e.value], e.drop_fraction()))
            }
            EstimatorId::Multinomial => {
                let region = pmf_region(&study.estimand);
                let mut vals = Vec::with_capacity(4);
                let mut drops = 0.0;
                let mut res = Ok(());
                for arm in [0u8, 1] {
                    match multinomial_pmf_vector(&sample, &ctx, arm, &region, &cfg) {
                        Ok(v) => {
                            vals.extend_from_slice(&v.probs[1..]);
                            drops += 0.5 * (v.dropped as f64 / (v.used + v.dropped).max(1) as f64);
                        }
                        Err(e) => {
                            res = Err(e);
                            break;
                        }
                    }
                }
                res.map(|_| (vals, drops))
            }
        };
        match res {
            Ok(v) => out.push(Some(v)),
            Err(e @ (Error::Config(_) | Error::UnsupportedMode(_))) => return Err(e),
            Err(e) => {
                log::warn!("{} failed at n={n}, replication {r}: {e}", est.name());
                out.push(None);
            }
        }
    }
    Ok(out)
}

/// Runs every (n, replication) cell and summarizes each estimator target.
/// Rows are bit-identical for a fixed config regardless of thread count.
pub fn run_study(study: &StudyConfig) -> Result<StudyResult> {
    let start = Instant::now();
    study.design.validate()?;
    study.cfg.validate()?;
    if study.replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    if study.sample_sizes.is_empty() || study.sample_sizes.contains(&0) {
        return Err(Error::Config("sample sizes must be a nonempty list of positive counts".into()));
    }
    if study.estimators.is_empty() {
        return Err(Error::Config("no estimators requested".into()));
    }
    for &e in &study.estimators {
        check_compat(study, e)?;
    }
    let targets = build_targets(study)?;
    let analytic = match study.context {
        ContextMode::Analytic => Some(HContext::analytic(study.design.clone(), study.cfg.quadrature_m)?),
        ContextMode::Empirical => None,
    };
    let scaling = if study.design.kind == DesignKind::Multinomial { Scaling::Unscaled } else { Scaling::Scaled };
    let mut rows = Vec::new();
    for &n in &study.sample_sizes {
        let t0 = Instant::now();
        let reps: Vec<Result<RepOutput>> = (0..study.replications)
            .into_par_iter()
            .map(|r| run_replication(study, &analytic, n, r))
            .collect();
        let reps: Vec<RepOutput> = reps.into_iter().collect::<Result<_>>()?;
        log::info!(
            "{} rho={} delta={} n={n}: {} replications in {:.1}s",
            study.design.kind.name(),
            study.design.rho_v,
            study.design.delta,
            study.replications,
            t0.elapsed().as_secs_f64()
        );
        let mut ti = 0usize;
        for (ei, &est) in study.estimators.iter().enumerate() {
            let ok: Vec<&(Vec<f64>, f64)> = reps.iter().filter_map(|r| r[ei].as_ref()).collect();
            let failed = reps.len() - ok.len();
            let own: Vec<&Target> = targets.iter().filter(|t| t.estimator == est).collect();
            if ok.is_empty() {
                return Err(Error::Undefined(format!("{} failed in every replication at n={n}", est.name())));
            }
            let drop = ok.iter().map(|v| v.1).sum::<f64>() / ok.len() as f64;
            for (k, t) in own.iter().enumerate() {
                let vals: Vec<f64> = ok.iter().map(|v| v.0[k]).collect();
                let summary = summary_stats(&vals, t.truth, scaling)?.with_sample_size(n);
                rows.push(StudyRow {
                    design: study.design.kind,
                    rho_v: study.design.rho_v,
                    delta: study.design.delta,
                    n,
                    estimator: est,
                    target: t.label.clone(),
                    true_value: t.truth,
                    summary,
                    drop_fraction: drop,
                    failed,
                });
            }
            if est == EstimatorId::Multinomial {
                for arm in 0..2usize {
                    let vecs: Vec<Vec<f64>> = ok.iter().map(|v| v.0[2 * arm..2 * arm + 2].to_vec()).collect();
                    let truth = [own[2 * arm].truth, own[2 * arm + 1].truth];
                    rows.push(StudyRow {
                        design: study.design.kind,
                        rho_v: study.design.rho_v,
                        delta: study.design.delta,
                        n,
                        estimator: est,
                        target: format!("F[Y{arm}]"),
                        true_value: f64::NAN,
                        summary: summary_stats_vector(&vecs, &truth)?.with_sample_size(n),
                        drop_fraction: drop,
                        failed,
                    });
                }
            }
            ti += own.len();
        }
        debug_assert_eq!(ti, targets.len());
    }
    Ok(StudyResult { rows, elapsed: start.elapsed() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl TableFormat {
    pub fn parse(s: &str) -> Result<TableFormat> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::Config(format!("unknown table format '{other}' (expected csv or markdown)"))),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Markdown => "md",
        }
    }
}

/// Formats with 5 significant digits.
pub fn sig5(v: f64) -> String {
    if v.is_nan() {
        return "NA".into();
    }
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-5..10).contains(&mag) {
        return format!("{v:.4e}");
    }
    let decimals = (4 - mag).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // rounding may carry into a new digit, e.g. 9.99996 -> 10.0000
    let r: f64 = s.parse().unwrap_or(v);
    let mag2 = r.abs().log10().floor() as i32;
    if mag2 != mag {
        let decimals = (4 - mag2).max(0) as usize;
        return format!("{r:.decimals$}");
    }
    s
}

pub const TABLE_COLUMNS: [&str; 12] = [
    "design", "rho_v", "delta", "n", "estimator", "target", "mean_bias", "median_bias", "rmse", "mad", "mse", "drop_fraction",
];

fn row_cells(r: &StudyRow) -> Vec<String> {
    vec![
        r.design.name().to_string(),
        sig5(r.rho_v),
        sig5(r.delta),
        r.n.to_string(),
        r.estimator.name().to_string(),
        r.target.clone(),
        sig5(r.summary.mean_bias),
        sig5(r.summary.median_bias),
        sig5(r.summary.rmse),
        sig5(r.summary.mad),
        sig5(r.summary.mse),
        sig5(r.drop_fraction),
    ]
}

pub fn emit_table(result: &StudyResult, format: TableFormat) -> Result<String> {
    if result.rows.is_empty() {
        return Err(Error::Undefined("no rows to emit".into()));
    }
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(TABLE_COLUMNS)?;
            for r in &result.rows {
                w.write_record(row_cells(r))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        TableFormat::Markdown => {
            let mut s = format!("| {} |\n|{}\n", TABLE_COLUMNS.join(" | "), "---|".repeat(TABLE_COLUMNS.len()));
            for r in &result.rows {
                s.push_str(&format!("| {} |\n", row_cells(r).join(" | ")));
            }
            Ok(s)
        }
    }
}

/// Git-style blob hash: sha256 of "blob <len>\0<content>".
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub output_hash: String,
}

impl Manifest {
    pub fn new(seed: u64, config: serde_json::Value, output: &[u8]) -> Manifest {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            output_hash: content_hash(output),
        }
    }
}
