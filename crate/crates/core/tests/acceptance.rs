//! End-to-end acceptance checks. Each test prints one PASS/FAIL line per
//! check and fails if any check fails.

use std::time::Instant;
use weaksep::cli::{preset, run_preset, Settings};
use weaksep::dgp::{
    draw_correlated_normal_pair, simulate_design, substream, DesignKind, DesignSpec, Estimand,
};
use weaksep::estimators::{asymptotic_variance_oracle, rc_match_t, EstimatorConfig};
use weaksep::hfunc::{default_bandwidths, distance_norm, h_interval, h_star, HContext, OutcomeEvent};
use weaksep::montecarlo::{run_study, ContextMode, EstimatorId, StudyConfig, StudyResult, StudyRow};
use weaksep::num::norm_cdf;

struct Report {
    criterion: u32,
    failures: Vec<String>,
}

impl Report {
    fn new(criterion: u32) -> Report {
        Report { criterion, failures: Vec::new() }
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("criterion {} | {:<4} | {name}: {detail}", self.criterion, if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(name.to_string());
        }
    }

    fn finish(self) {
        assert!(self.failures.is_empty(), "criterion {} failed checks: {:?}", self.criterion, self.failures);
    }
}

fn table(name: &str) -> StudyResult {
    run_preset(&preset(name).unwrap(), &Settings::default(), &[]).unwrap()
}

fn row<'a>(r: &'a StudyResult, est: EstimatorId, grid: f64, n: usize, target: &str) -> &'a StudyRow {
    r.rows
        .iter()
        .find(|x| {
            x.estimator == est
                && x.n == n
                && x.target == target
                && ((x.design == DesignKind::Multinomial && (x.delta - grid).abs() < 1e-12) || (x.design != DesignKind::Multinomial && (x.rho_v - grid).abs() < 1e-12))
        })
        .unwrap_or_else(|| panic!("missing row {est:?} {grid} {n} {target}"))
}

const RHOS: [f64; 3] = [0.0, 0.25, 0.5];
const NS: [usize; 3] = [100, 200, 400];
const MEAN: &str = "E[Y1]";

#[test]
fn criterion_1_table1_reproduction() {
    let mut rep = Report::new(1);
    let start = Instant::now();
    let t = table("table1");
    let secs = start.elapsed().as_secs_f64();

    let rmse = row(&t, EstimatorId::Ckt, 0.0, 400, MEAN).summary.rmse;
    rep.check("ckt scaled rmse at n=400, rho=0 in [0.17, 0.33] (reference 0.2496)", (0.17..=0.33).contains(&rmse), format!("{rmse:.4}"));
    for rho in RHOS {
        let v: Vec<f64> = NS.iter().map(|&n| row(&t, EstimatorId::Ckt, rho, n, MEAN).summary.rmse).collect();
        rep.check(&format!("ckt rmse decreasing in n at rho={rho}"), v[0] > v[1] && v[1] > v[2], format!("{v:.4?}"));
    }
    let vy: Vec<Vec<f64>> = RHOS
        .iter()
        .map(|&rho| NS.iter().map(|&n| row(&t, EstimatorId::Vy, rho, n, MEAN).summary.mean_bias).collect())
        .collect();
    let all_negative = vy.iter().flatten().all(|b| *b < 0.0);
    rep.check("vy scaled mean bias negative at every rho and n", all_negative, format!("{vy:.4?}"));
    let at400: Vec<f64> = vy.iter().map(|v| v[2].abs()).collect();
    rep.check(
        "vy |mean bias| at n=400 growing in rho (reference 0.0584, 0.1113, 0.1593)",
        at400[0] < at400[1] && at400[1] < at400[2],
        format!("{at400:.4?}"),
    );
    rep.check("runtime under 10 minutes", secs < 600.0, format!("{secs:.1}s"));
    rep.finish();
}

#[test]
fn criterion_2_table2_separation() {
    let mut rep = Report::new(2);
    let mut study = StudyConfig::new(
        DesignSpec::new(DesignKind::Design2).with_rho(0.5),
        vec![EstimatorId::Ckt, EstimatorId::Vy],
        Estimand::MeanTreated,
    );
    study.sample_sizes = vec![400];
    let t = run_study(&study).unwrap();
    let ckt = row(&t, EstimatorId::Ckt, 0.5, 400, MEAN).summary.mean_bias;
    let vy = row(&t, EstimatorId::Vy, 0.5, 400, MEAN).summary.mean_bias;
    rep.check("ckt scaled |mean bias| < 0.10 (reference -0.0294)", ckt.abs() < 0.10, format!("{ckt:.4}"));
    rep.check("vy scaled mean bias < -0.25 (reference -0.3708)", vy < -0.25, format!("{vy:.4}"));
    rep.finish();
}

#[test]
fn criterion_3_table3() {
    let mut rep = Report::new(3);
    let t = table("table3");
    for rho in RHOS {
        let b = row(&t, EstimatorId::Ckt, rho, 400, MEAN).summary.mean_bias;
        rep.check(&format!("ckt scaled |mean bias| < 0.03 at n=400, rho={rho}"), b.abs() < 0.03, format!("{b:.4}"));
    }
    let vy: Vec<f64> = NS.iter().map(|&n| row(&t, EstimatorId::Vy, 0.5, n, MEAN).summary.mean_bias).collect();
    rep.check("vy mean bias at n=400, rho=1/2 within -0.09 +- 0.04 (reference -0.0889)", (vy[2] + 0.09).abs() <= 0.04, format!("{:.4}", vy[2]));
    let spread = vy.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vy.iter().cloned().fold(f64::INFINITY, f64::min);
    rep.check("vy mean bias roughly constant in n (spread <= 0.04)", spread <= 0.04, format!("{vy:.4?}"));
    rep.finish();
}

#[test]
fn criterion_4_table4_random_coefficients() {
    let mut rep = Report::new(4);
    let t = table("table4");
    let target = "Pr{Y1<=1}";
    let truth = row(&t, EstimatorId::Rc, 0.0, 100, target).true_value;
    rep.check("true value 0.5", (truth - 0.5).abs() < 1e-6, format!("{truth:.8}"));
    let reference = [0.1011, 0.0669, 0.0501];
    let v: Vec<f64> = NS.iter().map(|&n| row(&t, EstimatorId::Rc, 0.0, n, target).summary.rmse).collect();
    for k in 0..3 {
        let ok = (v[k] / reference[k] - 1.0).abs() <= 0.4;
        rep.check(&format!("rmse at n={} within 40% of {}", NS[k], reference[k]), ok, format!("{:.4}", v[k]));
    }
    for rho in RHOS {
        let v: Vec<f64> = NS.iter().map(|&n| row(&t, EstimatorId::Rc, rho, n, target).summary.rmse).collect();
        let ratios = [v[0] / v[1], v[1] / v[2]];
        let ok = ratios.iter().all(|r| (r / std::f64::consts::SQRT_2 - 1.0).abs() <= 0.2);
        rep.check(&format!("rmse ratio per doubling within 20% of sqrt(2) at rho={rho}"), ok, format!("{ratios:.3?}"));
    }
    rep.finish();
}

const MN_NS: [usize; 4] = [250, 500, 1000, 2000];
const MN_TARGETS: [&str; 6] = ["Pr{Y0=1}", "Pr{Y0=2}", "Pr{Y1=1}", "Pr{Y1=2}", "F[Y0]", "F[Y1]"];
const DELTAS: [f64; 3] = [0.25, 1.0 / 3.0, 0.5];

fn mse(t: &StudyResult, delta: f64, n: usize, target: &str) -> f64 {
    row(t, EstimatorId::Multinomial, delta, n, target).summary.mse
}

#[test]
fn criterion_5_and_6_multinomial_tables() {
    let t5 = table("table5");
    let mut rep = Report::new(5);
    let reference = [0.00254, 0.00121, 0.00078, 0.00038];
    let v: Vec<f64> = MN_NS.iter().map(|&n| mse(&t5, 0.25, n, "Pr{Y1=1}")).collect();
    for k in 0..4 {
        let r = v[k] / reference[k];
        rep.check(&format!("Pr{{Y1=1}} mse at delta=1/4, n={} within 2x of {}", MN_NS[k], reference[k]), (0.5..=2.0).contains(&r), format!("{:.5}", v[k]));
    }
    let ratio = v[0] / v[3];
    rep.check("mse(n=250) / mse(n=2000) in [4, 16]", (4.0..=16.0).contains(&ratio), format!("{ratio:.2}"));

    let t6 = table("table6");
    let mut rep6 = Report::new(6);
    let mut worse = 0;
    let mut cells = 0;
    let mut offenders = Vec::new();
    for delta in DELTAS {
        for n in MN_NS {
            for target in MN_TARGETS {
                cells += 1;
                let (a, b) = (mse(&t5, delta, n, target), mse(&t6, delta, n, target));
                if b > a {
                    worse += 1;
                } else {
                    offenders.push(format!("{target} delta={delta:.3} n={n}: {b:.5} <= {a:.5}"));
                }
            }
        }
    }
    rep6.check("feasible mse exceeds infeasible mse in every cell", worse == cells, format!("{worse}/{cells} {offenders:?}"));
    for target in MN_TARGETS {
        let v: Vec<f64> = MN_NS.iter().map(|&n| mse(&t6, 0.25, n, target)).collect();
        rep6.check(&format!("{target} feasible mse decreasing in n at delta=1/4"), v.windows(2).all(|w| w[1] < w[0]), format!("{v:.5?}"));
    }
    let done5 = rep.failures.is_empty();
    rep6.finish();
    assert!(done5, "criterion 5 failed checks: {:?}", rep.failures);
}

#[test]
fn criterion_7_property_suite() {
    let mut rep = Report::new(7);
    let start = Instant::now();
    let mut rng = substream(2024, 7);
    let mut unif = |lo: f64, hi: f64| {
        use rand::Rng;
        lo + (hi - lo) * rng.gen::<f64>()
    };

    let kinds = [DesignKind::Design1, DesignKind::Design2, DesignKind::Design3, DesignKind::RandomCoef];
    let mut bound_fail = 0;
    let mut mono_fail = 0;
    let mut inf_err: f64 = 0.0;
    for i in 0..1000 {
        let kind = kinds[i % 4];
        let ctx = HContext::analytic(DesignSpec::new(kind).with_rho(unif(0.0, 0.9)), 200).unwrap();
        let x = [unif(-2.5, 2.5)];
        let y = unif(-4.0, 6.0);
        let p = unif(0.02, 0.9);
        let (dy, dp) = (unif(0.0, 2.0), unif(0.0, 0.08));
        let ev = OutcomeEvent::AtMost(y);
        let h1 = h_star(&ctx, 1, &x, ev, p).unwrap();
        let h0 = h_star(&ctx, 0, &x, ev, p).unwrap();
        if !(h1 >= 0.0 && h1 <= p + 1e-12 && h0 >= 0.0 && h0 <= 1.0 - p + 1e-12) {
            bound_fail += 1;
        }
        let up_y = OutcomeEvent::AtMost(y + dy);
        if h_star(&ctx, 1, &x, up_y, p).unwrap() < h1
            || h_star(&ctx, 0, &x, up_y, p).unwrap() < h0
            || h_star(&ctx, 1, &x, ev, p + dp).unwrap() < h1
            || h_star(&ctx, 0, &x, ev, p + dp).unwrap() > h0
        {
            mono_fail += 1;
        }
        inf_err = inf_err.max((h_star(&ctx, 1, &x, OutcomeEvent::AtMost(f64::INFINITY), p).unwrap() - p).abs());
    }
    rep.check("h* within [0, p] and [0, 1-p] on 1000 random inputs", bound_fail == 0, format!("{bound_fail} violations"));
    rep.check("h* monotone in y and p on 1000 random inputs", mono_fail == 0, format!("{mono_fail} violations"));
    rep.check("h1*(x, inf, p) = p to 1e-6", inf_err < 1e-6, format!("max error {inf_err:.2e}"));

    let d1 = HContext::analytic(DesignSpec::new(DesignKind::Design1).with_rho(0.5), 200).unwrap();
    let pairs = [(0.9, 0.1), (0.6, 0.2), (0.95, 0.7), (0.5, 0.45)];
    let ys: Vec<f64> = (0..9).map(|k| -2.0 + 0.5 * k as f64).collect();
    let mut matched_gap: f64 = 0.0;
    let mut perturbed_min_gap = f64::INFINITY;
    for x in [-1.5, -0.2, 0.0, 0.7, 1.9] {
        let mut worst: f64 = 0.0;
        for &y in &ys {
            for &(p1, p2) in &pairs {
                let ev = OutcomeEvent::AtMost(y);
                let a = h_interval(&d1, 1, &[x], ev, p1, p2).unwrap();
                matched_gap = matched_gap.max((a - h_interval(&d1, 0, &[x + 0.5], ev, p1, p2).unwrap()).abs());
                worst = worst.max((a - h_interval(&d1, 0, &[x + 0.8], ev, p1, p2).unwrap()).abs());
            }
        }
        perturbed_min_gap = perturbed_min_gap.min(worst);
    }
    rep.check(
        "interval equality holds at matched pairs and fails off the match",
        matched_gap < 1e-12 && perturbed_min_gap > 1e-3,
        format!("matched {matched_gap:.1e}, perturbed {perturbed_min_gap:.3}"),
    );

    let rc = HContext::analytic(DesignSpec::new(DesignKind::RandomCoef).with_rho(0.25), 200).unwrap();
    let mut rc_err: f64 = 0.0;
    for _ in 0..100 {
        let (x, y) = (unif(-2.0, 2.0), unif(-2.0, 4.0));
        let t = rc_match_t(&rc, &[x], y, 0.8, 0.3, (-20.0, 20.0)).unwrap();
        rc_err = rc_err.max((t.t - (y - 1.0 - x)).abs());
    }
    rep.check("rc_match_t = y - 1 - x to 1e-6 on 100 random (x, y)", rc_err < 1e-6, format!("max error {rc_err:.2e}"));

    let events: Vec<OutcomeEvent> = ys.iter().map(|y| OutcomeEvent::AtMost(*y)).collect();
    let mut dist: f64 = 0.0;
    for x in [-1.0, 0.0, 0.4, 1.3] {
        dist = dist.max(distance_norm(&d1, &[x], &[x + 0.5], &events, &pairs, &|_| 1.0).unwrap());
    }
    rep.check("distance_norm zero at matched pairs to 1e-8", dist < 1e-8, format!("{dist:.1e}"));

    let design = DesignSpec::new(DesignKind::Design2).with_rho(0.25);
    let same = simulate_design(&design, 300, 5).unwrap() == simulate_design(&design, 300, 5).unwrap();
    let differ = simulate_design(&design, 300, 5).unwrap() != simulate_design(&design, 300, 6).unwrap();
    rep.check("samples reproducible under a seed and changed by reseeding", same && differ, format!("same={same} differ={differ}"));

    let mut study = StudyConfig::new(design, vec![EstimatorId::Ckt, EstimatorId::Vy], Estimand::MeanTreated);
    study.sample_sizes = vec![60, 90];
    study.replications = 6;
    study.cfg = EstimatorConfig { quadrature_m: 50, ..Default::default() };
    let in_pool = |threads: usize, s: &StudyConfig| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_study(s).unwrap().rows)
    };
    let one = in_pool(1, &study);
    let four = in_pool(4, &study);
    let mut reseeded = study.clone();
    reseeded.seed = 2;
    let other = in_pool(2, &reseeded);
    rep.check("tables identical across thread counts and changed by reseeding", one == four && one != other, format!("{} rows", one.len()));

    let secs = start.elapsed().as_secs_f64();
    rep.check("property suite under one minute", secs < 60.0, format!("{secs:.1}s"));
    rep.finish();
}

#[test]
fn criterion_8_oracle_suite() {
    let mut rep = Report::new(8);

    let design = DesignSpec::new(DesignKind::Design1).with_rho(0.25);
    let analytic = HContext::analytic(design.clone(), 400).unwrap();
    let mut errs = Vec::new();
    for n in [1_000, 10_000, 100_000] {
        let s = simulate_design(&design, n, 31).unwrap();
        let emp = HContext::empirical(&s, default_bandwidths(&s, 1.0)).unwrap();
        let mut worst: f64 = 0.0;
        for x in [-0.5, 0.0, 0.5] {
            for y in [-0.5, 0.5, 1.5] {
                for p in [0.3, 0.5, 0.7] {
                    for arm in [0u8, 1] {
                        let ev = OutcomeEvent::AtMost(y);
                        let a = h_star(&analytic, arm, &[x], ev, p).unwrap();
                        let b = h_star(&emp, arm, &[x], ev, p).unwrap();
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
        errs.push(worst);
    }
    rep.check("empirical h* max error decreasing over n = 1e3, 1e4, 1e5", errs[0] > errs[1] && errs[1] > errs[2], format!("{errs:.4?}"));

    // E(DY | x, p) + E((1-D)Y | x~, p) = E(Y1 | x) with x~ = x + 0.5; the left
    // side by simulation at fixed (x, p), and again by integrating h-functions
    let rho = 0.5;
    let ctx = HContext::analytic(DesignSpec::new(DesignKind::Design1).with_rho(rho), 2000).unwrap();
    let draws = 1_000_000;
    for (x, p) in [(0.0, 0.5), (0.8, 0.3), (-1.1, 0.75)] {
        let mut rng = substream(99, (p * 1000.0) as u64);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let (eps, v) = draw_correlated_normal_pair(rho, &mut rng).unwrap();
            let treated = norm_cdf(v) < p;
            let x_tilde = x + 0.5;
            let y = if treated { x + 0.5 + eps } else { x_tilde + eps };
            s += y;
            s2 += y * y;
        }
        let mean = s / draws as f64;
        let se = ((s2 / draws as f64 - mean * mean) / draws as f64).sqrt();
        let truth = x + 0.5;
        rep.check(
            &format!("identity by simulation at x={x}, p={p} within 3 se"),
            (mean - truth).abs() < 3.0 * se,
            format!("{mean:.5} vs {truth} (se {se:.1e})"),
        );
        let expect = |arm: u8, xv: f64, mass: f64| {
            // E[1{arm} Y] = int_0^inf (mass - h(y)) dy - int_-inf^0 h(y) dy
            let (lo, hi, m) = (-12.0, 12.0, 2400);
            let step = (hi - lo) / m as f64;
            (0..m)
                .map(|k| {
                    let y = lo + (k as f64 + 0.5) * step;
                    let h = h_star(&ctx, arm, &[xv], OutcomeEvent::AtMost(y), p).unwrap();
                    step * if y >= 0.0 { mass - h } else { -h }
                })
                .sum::<f64>()
        };
        let via_h = expect(1, x, p) + expect(0, x + 0.5, 1.0 - p);
        rep.check(
            &format!("identity via h-functions at x={x}, p={p} within 3 se"),
            (via_h - truth).abs() < 3.0 * se,
            format!("{via_h:.5} vs {truth}"),
        );
    }

    let sigma = asymptotic_variance_oracle(&DesignSpec::new(DesignKind::Design1), 1_000_000, 8).unwrap();
    let mut study = StudyConfig::new(DesignSpec::new(DesignKind::Design1), vec![EstimatorId::Ckt], Estimand::MeanTreated);
    study.sample_sizes = vec![400];
    study.context = ContextMode::Analytic;
    let t = run_study(&study).unwrap();
    let r = row(&t, EstimatorId::Ckt, 0.0, 400, MEAN);
    let bias = r.summary.mean_bias * r.true_value;
    let nvar = 400.0 * (r.summary.mse - bias * bias);
    rep.check(
        "n * var of ckt estimate at n=400 within 50% of the asymptotic variance",
        (nvar / sigma - 1.0).abs() <= 0.5,
        format!("{nvar:.3} vs {sigma:.3}"),
    );
    rep.finish();
}
