//! Command-line front end: flat `key = value` configuration, table presets
//! and the four subcommands.

use crate::dgp::{derive_seed, simulate_design, DesignKind, DesignSpec, Estimand, Region, Sample};
use crate::error::{Error, Result};
use crate::estimators::{
    ckt_ate, multinomial_pmf_vector, rc_distributional, vy_ate_infeasible, EstimatorConfig, PropensityMode,
};
use crate::hfunc::{default_bandwidths, multinomial_bandwidths, HContext};
use crate::montecarlo::{emit_table, run_study, ContextMode, EstimatorId, Manifest, StudyConfig, StudyResult, TableFormat};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Every configuration key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("design.kind", "design1", "design1 | design2 | design3 | random_coef | multinomial"),
    ("design.rho_v", "0", "correlation of outcome and selection errors, in [0, 1)"),
    ("design.delta", "0.25", "multinomial error-mean slope in u"),
    ("sample.n", "400", "sample size for simulate and estimate"),
    ("sample.input", "", "csv sample for estimate (empty: simulate one)"),
    ("estimate.estimator", "ckt", "ckt | vy | rc | multinomial"),
    ("mc.sample_sizes", "100,200,400", "comma-separated sample sizes"),
    ("mc.replications", "401", "replications per sample size"),
    ("mc.seed", "1", "master seed"),
    ("mc.estimators", "ckt,vy", "comma-separated estimators"),
    ("mc.estimand", "mean_y1", "mean_y1 | cdf_y1 | pmf"),
    ("mc.estimand_y", "1", "threshold y for cdf_y1"),
    ("mc.region", "-1,1,-1,1", "covariate box lo1,hi1,lo2,hi2 for pmf"),
    ("mc.context", "analytic", "analytic (known h) | empirical (kernel h)"),
    ("mc.oracle_draws", "1000000", "draws for Monte Carlo truths"),
    ("est.y_grid_size", "auto", "outcome grid size (auto: ceil(n/50), at least 5)"),
    ("est.y_grid_range", "auto", "outcome grid range lo,hi (auto: 2.5%/97.5% quantiles)"),
    ("est.p_grid_size", "10", "propensity grid size"),
    ("est.bandwidth_scale", "1", "multiplier on n^(-1/5) bandwidths"),
    ("est.trim_c", "0.05", "density floor for propensity trimming"),
    ("est.trim_c0", "0.05", "propensity grid spans [c0, 1 - c0]"),
    ("est.propensity_mode", "known", "known | estimated"),
    ("est.pair_cap", "500", "max propensity pairs in t-hat (all: no cap)"),
    ("est.quadrature_m", "200", "midpoint nodes per unit length of u"),
];

/// Effective settings: defaults overlaid with file values and overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

fn valid_keys() -> String {
    KEYS.iter().map(|k| k.0).collect::<Vec<_>>().join(", ")
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if !KEYS.iter().any(|k| k.0 == key) {
            return Err(Error::Config(format!("unknown key '{key}'; valid keys: {}", valid_keys())));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// `key = value` lines; `[section]` headers prefix later keys; `#` starts
    /// a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            self.set(&key, v)?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!(self.values)
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse::<T>()
            .map_err(|_| Error::Config(format!("{key} = '{}' is not a valid number", self.get(key))))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<T>().map_err(|_| Error::Config(format!("{key}: bad entry '{s}'"))))
            .collect()
    }

    pub fn design(&self) -> Result<DesignSpec> {
        let d = DesignSpec::new(DesignKind::parse(self.get("design.kind"))?)
            .with_rho(self.num("design.rho_v")?)
            .with_delta(self.num("design.delta")?);
        d.validate()?;
        Ok(d)
    }

    pub fn estimator_config(&self) -> Result<EstimatorConfig> {
        let auto = |k: &str| self.get(k).eq_ignore_ascii_case("auto") || self.get(k).is_empty();
        let cfg = EstimatorConfig {
            y_grid_size: if auto("est.y_grid_size") { None } else { Some(self.num("est.y_grid_size")?) },
            y_grid_range: if auto("est.y_grid_range") {
                None
            } else {
                let v: Vec<f64> = self.list("est.y_grid_range")?;
                if v.len() != 2 {
                    return Err(Error::Config("est.y_grid_range needs lo,hi".into()));
                }
                Some((v[0], v[1]))
            },
            p_grid_size: self.num("est.p_grid_size")?,
            bandwidth_scale: self.num("est.bandwidth_scale")?,
            trim_c: self.num("est.trim_c")?,
            trim_c0: self.num("est.trim_c0")?,
            propensity_mode: match self.get("est.propensity_mode") {
                "known" => PropensityMode::Known,
                "estimated" => PropensityMode::Estimated,
                other => return Err(Error::Config(format!("est.propensity_mode: unknown mode '{other}'"))),
            },
            pair_cap: if self.get("est.pair_cap").eq_ignore_ascii_case("all") { None } else { Some(self.num("est.pair_cap")?) },
            quadrature_m: self.num("est.quadrature_m")?,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn estimand(&self) -> Result<Estimand> {
        Ok(match self.get("mc.estimand") {
            "mean_y1" => Estimand::MeanTreated,
            "cdf_y1" => Estimand::TreatedCdf { y: self.num("mc.estimand_y")? },
            "pmf" => {
                let v: Vec<f64> = self.list("mc.region")?;
                if v.len() != 4 {
                    return Err(Error::Config("mc.region needs lo1,hi1,lo2,hi2".into()));
                }
                Estimand::Pmf { arm: 1, category: 1, region: Region { lo: vec![v[0], v[2]], hi: vec![v[1], v[3]] } }
            }
            other => return Err(Error::Config(format!("mc.estimand: unknown estimand '{other}'"))),
        })
    }

    pub fn context_mode(&self) -> Result<ContextMode> {
        match self.get("mc.context") {
            "analytic" => Ok(ContextMode::Analytic),
            "empirical" => Ok(ContextMode::Empirical),
            other => Err(Error::Config(format!("mc.context: unknown mode '{other}'"))),
        }
    }

    pub fn study(&self) -> Result<StudyConfig> {
        let estimators = self.get("mc.estimators").split(',').filter(|s| !s.trim().is_empty()).map(EstimatorId::parse).collect::<Result<Vec<_>>>()?;
        Ok(StudyConfig {
            design: self.design()?,
            sample_sizes: self.list("mc.sample_sizes")?,
            replications: self.num("mc.replications")?,
            seed: self.num("mc.seed")?,
            estimators,
            estimand: self.estimand()?,
            cfg: self.estimator_config()?,
            context: self.context_mode()?,
            oracle_draws: self.num("mc.oracle_draws")?,
        })
    }
}

/// A built-in reproduction: base settings plus a grid over one design key.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub base: Vec<(&'static str, &'static str)>,
    pub grid_key: &'static str,
    pub grid: Vec<f64>,
}

pub const PRESET_NAMES: [&str; 6] = ["table1", "table2", "table3", "table4", "table5", "table6"];

pub fn preset(name: &str) -> Result<Preset> {
    let rho = vec![0.0, 0.25, 0.5];
    let delta = vec![0.25, 1.0 / 3.0, 0.5];
    let mean = |kind: &'static str| {
        vec![
            ("design.kind", kind),
            ("mc.estimators", "ckt,vy"),
            ("mc.estimand", "mean_y1"),
            ("mc.sample_sizes", "100,200,400"),
            ("mc.replications", "401"),
            ("mc.context", "analytic"),
        ]
    };
    let pmf = |context: &'static str| {
        vec![
            ("design.kind", "multinomial"),
            ("mc.estimators", "multinomial"),
            ("mc.estimand", "pmf"),
            ("mc.region", "-1,1,-1,1"),
            ("mc.sample_sizes", "250,500,1000,2000"),
            ("mc.replications", "400"),
            ("mc.context", context),
        ]
    };
    Ok(match name {
        "table1" => Preset { name: "table1", base: mean("design1"), grid_key: "design.rho_v", grid: rho },
        "table2" => Preset { name: "table2", base: mean("design2"), grid_key: "design.rho_v", grid: rho },
        "table3" => Preset { name: "table3", base: mean("design3"), grid_key: "design.rho_v", grid: rho },
        "table4" => Preset {
            name: "table4",
            base: vec![
                ("design.kind", "random_coef"),
                ("mc.estimators", "rc"),
                ("mc.estimand", "cdf_y1"),
                ("mc.estimand_y", "1"),
                ("mc.sample_sizes", "100,200,400"),
                ("mc.replications", "401"),
                ("mc.context", "analytic"),
                // equal node sets on both sides make the root exact; 20 per
                // unit of u keeps the pair loop cheap
                ("est.quadrature_m", "20"),
            ],
            grid_key: "design.rho_v",
            grid: rho,
        },
        "table5" => Preset { name: "table5", base: pmf("analytic"), grid_key: "design.delta", grid: delta },
        "table6" => Preset { name: "table6", base: pmf("empirical"), grid_key: "design.delta", grid: delta },
        other => {
            return Err(Error::Config(format!("unknown table '{other}'; expected one of {}", PRESET_NAMES.join(", "))))
        }
    })
}

impl Preset {
    /// Studies for each grid value. User settings from `user` override the
    /// preset base except for the grid key.
    pub fn studies(&self, user: &Settings, user_keys: &[String]) -> Result<Vec<StudyConfig>> {
        let mut out = Vec::new();
        for v in &self.grid {
            let mut s = Settings::default();
            for (k, val) in &self.base {
                s.set(k, val)?;
            }
            for k in user_keys {
                if k != self.grid_key {
                    s.set(k, user.get(k))?;
                }
            }
            s.set(self.grid_key, &v.to_string())?;
            out.push(s.study()?);
        }
        Ok(out)
    }
}

/// Runs every study of a preset and concatenates the rows.
pub fn run_preset(p: &Preset, user: &Settings, user_keys: &[String]) -> Result<StudyResult> {
    let results = p.studies(user, user_keys)?.iter().map(run_study).collect::<Result<Vec<_>>>()?;
    Ok(StudyResult::merge(results))
}

#[derive(Parser, Debug)]
#[command(name = "weaksep", version, about = "Distribution-matching treatment-effect estimators and simulation studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed (overrides mc.seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, env = "WEAKSEP_THREADS")]
    pub threads: Option<usize>,
    /// Output path (default: stdout)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate one sample and write it as csv
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Run one estimator on a csv or simulated sample
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        design: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run a Monte Carlo study described by the configuration
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Reproduce the built-in tables (table1 .. table6)
    Tables {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of tables
        #[arg(long)]
        only: Option<String>,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

pub fn keys_help() -> String {
    let mut s = String::from("Configuration keys (defaults):\n");
    for (k, v, d) in KEYS {
        s.push_str(&format!("  {k:<22} {v:<14} {d}\n"));
    }
    s
}

/// Settings plus the list of keys the user set explicitly.
fn load_settings(common: &Common) -> Result<(Settings, Vec<String>)> {
    let mut s = Settings::default();
    let mut touched = Vec::new();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut probe = Settings { values: BTreeMap::new() };
        probe.apply_text(&text)?;
        touched.extend(probe.values.keys().cloned());
        s.apply_text(&text)?;
    }
    for o in &common.set {
        if let Some((k, _)) = o.split_once('=') {
            touched.push(k.trim().to_string());
        }
    }
    s.apply_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        s.set("mc.seed", &seed.to_string())?;
        touched.push("mc.seed".into());
    }
    touched.sort();
    touched.dedup();
    Ok((s, touched))
}

/// Writes through a temporary file so a failed run leaves nothing behind.
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let res = (|| -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(content)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res.map_err(Error::from)
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn emit(output: Option<&Path>, content: &str, manifest: &Manifest) -> Result<()> {
    let m = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    match output {
        Some(p) => {
            write_atomic(p, content.as_bytes())?;
            if let Err(e) = write_atomic(&manifest_path(p), m.as_bytes()) {
                let _ = std::fs::remove_file(p);
                return Err(e);
            }
        }
        None => {
            print!("{content}");
            eprintln!("{m}");
        }
    }
    Ok(())
}

fn install_threads(threads: Option<usize>) {
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
}

fn estimate_json(est: EstimatorId, sample: &Sample, settings: &Settings) -> Result<serde_json::Value> {
    let design = settings.design()?;
    let cfg = EstimatorConfig { seed: settings.num("mc.seed")?, ..settings.estimator_config()? };
    let ctx = || -> Result<HContext> {
        match settings.context_mode()? {
            ContextMode::Analytic => HContext::analytic(design.clone(), cfg.quadrature_m),
            ContextMode::Empirical => {
                let bw = if design.kind == DesignKind::Multinomial {
                    multinomial_bandwidths(sample)
                } else {
                    default_bandwidths(sample, cfg.bandwidth_scale)
                };
                HContext::empirical(sample, bw)
            }
        }
    };
    let mismatch = || Error::Config(format!("estimator {} does not apply to {}", est.name(), design.kind.name()));
    let single = |e: crate::estimators::Estimate| {
        json!({"estimator": est.name(), "design": design.kind.name(), "n": sample.len(),
               "value": e.value, "used": e.used, "dropped": e.dropped, "drop_fraction": e.drop_fraction()})
    };
    match est {
        EstimatorId::Ckt | EstimatorId::Vy if !design.kind.is_normal_family() => Err(mismatch()),
        EstimatorId::Rc if design.kind != DesignKind::RandomCoef => Err(mismatch()),
        EstimatorId::Multinomial if design.kind != DesignKind::Multinomial => Err(mismatch()),
        EstimatorId::Ckt => Ok(single(ckt_ate(sample, &ctx()?, &cfg)?)),
        EstimatorId::Vy => Ok(single(vy_ate_infeasible(sample, &design, &cfg)?)),
        EstimatorId::Rc => {
            let y = settings.num("mc.estimand_y")?;
            Ok(single(rc_distributional(sample, &ctx()?, y, &cfg)?))
        }
        EstimatorId::Multinomial => {
            let region = match settings.estimand() {
                Ok(Estimand::Pmf { region, .. }) => region,
                _ => Region::unit_box(2),
            };
            let c = ctx()?;
            let a0 = multinomial_pmf_vector(sample, &c, 0, &region, &cfg)?;
            let a1 = multinomial_pmf_vector(sample, &c, 1, &region, &cfg)?;
            Ok(json!({"estimator": est.name(), "design": design.kind.name(), "n": sample.len(),
                      "y0_pmf": a0.probs, "y1_pmf": a1.probs,
                      "used": [a0.used, a1.used], "dropped": [a0.dropped, a1.dropped]}))
        }
    }
}

/// Executes a parsed command line.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, design, n, rho, delta } => {
            install_threads(common.threads);
            let (mut s, _) = load_settings(&common)?;
            if let Some(d) = design {
                s.set("design.kind", &d)?;
            }
            if let Some(n) = n {
                s.set("sample.n", &n.to_string())?;
            }
            if let Some(r) = rho {
                s.set("design.rho_v", &r.to_string())?;
            }
            if let Some(d) = delta {
                s.set("design.delta", &d.to_string())?;
            }
            let seed: u64 = s.num("mc.seed")?;
            let sample = simulate_design(&s.design()?, s.num("sample.n")?, seed)?;
            let mut buf = Vec::new();
            sample.write_csv(&mut buf)?;
            let text = String::from_utf8(buf).expect("csv is utf-8");
            let manifest = Manifest::new(seed, json!({"command": "simulate", "settings": s.to_json()}), text.as_bytes());
            emit(common.output.as_deref(), &text, &manifest)
        }
        Command::Estimate { common, estimator, input, design, n } => {
            install_threads(common.threads);
            let (mut s, _) = load_settings(&common)?;
            if let Some(e) = estimator {
                s.set("estimate.estimator", &e)?;
            }
            if let Some(d) = design {
                s.set("design.kind", &d)?;
            }
            if let Some(n) = n {
                s.set("sample.n", &n.to_string())?;
            }
            if let Some(p) = input {
                s.set("sample.input", &p.to_string_lossy())?;
            }
            let est = EstimatorId::parse(s.get("estimate.estimator"))?;
            let design = s.design()?;
            let seed: u64 = s.num("mc.seed")?;
            let sample = if s.get("sample.input").is_empty() {
                simulate_design(&design, s.num("sample.n")?, derive_seed(seed, &[0xe5]))?
            } else {
                Sample::read_csv(Path::new(s.get("sample.input")), design.clone())?
            };
            let out = estimate_json(est, &sample, &s)?;
            let text = serde_json::to_string_pretty(&out).expect("json") + "\n";
            let manifest = Manifest::new(seed, json!({"command": "estimate", "settings": s.to_json()}), text.as_bytes());
            emit(common.output.as_deref(), &text, &manifest)
        }
        Command::Study { common, format } => {
            install_threads(common.threads);
            let format = TableFormat::parse(&format)?;
            let (s, _) = load_settings(&common)?;
            let study = s.study()?;
            let result = run_study(&study)?;
            log::info!("study finished in {:.1}s", result.elapsed.as_secs_f64());
            let text = emit_table(&result, format)?;
            let manifest = Manifest::new(study.seed, json!({"command": "study", "settings": s.to_json()}), text.as_bytes());
            emit(common.output.as_deref(), &text, &manifest)
        }
        Command::Tables { common, only, format } => {
            install_threads(common.threads);
            let format = TableFormat::parse(&format)?;
            let (s, touched) = load_settings(&common)?;
            let names: Vec<String> = match only {
                Some(o) => o.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
                None => PRESET_NAMES.iter().map(|x| x.to_string()).collect(),
            };
            let presets = names.iter().map(|n| preset(n)).collect::<Result<Vec<_>>>()?;
            let single = presets.len() == 1;
            for p in &presets {
                let result = run_preset(p, &s, &touched)?;
                log::info!("{} finished in {:.1}s", p.name, result.elapsed.as_secs_f64());
                let text = emit_table(&result, format)?;
                let overrides: BTreeMap<&String, &str> = touched.iter().map(|k| (k, s.get(k))).collect();
                let manifest = Manifest::new(
                    s.num("mc.seed")?,
                    json!({"command": "tables", "table": p.name, "overrides": overrides}),
                    text.as_bytes(),
                );
                let target = match (&common.output, single) {
                    (None, _) => None,
                    (Some(path), true) => Some(path.clone()),
                    (Some(dir), false) => Some(dir.join(format!("{}.{}", p.name, format.extension()))),
                };
                emit(target.as_deref(), &text, &manifest)?;
            }
            Ok(())
        }
    }
}

/// Parses arguments and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            if code == 0 && e.kind() == ErrorKind::DisplayHelp {
                println!("\n{}", keys_help());
            }
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
