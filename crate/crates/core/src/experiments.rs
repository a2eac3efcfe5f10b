//! Experiment configuration, method variants and CSV output.
//!
//! A run sweeps every configured variant over a list of relative tolerances.
//! The main CSV holds only deterministic columns, so two runs with the same
//! seed produce identical bytes; wall-clock times go to a side file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Result, RiskError};
use crate::loss_estimators::{CvConfig, DeltaCvMode, InnerConfig, InnerSampler, LevelDistribution};
use crate::market_model::{MarketModel, UniverseRanges};
use crate::mlmc::{run_mlmc, AdaptiveConfig, InnerCountMode, MlmcConfig, MlmcResult};
use crate::portfolio::{read_manifest, ComputationModel, GenConfig, ImportanceMode, ModelMix, Portfolio};
use crate::rng::{Domain, NoiseHandle, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodVariant {
    /// Sub-sampling, all control variates, adaptive inner samples.
    Full,
    /// Every inner sample covers the whole portfolio.
    NoSubsampling,
    /// Control variates off, raw threshold.
    NoCv,
    /// `N_ℓ = N_0 4^ℓ`.
    NonAdaptive,
    /// Full method on a 30/50/20 mix of analytic, exact and Milstein terms.
    FullApprox,
}

impl MethodVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoSubsampling => "no_subsampling",
            Self::NoCv => "no_cv",
            Self::NonAdaptive => "non_adaptive",
            Self::FullApprox => "full_approx",
        }
    }
}

fn default_assets() -> usize {
    16
}
fn default_correlation() -> f64 {
    0.2
}
fn default_rate() -> f64 {
    0.05
}
fn default_horizon() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    #[serde(default = "default_assets")]
    pub assets: usize,
    #[serde(default = "default_correlation")]
    pub correlation: f64,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_price_range")]
    pub initial_price: [f64; 2],
    #[serde(default = "default_drift_range")]
    pub drift: [f64; 2],
    #[serde(default = "default_vol_range")]
    pub volatility: [f64; 2],
}

fn default_price_range() -> [f64; 2] {
    [90.0, 110.0]
}
fn default_drift_range() -> [f64; 2] {
    [0.05, 0.15]
}
fn default_vol_range() -> [f64; 2] {
    [0.01, 0.4]
}

impl Default for MarketSection {
    fn default() -> Self {
        Self {
            assets: default_assets(),
            correlation: default_correlation(),
            rate: default_rate(),
            horizon: default_horizon(),
            seed: 0,
            initial_price: default_price_range(),
            drift: default_drift_range(),
            volatility: default_vol_range(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceSetting {
    Weight,
    Uniform,
}

fn default_count() -> usize {
    1000
}
fn default_weight_log_sd() -> f64 {
    3.0
}
fn default_mix() -> [f64; 3] {
    [0.3, 0.7, 0.0]
}
fn default_maturity() -> [f64; 2] {
    [0.0, 5.0]
}
fn default_strike() -> [f64; 2] {
    [80.0, 120.0]
}
fn default_importance() -> ImportanceSetting {
    ImportanceSetting::Weight
}
fn default_calibration_samples() -> usize {
    200_000
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioSection {
    /// Read the portfolio (and market) from a manifest instead of generating it.
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_weight_log_sd")]
    pub weight_log_sd: f64,
    /// Probabilities of analytic, exact-simulation and Milstein terms.
    #[serde(default = "default_mix")]
    pub mix: [f64; 3],
    #[serde(default = "default_maturity")]
    pub maturity: [f64; 2],
    #[serde(default = "default_strike")]
    pub strike: [f64; 2],
    #[serde(default = "default_importance")]
    pub importance: ImportanceSetting,
    #[serde(default)]
    pub seed: u64,
    /// Explicit loss threshold.
    pub threshold: Option<f64>,
    /// Calibrate the threshold so this fraction of scenarios exceeds it.
    pub target_eta: Option<f64>,
    #[serde(default = "default_calibration_samples")]
    pub calibration_samples: usize,
}

impl Default for PortfolioSection {
    fn default() -> Self {
        Self {
            manifest: None,
            count: default_count(),
            weight_log_sd: default_weight_log_sd(),
            mix: default_mix(),
            maturity: default_maturity(),
            strike: default_strike(),
            importance: default_importance(),
            seed: 0,
            threshold: None,
            target_eta: None,
            calibration_samples: default_calibration_samples(),
        }
    }
}

fn default_n0() -> u64 {
    32
}
fn default_c() -> f64 {
    3.0
}
fn default_m0() -> u64 {
    1024
}
fn default_pilot_levels() -> u32 {
    4
}
fn default_max_level() -> u32 {
    14
}
fn default_start_factor() -> f64 {
    1.5
}
fn default_beta() -> f64 {
    2.0
}
fn default_gamma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmcSection {
    #[serde(default = "default_n0")]
    pub n0: u64,
    #[serde(default = "default_c")]
    pub c: f64,
    /// Defaults to 1.5, or 1.1 when Milstein terms are present.
    pub r: Option<f64>,
    #[serde(default = "default_m0")]
    pub m0: u64,
    #[serde(default = "default_pilot_levels")]
    pub pilot_levels: u32,
    #[serde(default = "default_max_level")]
    pub max_level: u32,
    #[serde(default = "default_start_factor")]
    pub start_factor: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Defaults to `(beta + gamma) / 2`.
    pub zeta: Option<f64>,
}

impl Default for MlmcSection {
    fn default() -> Self {
        Self {
            n0: default_n0(),
            c: default_c(),
            r: None,
            m0: default_m0(),
            pilot_levels: default_pilot_levels(),
            max_level: default_max_level(),
            start_factor: default_start_factor(),
            beta: default_beta(),
            gamma: default_gamma(),
            zeta: None,
        }
    }
}

fn default_variants() -> Vec<MethodVariant> {
    vec![MethodVariant::Full]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_variants")]
    pub variants: Vec<MethodVariant>,
    /// Relative tolerances, strictly decreasing.
    pub tolerances: Vec<f64>,
    /// Reference probability; absolute tolerance is `tol * eta_ref`.
    pub eta_ref: f64,
    #[serde(default)]
    pub seed: u64,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub market: MarketSection,
    #[serde(default)]
    pub portfolio: PortfolioSection,
    #[serde(default)]
    pub mlmc: MlmcSection,
    pub experiment: ExperimentSection,
    /// Directory relative paths in the file are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| RiskError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RiskError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let bad = |msg: &str| Err(RiskError::Config(msg.to_string()));
        if e.tolerances.is_empty() {
            return bad("experiment.tolerances must not be empty");
        }
        if e.tolerances.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("experiment.tolerances must be positive");
        }
        if e.tolerances.windows(2).any(|w| w[1] >= w[0]) {
            return bad("experiment.tolerances must be strictly decreasing");
        }
        if !(e.eta_ref > 0.0 && e.eta_ref <= 1.0) {
            return bad("experiment.eta_ref must lie in (0, 1]");
        }
        if e.variants.is_empty() {
            return bad("experiment.variants must not be empty");
        }
        let p = &self.portfolio;
        if p.manifest.is_none() && p.threshold.is_none() && p.target_eta.is_none() {
            return bad("portfolio needs either threshold or target_eta");
        }
        if p.threshold.is_some() && p.target_eta.is_some() {
            return bad("portfolio.threshold and portfolio.target_eta are exclusive");
        }
        Ok(())
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    fn mlmc_config(&self, r: f64, mode: InnerCountMode) -> Result<MlmcConfig> {
        let m = &self.mlmc;
        Ok(MlmcConfig {
            adaptive: AdaptiveConfig::new(m.n0, m.c, r, mode)?,
            m0: m.m0,
            pilot_levels: m.pilot_levels,
            max_level: m.max_level,
            start_factor: m.start_factor,
        })
    }

    fn level_distribution(&self) -> Result<LevelDistribution> {
        let m = &self.mlmc;
        match m.zeta {
            Some(z) => LevelDistribution::new(m.beta, m.gamma, z),
            None => LevelDistribution::balanced(m.beta, m.gamma),
        }
    }
}

/// Market model and portfolio (with threshold) described by the config.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<(MarketModel, Portfolio)> {
    let p = &cfg.portfolio;
    if let Some(manifest) = &p.manifest {
        let path = cfg.resolve(manifest);
        let file = File::open(&path).map_err(|e| RiskError::io(&path, e))?;
        let (portfolio, model) = read_manifest(std::io::BufReader::new(file))?;
        let portfolio = match p.threshold {
            Some(k) => portfolio.with_threshold(k),
            None => portfolio,
        };
        let portfolio = portfolio_with_target(portfolio, &model, p)?;
        return Ok((model, portfolio));
    }
    let m = &cfg.market;
    let ranges = UniverseRanges {
        initial_price: (m.initial_price[0], m.initial_price[1]),
        drift: (m.drift[0], m.drift[1]),
        volatility: (m.volatility[0], m.volatility[1]),
    };
    let mut noise = NoiseHandle::for_stream(m.seed, StreamKey::new(Domain::Market, 0, 0));
    let model = MarketModel::generate(m.assets, ranges, m.correlation, m.rate, m.horizon, &mut noise)?;
    let gen = GenConfig {
        count: p.count,
        weight_log_sd: p.weight_log_sd,
        model_mix: ModelMix::new(p.mix[0], p.mix[1], p.mix[2])?,
        maturity_range: (p.maturity[0], p.maturity[1]),
        strike_range: (p.strike[0], p.strike[1]),
        importance: match p.importance {
            ImportanceSetting::Weight => ImportanceMode::Weight,
            ImportanceSetting::Uniform => ImportanceMode::Uniform,
        },
        seed: p.seed,
    };
    let portfolio = Portfolio::generate(&gen, &model)?;
    let portfolio = match p.threshold {
        Some(k) => portfolio.with_threshold(k),
        None => portfolio,
    };
    let portfolio = portfolio_with_target(portfolio, &model, p)?;
    Ok((model, portfolio))
}

fn portfolio_with_target(portfolio: Portfolio, model: &MarketModel, p: &PortfolioSection) -> Result<Portfolio> {
    match p.target_eta {
        Some(eta) => {
            let k = portfolio.calibrate_threshold(model, eta, p.calibration_samples, p.seed)?;
            Ok(portfolio.with_threshold(k))
        }
        None => Ok(portfolio),
    }
}

/// Everything a variant changes: the portfolio's computation models, the
/// inner sampler settings and the inner-sample-count rule.
pub struct VariantSetup {
    pub portfolio: Portfolio,
    pub inner: InnerConfig,
    pub mlmc: MlmcConfig,
}

pub fn variant_setup(variant: MethodVariant, portfolio: &Portfolio, cfg: &ExperimentConfig) -> Result<VariantSetup> {
    let levels = cfg.level_distribution()?;
    let mut inner = InnerConfig {
        levels,
        ..InnerConfig::default()
    };
    let mut mode = InnerCountMode::Adaptive;
    let portfolio = match variant {
        MethodVariant::FullApprox => portfolio.with_models(ModelMix::new(0.3, 0.5, 0.2)?, cfg.portfolio.seed)?,
        _ => portfolio.clone(),
    };
    match variant {
        MethodVariant::Full | MethodVariant::FullApprox => {}
        MethodVariant::NoSubsampling => inner.subsampling = false,
        MethodVariant::NoCv => {
            inner.cv = CvConfig::NONE;
            inner.delta_mode = DeltaCvMode::Off;
        }
        MethodVariant::NonAdaptive => mode = InnerCountMode::Fixed,
    }
    let has_milstein = portfolio
        .entries()
        .iter()
        .any(|e| e.comp_model == ComputationModel::ApproxSim);
    let r = cfg.mlmc.r.unwrap_or(if has_milstein { 1.1 } else { 1.5 });
    Ok(VariantSetup {
        portfolio,
        inner,
        mlmc: cfg.mlmc_config(r, mode)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub variant: MethodVariant,
    pub tol: f64,
    pub status: RunStatus,
    /// Present when the run converged.
    pub result: Option<MlmcResult>,
}

impl RunRecord {
    pub fn total_work(&self) -> u64 {
        self.result.as_ref().map_or(0, |r| r.total_work)
    }
}

/// Output locations derived from the main CSV path.
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub runs: PathBuf,
    pub levels: PathBuf,
    pub timing: PathBuf,
}

impl OutputPaths {
    pub fn from_main(path: &Path) -> Self {
        let with_suffix = |suffix: &str| {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("runs");
            path.with_file_name(format!("{stem}.{suffix}.csv"))
        };
        Self {
            runs: path.to_path_buf(),
            levels: with_suffix("levels"),
            timing: with_suffix("timing"),
        }
    }
}

pub const RUN_HEADER: [&str; 10] = [
    "variant",
    "tol",
    "status",
    "eta_estimate",
    "out_of_range",
    "std_error",
    "start_level",
    "max_level",
    "total_work",
    "levels_used",
];

struct CsvSink {
    runs: csv::Writer<File>,
    levels: csv::Writer<File>,
    timing: csv::Writer<File>,
    paths: OutputPaths,
}

fn csv_err(path: &Path, e: csv::Error) -> RiskError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => RiskError::io(path, io),
        other => RiskError::Config(format!("{}: {other:?}", path.display())),
    }
}

impl CsvSink {
    fn create(paths: OutputPaths) -> Result<Self> {
        let open = |p: &Path| -> Result<csv::Writer<File>> {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| RiskError::io(dir, e))?;
            }
            csv::Writer::from_path(p).map_err(|e| csv_err(p, e))
        };
        let mut sink = Self {
            runs: open(&paths.runs)?,
            levels: open(&paths.levels)?,
            timing: open(&paths.timing)?,
            paths,
        };
        sink.runs.write_record(RUN_HEADER).map_err(|e| csv_err(&sink.paths.runs, e))?;
        sink.levels
            .write_record(["variant", "tol", "level", "var_delta", "var_fine", "mean_inner_n", "work", "m", "used"])
            .map_err(|e| csv_err(&sink.paths.levels, e))?;
        sink.timing
            .write_record(["variant", "tol", "wall_seconds"])
            .map_err(|e| csv_err(&sink.paths.timing, e))?;
        Ok(sink)
    }

    fn write(&mut self, rec: &RunRecord) -> Result<()> {
        let tol = format!("{}", rec.tol);
        let variant = rec.variant.as_str();
        let row: Vec<String> = match &rec.result {
            Some(r) => vec![
                variant.into(),
                tol.clone(),
                "ok".into(),
                format!("{:.9}", r.estimate),
                r.out_of_range.to_string(),
                format!("{:.9}", r.variance.sqrt()),
                r.start_level.to_string(),
                r.max_level.to_string(),
                r.total_work.to_string(),
                r.per_level.iter().filter(|s| s.used).count().to_string(),
            ],
            None => vec![
                variant.into(),
                tol.clone(),
                "unreachable".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ],
        };
        self.runs.write_record(&row).map_err(|e| csv_err(&self.paths.runs, e))?;
        self.runs.flush().map_err(|e| RiskError::io(&self.paths.runs, e))?;
        if let Some(r) = &rec.result {
            for s in &r.per_level {
                self.levels
                    .write_record([
                        variant.to_string(),
                        tol.clone(),
                        s.level.to_string(),
                        format!("{:.6e}", s.var_delta),
                        format!("{:.6e}", s.var_fine),
                        format!("{:.6e}", s.mean_inner_n),
                        s.work.to_string(),
                        s.m.to_string(),
                        s.used.to_string(),
                    ])
                    .map_err(|e| csv_err(&self.paths.levels, e))?;
            }
            self.levels.flush().map_err(|e| RiskError::io(&self.paths.levels, e))?;
            self.timing
                .write_record([variant.to_string(), tol, format!("{:.3}", r.wall_time)])
                .map_err(|e| csv_err(&self.paths.timing, e))?;
            self.timing.flush().map_err(|e| RiskError::io(&self.paths.timing, e))?;
        }
        Ok(())
    }
}

/// Runs every (variant, tolerance) pair. Rows are written as they finish
/// when `out` is given. A tolerance that cannot be met is recorded and the
/// sweep continues.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    let (model, portfolio) = build_problem(cfg)?;
    let mut sink = match out {
        Some(p) => Some(CsvSink::create(OutputPaths::from_main(p))?),
        None => None,
    };
    let exp = &cfg.experiment;
    let mut records = Vec::new();
    for &variant in &exp.variants {
        let setup = variant_setup(variant, &portfolio, cfg)?;
        let sampler = InnerSampler::new(&setup.portfolio, &model, setup.inner)?;
        for &tol in &exp.tolerances {
            let record = match run_mlmc(&sampler, &model, tol * exp.eta_ref, &setup.mlmc, exp.seed) {
                Ok(r) => RunRecord {
                    variant,
                    tol,
                    status: RunStatus::Ok,
                    result: Some(r),
                },
                Err(RiskError::ToleranceUnreachable { .. }) => RunRecord {
                    variant,
                    tol,
                    status: RunStatus::Unreachable,
                    result: None,
                },
                Err(e) => return Err(e),
            };
            if let Some(s) = sink.as_mut() {
                s.write(&record)?;
            }
            records.push(record);
        }
    }
    Ok(records)
}

/// Per-level table of one result: `level,var_delta,var_fine,mean_inner_n,work,m`.
pub fn emit_level_table(result: &MlmcResult, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| RiskError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| RiskError::io(path, e);
    writeln!(w, "level,var_delta,var_fine,mean_inner_n,work,m").map_err(io)?;
    for s in &result.per_level {
        writeln!(
            w,
            "{},{:.6e},{:.6e},{:.6e},{},{}",
            s.level, s.var_delta, s.var_fine, s.mean_inner_n, s.work, s.m
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
