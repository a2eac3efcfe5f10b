//! Randomised option portfolios, delta-neutral balancing, loss thresholds and
//! the line-oriented manifest format.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{ensure, Result, RiskError};
use crate::market_model::{AssetParams, MarketModel, RiskScenario};
use crate::pricing::{bs_price_delta, OptionKind, VanillaOption};
use crate::rng::NoiseHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComputationModel {
    /// Analytic option value; deterministic given the scenario.
    ExactEval,
    /// Exact GBM path simulation.
    ExactSim,
    /// Milstein simulation debiased with a randomised level.
    ApproxSim,
}

impl ComputationModel {
    pub const ALL: [ComputationModel; 3] = [Self::ExactEval, Self::ExactSim, Self::ApproxSim];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ExactEval => "exact_eval",
            Self::ExactSim => "exact_sim",
            Self::ApproxSim => "approx_sim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact_eval" => Some(Self::ExactEval),
            "exact_sim" => Some(Self::ExactSim),
            "approx_sim" => Some(Self::ApproxSim),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioEntry {
    pub option: VanillaOption,
    pub weight: f64,
    pub importance: f64,
    pub comp_model: ComputationModel,
    /// Analytic value and delta today.
    pub value0: f64,
    pub delta0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    entries: Vec<PortfolioEntry>,
    /// Weighted portfolio-average delta per asset, `(1/P) Σ w_i ∂V_{i,0}/∂R_{0,k}`.
    delta0: Vec<f64>,
    threshold: f64,
}

/// Probabilities of each computation model, in `ComputationModel::ALL` order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelMix(pub [f64; 3]);

impl ModelMix {
    pub fn new(exact_eval: f64, exact_sim: f64, approx_sim: f64) -> Result<Self> {
        let mix = ModelMix([exact_eval, exact_sim, approx_sim]);
        mix.validate()?;
        Ok(mix)
    }

    fn validate(&self) -> Result<()> {
        let total: f64 = self.0.iter().sum();
        if self.0.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(RiskError::InvalidParameter {
                name: "model_mix",
                value: total,
                constraint: "probabilities must be nonnegative and sum to 1",
            });
        }
        Ok(())
    }

    fn draw(&self, noise: &mut NoiseHandle) -> ComputationModel {
        let u = noise.uniform();
        let mut acc = 0.0;
        for (p, m) in self.0.iter().zip(ComputationModel::ALL) {
            acc += p;
            if u < acc {
                return m;
            }
        }
        // round-off: fall back to the last model with positive probability
        ComputationModel::ALL[self.0.iter().rposition(|&p| p > 0.0).unwrap_or(0)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportanceMode {
    /// `g̃_i = 1`: uniform sub-sampling up to work differences.
    Uniform,
    /// `g̃_i = |w_i|` after balancing and normalisation.
    Weight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    /// Standard deviation of `log w̃_i`; zero gives `w̃_i = 1`.
    pub weight_log_sd: f64,
    pub model_mix: ModelMix,
    pub maturity_range: (f64, f64),
    pub strike_range: (f64, f64),
    pub importance: ImportanceMode,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            weight_log_sd: 3.0,
            model_mix: ModelMix([0.3, 0.7, 0.0]),
            maturity_range: (0.0, 5.0),
            strike_range: (80.0, 120.0),
            importance: ImportanceMode::Weight,
            seed: 0,
        }
    }
}

const MAX_GENERATION_ATTEMPTS: u64 = 32;

impl PortfolioEntry {
    fn new(option: VanillaOption, weight: f64, comp_model: ComputationModel, model: &MarketModel) -> Result<Self> {
        let asset = model.assets().get(option.asset_index).ok_or_else(|| {
            RiskError::InvalidContract(format!("asset index {} out of range", option.asset_index))
        })?;
        if option.maturity <= model.risk_horizon() {
            return Err(RiskError::InvalidContract(format!(
                "maturity {} does not exceed the risk horizon {}",
                option.maturity,
                model.risk_horizon()
            )));
        }
        let pd = bs_price_delta(&option, asset.initial_price, 0.0, asset.volatility, model.risk_free_rate())?;
        Ok(Self {
            option,
            weight,
            importance: 1.0,
            comp_model,
            value0: pd.value,
            delta0: pd.delta,
        })
    }
}

impl Portfolio {
    /// Builds a portfolio from explicit entries, recomputing today's values and
    /// the weighted portfolio delta.
    pub fn from_parts(
        options: Vec<(VanillaOption, f64, f64, ComputationModel)>,
        threshold: f64,
        model: &MarketModel,
    ) -> Result<Self> {
        if options.is_empty() {
            return Err(RiskError::InvalidParameter {
                name: "count",
                value: 0.0,
                constraint: "portfolio needs at least one option",
            });
        }
        let mut entries = Vec::with_capacity(options.len());
        for (option, weight, importance, comp) in options {
            if !(importance > 0.0 && importance.is_finite()) {
                return Err(RiskError::InvalidImportance { index: entries.len() });
            }
            let mut e = PortfolioEntry::new(option, weight, comp, model)?;
            e.importance = importance;
            entries.push(e);
        }
        let delta0 = weighted_delta(&entries, model.num_assets());
        Ok(Self {
            entries,
            delta0,
            threshold,
        })
    }

    /// Random portfolio following the construction used in the experiments:
    /// random kinds, assets, maturities and strikes; log-normal raw weights;
    /// call weights rescaled per asset so the book is delta-neutral; weights
    /// normalised to average one.
    pub fn generate(config: &GenConfig, model: &MarketModel) -> Result<Self> {
        config.model_mix.validate()?;
        if config.count < 2 {
            return Err(RiskError::InvalidParameter {
                name: "count",
                value: config.count as f64,
                constraint: "need at least one put and one call",
            });
        }
        ensure(
            config.weight_log_sd >= 0.0 && config.weight_log_sd.is_finite(),
            "weight_log_sd",
            config.weight_log_sd,
            "must be non-negative",
        )?;
        let (lo, hi) = config.maturity_range;
        ensure(lo >= 0.0 && hi > lo && hi.is_finite(), "maturity_range", hi, "needs 0 <= lo < hi")?;
        let (lo, hi) = config.strike_range;
        ensure(lo > 0.0 && hi >= lo && hi.is_finite(), "strike_range", lo, "needs 0 < lo <= hi")?;
        let mut last_err = None;
        for attempt in 0..MAX_GENERATION_ATTEMPTS {
            let seed = config.seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            match Self::generate_once(config, model, seed) {
                Ok(p) => return Ok(p),
                Err(e @ RiskError::GenerationFailure(_)) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last_err.unwrap())
    }

    fn generate_once(config: &GenConfig, model: &MarketModel, seed: u64) -> Result<Self> {
        let mut noise = NoiseHandle::for_stream(seed, crate::rng::StreamKey::new(crate::rng::Domain::Portfolio, 0, 0));
        let q = model.num_assets();
        let p = config.count;
        let tau = model.risk_horizon();
        // every used asset carries at least one put and one call
        let used_assets = q.min(p / 2);
        let uniform_in = |noise: &mut NoiseHandle, (lo, hi): (f64, f64)| lo + (hi - lo) * noise.uniform();

        let mut raw = Vec::with_capacity(p);
        for i in 0..p {
            let (kind, asset) = if i < 2 * used_assets {
                let kind = if i % 2 == 0 { OptionKind::Put } else { OptionKind::Call };
                (kind, i / 2)
            } else {
                let kind = if noise.uniform() < 0.5 { OptionKind::Put } else { OptionKind::Call };
                (kind, noise.below(used_assets))
            };
            let mut maturity = uniform_in(&mut noise, config.maturity_range);
            let mut tries = 0;
            while maturity <= tau {
                maturity = uniform_in(&mut noise, config.maturity_range);
                tries += 1;
                if tries > 1000 {
                    return Err(RiskError::InvalidParameter {
                        name: "maturity_range",
                        value: config.maturity_range.1,
                        constraint: "must reach beyond the risk horizon",
                    });
                }
            }
            let strike = uniform_in(&mut noise, config.strike_range);
            let raw_weight = if config.weight_log_sd > 0.0 {
                (config.weight_log_sd * noise.normal()).exp()
            } else {
                1.0
            };
            let comp = config.model_mix.draw(&mut noise);
            let option = VanillaOption::new(kind, strike, maturity, asset)?;
            raw.push(PortfolioEntry::new(option, raw_weight, comp, model)?);
        }

        // b_k = -(Σ_put w̃ Δ) / (Σ_call w̃ Δ)
        let mut put_delta = vec![0.0; q];
        let mut call_delta = vec![0.0; q];
        for e in &raw {
            let k = e.option.asset_index;
            match e.option.kind {
                OptionKind::Put => put_delta[k] += e.weight * e.delta0,
                OptionKind::Call => call_delta[k] += e.weight * e.delta0,
            }
        }
        let mut balance = vec![1.0; q];
        for k in 0..used_assets {
            let denom = call_delta[k];
            let gross = put_delta[k].abs() + call_delta[k].abs();
            if !(denom.abs() > 1e-12 * gross.max(f64::MIN_POSITIVE)) || !denom.is_finite() {
                return Err(RiskError::GenerationFailure(format!(
                    "calls on asset {k} have no delta to balance against"
                )));
            }
            balance[k] = -put_delta[k] / denom;
            if !(balance[k] > 0.0 && balance[k].is_finite()) {
                return Err(RiskError::GenerationFailure(format!(
                    "balancing constant {} for asset {k} is not positive",
                    balance[k]
                )));
            }
        }
        for e in raw.iter_mut() {
            if e.option.kind == OptionKind::Call {
                e.weight *= balance[e.option.asset_index];
            }
        }
        let mean_weight = raw.iter().map(|e| e.weight).sum::<f64>() / p as f64;
        for e in raw.iter_mut() {
            e.weight /= mean_weight;
            e.importance = match config.importance {
                ImportanceMode::Uniform => 1.0,
                ImportanceMode::Weight => e.weight.abs(),
            };
            if !(e.importance > 0.0 && e.importance.is_finite()) {
                return Err(RiskError::GenerationFailure("weight underflow".into()));
            }
        }
        let delta0 = weighted_delta(&raw, q);
        Ok(Self {
            entries: raw,
            delta0,
            threshold: 0.0,
        })
    }

    pub fn entries(&self) -> &[PortfolioEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn delta0(&self) -> &[f64] {
        &self.delta0
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    /// Same options and weights with computation models redrawn from `mix`.
    pub fn with_models(&self, mix: ModelMix, seed: u64) -> Result<Self> {
        mix.validate()?;
        let mut noise = NoiseHandle::for_stream(seed, crate::rng::StreamKey::new(crate::rng::Domain::Portfolio, 1, 0));
        let mut out = self.clone();
        for e in out.entries.iter_mut() {
            e.comp_model = mix.draw(&mut noise);
        }
        Ok(out)
    }

    /// Every option evaluated with the same computation model.
    pub fn with_uniform_model(&self, comp: ComputationModel) -> Self {
        let mut out = self.clone();
        for e in out.entries.iter_mut() {
            e.comp_model = comp;
        }
        out
    }

    /// Portfolio loss `(1/P) Σ w_i (V_{i,0} - V_{i,τ})` conditional on the
    /// scenario, evaluated analytically.
    pub fn expected_loss(&self, model: &MarketModel, scenario: &RiskScenario) -> Result<f64> {
        let tau = model.risk_horizon();
        let r = model.risk_free_rate();
        let mut total = 0.0;
        for e in &self.entries {
            let a = model.asset(e.option.asset_index);
            let vt = bs_price_delta(&e.option, scenario.asset_values[e.option.asset_index], tau, a.volatility, r)?;
            total += e.weight * (e.value0 - vt.value);
        }
        Ok(total / self.entries.len() as f64)
    }

    /// Sets the threshold to the empirical `1 - target_eta` quantile of the
    /// analytic conditional loss over `m` scenarios.
    pub fn calibrate_threshold(&self, model: &MarketModel, target_eta: f64, m: usize, seed: u64) -> Result<f64> {
        if !(target_eta > 0.0 && target_eta < 1.0) {
            return Err(RiskError::InvalidParameter {
                name: "target_eta",
                value: target_eta,
                constraint: "must lie in (0, 1)",
            });
        }
        let mut losses = self.loss_sample(model, m, seed, crate::rng::Domain::Calibration)?;
        losses.sort_by(|a, b| a.total_cmp(b));
        let idx = (((1.0 - target_eta) * m as f64).floor() as usize).min(m - 1);
        Ok(losses[idx])
    }

    /// Probability that the analytic conditional loss exceeds the threshold,
    /// with its standard error, from `m` outer scenarios. Only the outer
    /// expectation is sampled, so there is no nested bias.
    pub fn exact_exceedance_probability(&self, model: &MarketModel, m: usize, seed: u64) -> Result<(f64, f64)> {
        let losses = self.loss_sample(model, m, seed, crate::rng::Domain::Oracle)?;
        let hits = losses.iter().filter(|&&l| l > self.threshold).count() as f64;
        let p = hits / m as f64;
        Ok((p, (p * (1.0 - p) / m as f64).sqrt()))
    }

    fn loss_sample(&self, model: &MarketModel, m: usize, seed: u64, domain: crate::rng::Domain) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        const CHUNK: usize = 4096;
        let chunks = m.div_ceil(CHUNK);
        let parts: Vec<Result<Vec<f64>>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut noise = NoiseHandle::for_stream(seed, crate::rng::StreamKey::new(domain, 0, c as u64));
                let n = CHUNK.min(m - c * CHUNK);
                (0..n)
                    .map(|_| {
                        let s = model.sample_risk_scenario(&mut noise);
                        self.expected_loss(model, &s)
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(m);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Gross per-asset delta `Σ |w_i ∂V_{i,0}/∂R_{0,k}| / P`.
    pub fn gross_delta(&self, num_assets: usize) -> Vec<f64> {
        let mut g = vec![0.0; num_assets];
        for e in &self.entries {
            g[e.option.asset_index] += (e.weight * e.delta0).abs();
        }
        let p = self.entries.len() as f64;
        g.iter().map(|x| x / p).collect()
    }
}

fn weighted_delta(entries: &[PortfolioEntry], num_assets: usize) -> Vec<f64> {
    let mut d = vec![0.0; num_assets];
    for e in entries {
        d[e.option.asset_index] += e.weight * e.delta0;
    }
    let p = entries.len() as f64;
    d.iter().map(|x| x / p).collect()
}

fn displacement_dot(scenario: &RiskScenario, r0: &[f64], gradient: &[f64]) -> f64 {
    assert_eq!(scenario.asset_values.len(), r0.len());
    assert_eq!(r0.len(), gradient.len());
    scenario
        .asset_values
        .iter()
        .zip(r0)
        .zip(gradient)
        .map(|((rt, r0), g)| (rt - r0) * g)
        .sum()
}

/// Threshold paired with delta-corrected loss terms:
/// `K̂ = K + (R_τ - R_0)·∇V_0`, which keeps
/// `(1/P) Σ E[Λ̂_i | R_τ] - K̂ = (1/P) Σ E[Λ_i | R_τ] - K`.
pub fn adjusted_threshold(portfolio: &Portfolio, scenario: &RiskScenario, r0: &[f64]) -> f64 {
    portfolio.threshold + displacement_dot(scenario, r0, &portfolio.delta0)
}

/// Threshold paired with terms that apply the delta correction only at the
/// coarsest Milstein level: `K̂̂ = K + ½ (R_τ - R_0)·E[D_0]`, where
/// `level0_delta_estimate` is the portfolio-averaged weighted mean of `D_{i,0}`.
pub fn level0_adjusted_threshold(
    portfolio: &Portfolio,
    scenario: &RiskScenario,
    r0: &[f64],
    level0_delta_estimate: &[f64],
) -> f64 {
    portfolio.threshold + 0.5 * displacement_dot(scenario, r0, level0_delta_estimate)
}

// ---------------------------------------------------------------------------
// Manifest format
//
//   # comment
//   market <correlation> <rate> <horizon>
//   asset <initial_price> <drift> <volatility>        (one per asset, in order)
//   threshold <K>
//   <kind> <asset> <maturity> <strike> <weight> <importance> <model>
//
// Floats are written in shortest round-trip form, so a written manifest reads
// back bit-identically.
// ---------------------------------------------------------------------------

pub fn write_manifest<W: Write>(mut out: W, portfolio: &Portfolio, model: &MarketModel) -> std::io::Result<()> {
    let mut s = String::new();
    writeln!(s, "# nested-risk portfolio manifest v1").unwrap();
    writeln!(
        s,
        "market {:?} {:?} {:?}",
        model.correlation(),
        model.risk_free_rate(),
        model.risk_horizon()
    )
    .unwrap();
    for a in model.assets() {
        writeln!(s, "asset {:?} {:?} {:?}", a.initial_price, a.drift, a.volatility).unwrap();
    }
    writeln!(s, "threshold {:?}", portfolio.threshold).unwrap();
    writeln!(s, "# kind asset maturity strike weight importance model").unwrap();
    for e in &portfolio.entries {
        writeln!(
            s,
            "{} {} {:?} {:?} {:?} {:?} {}",
            e.option.kind.as_str(),
            e.option.asset_index,
            e.option.maturity,
            e.option.strike,
            e.weight,
            e.importance,
            e.comp_model.as_str()
        )
        .unwrap();
    }
    out.write_all(s.as_bytes())
}

pub fn read_manifest<R: BufRead>(input: R) -> Result<(Portfolio, MarketModel)> {
    let mut market: Option<(f64, f64, f64)> = None;
    let mut assets = Vec::new();
    let mut threshold = None;
    let mut options = Vec::new();

    for (lineno, line) in input.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.map_err(|e| RiskError::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| RiskError::Manifest { line: line_no, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| -> Result<f64> {
            fields
                .get(i)
                .ok_or_else(|| err(format!("missing field {i}")))?
                .parse::<f64>()
                .map_err(|e| err(format!("field {i}: {e}")))
        };
        match fields[0] {
            "market" => market = Some((num(1)?, num(2)?, num(3)?)),
            "asset" => assets.push(AssetParams::new(num(1)?, num(2)?, num(3)?).map_err(|e| err(e.to_string()))?),
            "threshold" => threshold = Some(num(1)?),
            "call" | "put" => {
                if fields.len() != 7 {
                    return Err(err(format!("expected 7 fields, found {}", fields.len())));
                }
                let kind = if fields[0] == "call" { OptionKind::Call } else { OptionKind::Put };
                let asset: usize = fields[1].parse().map_err(|e| err(format!("asset: {e}")))?;
                let option = VanillaOption::new(kind, num(3)?, num(2)?, asset).map_err(|e| err(e.to_string()))?;
                let comp = ComputationModel::parse(fields[6]).ok_or_else(|| err(format!("unknown model `{}`", fields[6])))?;
                options.push((option, num(4)?, num(5)?, comp));
            }
            other => return Err(err(format!("unknown record `{other}`"))),
        }
    }
    let missing = |what: &str| RiskError::Manifest {
        line: 0,
        message: format!("missing `{what}` record"),
    };
    let (rho, rate, horizon) = market.ok_or_else(|| missing("market"))?;
    let model = MarketModel::new(assets, rho, rate, horizon)?;
    let threshold = threshold.ok_or_else(|| missing("threshold"))?;
    let portfolio = Portfolio::from_parts(options, threshold, &model)?;
    Ok((portfolio, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::UniverseRanges;

    fn universe(seed: u64) -> MarketModel {
        MarketModel::generate(16, UniverseRanges::default(), 0.2, 0.05, 0.02, &mut NoiseHandle::from_seed(seed)).unwrap()
    }

    #[test]
    fn two_option_portfolio_is_delta_neutral() {
        let model = MarketModel::new(vec![AssetParams::new(100.0, 0.1, 0.25).unwrap()], 0.2, 0.05, 0.02).unwrap();
        let cfg = GenConfig {
            count: 2,
            weight_log_sd: 0.0,
            ..GenConfig::default()
        };
        let p = Portfolio::generate(&cfg, &model).unwrap();
        let e = p.entries();
        assert_eq!(e[0].option.kind, OptionKind::Put);
        assert_eq!(e[1].option.kind, OptionKind::Call);
        // b = -Δ_put / Δ_call from the analytic deltas, then normalised
        let b = -e[0].delta0 / e[1].delta0;
        assert!(b > 0.0);
        assert!((e[1].weight / e[0].weight - b).abs() < 1e-12 * b);
        assert!((e[0].weight + e[1].weight - 2.0).abs() < 1e-12);
        assert!(p.delta0()[0].abs() < 1e-12);
    }

    #[test]
    fn generated_portfolio_invariants() {
        let model = universe(1);
        let cfg = GenConfig {
            count: 1000,
            seed: 5,
            ..GenConfig::default()
        };
        let p = Portfolio::generate(&cfg, &model).unwrap();
        let mean_w = p.entries().iter().map(|e| e.weight).sum::<f64>() / p.len() as f64;
        assert!((mean_w - 1.0).abs() < 1e-9);
        let gross = p.gross_delta(model.num_assets());
        for (d, g) in p.delta0().iter().zip(&gross) {
            assert!(d.abs() <= 1e-6 * g, "delta {d} gross {g}");
        }
        for k in 0..16 {
            let has = |kind| p.entries().iter().any(|e| e.option.asset_index == k && e.option.kind == kind);
            assert!(has(OptionKind::Put) && has(OptionKind::Call));
        }
        for e in p.entries() {
            assert!(e.option.maturity > 0.02 && e.option.maturity <= 5.0);
            assert!((80.0..=120.0).contains(&e.option.strike));
            assert!((e.importance - e.weight.abs()).abs() < 1e-15);
        }
        let exact_eval = p.entries().iter().filter(|e| e.comp_model == ComputationModel::ExactEval).count();
        assert!((200..400).contains(&exact_eval), "{exact_eval}");
        assert!(p.entries().iter().all(|e| e.comp_model != ComputationModel::ApproxSim));
    }

    #[test]
    fn generation_is_deterministic() {
        let model = universe(2);
        let cfg = GenConfig {
            count: 50,
            seed: 9,
            ..GenConfig::default()
        };
        assert_eq!(Portfolio::generate(&cfg, &model).unwrap(), Portfolio::generate(&cfg, &model).unwrap());
    }

    #[test]
    fn degenerate_calls_fail_generation() {
        // zero-vol asset with calls far out of the money: no call delta at all
        let model = MarketModel::new(vec![AssetParams::new(50.0, 0.1, 0.0).unwrap()], 0.2, 0.05, 0.02).unwrap();
        let cfg = GenConfig {
            count: 4,
            weight_log_sd: 0.0,
            ..GenConfig::default()
        };
        assert!(matches!(
            Portfolio::generate(&cfg, &model),
            Err(RiskError::GenerationFailure(_))
        ));
    }

    #[test]
    fn zero_vol_extremes_still_balance() {
        // deep in-the-money calls and puts on a zero-vol asset
        let model = MarketModel::new(vec![AssetParams::new(100.0, 0.1, 0.0).unwrap()], 0.2, 0.05, 0.02).unwrap();
        let call = VanillaOption::new(OptionKind::Call, 60.0, 1.0, 0).unwrap();
        let put = VanillaOption::new(OptionKind::Put, 150.0, 2.0, 0).unwrap();
        let p = Portfolio::from_parts(
            vec![(put, 1.0, 1.0, ComputationModel::ExactEval), (call, 1.0, 1.0, ComputationModel::ExactEval)],
            0.0,
            &model,
        )
        .unwrap();
        let dp = p.entries()[0].delta0;
        let dc = p.entries()[1].delta0;
        assert!((dp + 1.0).abs() < 1e-15 && (dc - 1.0).abs() < 1e-15);
        let b = -dp / dc;
        assert!((dp + b * dc).abs() < 1e-15);
    }

    #[test]
    fn thresholds_with_zero_displacement_or_delta() {
        let model = universe(3);
        let cfg = GenConfig {
            count: 40,
            seed: 1,
            ..GenConfig::default()
        };
        let p = Portfolio::generate(&cfg, &model).unwrap().with_threshold(0.37);
        let r0 = model.initial_prices();
        let at_r0 = RiskScenario::new(r0.clone()).unwrap();
        assert_eq!(adjusted_threshold(&p, &at_r0, &r0), 0.37);
        let s = model.sample_risk_scenario(&mut NoiseHandle::from_seed(4));
        assert!((adjusted_threshold(&p, &s, &r0) - 0.37).abs() < 1e-9);
        assert_eq!(level0_adjusted_threshold(&p, &s, &r0, &vec![0.0; 16]), 0.37);
        assert_eq!(level0_adjusted_threshold(&p, &at_r0, &r0, &vec![1.0; 16]), 0.37);
    }

    #[test]
    fn single_option_threshold_dot_product() {
        let model = MarketModel::new(
            vec![AssetParams::new(100.0, 0.1, 0.2).unwrap(), AssetParams::new(90.0, 0.1, 0.3).unwrap()],
            0.2,
            0.05,
            0.02,
        )
        .unwrap();
        let opt = VanillaOption::new(OptionKind::Call, 95.0, 1.5, 1).unwrap();
        let p = Portfolio::from_parts(vec![(opt, 2.0, 1.0, ComputationModel::ExactEval)], 0.1, &model).unwrap();
        let delta = bs_price_delta(&opt, 90.0, 0.0, 0.3, 0.05).unwrap().delta;
        assert!((p.delta0()[1] - 2.0 * delta).abs() < 1e-15);
        assert_eq!(p.delta0()[0], 0.0);
        let s = RiskScenario::new(vec![103.0, 87.5]).unwrap();
        let r0 = model.initial_prices();
        let expect = 0.1 + (87.5 - 90.0) * 2.0 * delta;
        assert!((adjusted_threshold(&p, &s, &r0) - expect).abs() < 1e-12);
        let est = [0.4, -1.2];
        let expect0 = 0.1 + 0.5 * ((103.0 - 100.0) * 0.4 + (87.5 - 90.0) * -1.2);
        assert!((level0_adjusted_threshold(&p, &s, &r0, &est) - expect0).abs() < 1e-12);
    }

    #[test]
    fn manifest_rejects_garbage() {
        let bad = "market 0.2 0.05 0.02\nasset 100 0.1 0.2\nthreshold 0\ncall 0 1.0 100 1 1 nonsense\n";
        assert!(matches!(read_manifest(bad.as_bytes()), Err(RiskError::Manifest { line: 4, .. })));
        let missing = "asset 100 0.1 0.2\nthreshold 0\ncall 0 1.0 100 1 1 exact_eval\n";
        assert!(read_manifest(missing.as_bytes()).is_err());
    }
}
