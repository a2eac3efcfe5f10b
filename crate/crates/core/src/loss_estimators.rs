//! Per-option loss terms conditional on a risk scenario, and the sub-sampled
//! inner random variable `X = f_j / (P p_j) - K̂` built from them.
//!
//! Every term carries the option's weight, so `(1/P) Σ_i E[f_i | R_τ]` is the
//! (control-variate adjusted) portfolio loss.

use std::cell::RefCell;
use std::f64::consts::LN_2;

use crate::error::{Result, RiskError};
use crate::market_model::{MarketModel, Measure, RiskScenario};
use crate::portfolio::{ComputationModel, Portfolio, PortfolioEntry};
use crate::pricing::{bs_price_delta, norm_cdf, payoff_and_delta, OptionKind, VanillaOption};
use crate::rng::NoiseHandle;
use crate::subsampling::IndexSampler;

const LN_4: f64 = 2.0 * LN_2;

/// One realisation of a loss term and the evaluations charged for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermSample {
    pub value: f64,
    pub work: u64,
}

/// Which variance reductions the simulated terms use. The path after the risk
/// horizon is always shared between the scenario leg and the legs started
/// from today's prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvConfig {
    pub delta: bool,
    pub antithetic: bool,
}

impl CvConfig {
    pub const ALL: CvConfig = CvConfig {
        delta: true,
        antithetic: true,
    };
    pub const NONE: CvConfig = CvConfig {
        delta: false,
        antithetic: false,
    };

    /// Payoff evaluations per simulated path set.
    pub fn legs(self) -> u64 {
        if self.antithetic {
            3
        } else {
            2
        }
    }
}

/// Where the delta control variate enters the randomised-level Milstein terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaCvMode {
    AllLevels,
    /// Only the coarsest level carries the delta correction; must be paired
    /// with the level-0 threshold adjustment.
    Level0Only,
    Off,
}

/// Distribution of the random Milstein level, `P(l = j) = 4^{-ζ j} / C_ζ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelDistribution {
    zeta: f64,
    normalizer: f64,
    beta: f64,
    gamma: f64,
}

impl LevelDistribution {
    /// Requires `γ < ζ < β`, the condition for finite variance and finite
    /// expected cost.
    pub fn new(beta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < zeta && zeta < beta && beta.is_finite()) {
            return Err(RiskError::InvalidParameter {
                name: "zeta",
                value: zeta,
                constraint: "need 0 < gamma < zeta < beta",
            });
        }
        Ok(Self {
            zeta,
            normalizer: 1.0 / (1.0 - 4f64.powf(-zeta)),
            beta,
            gamma,
        })
    }

    /// `ζ = (β + γ)/2`.
    pub fn balanced(beta: f64, gamma: f64) -> Result<Self> {
        Self::new(beta, gamma, 0.5 * (beta + gamma))
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn probability(&self, level: u32) -> f64 {
        4f64.powf(-self.zeta * level as f64) / self.normalizer
    }

    /// Multiplier `C_ζ 4^{ζ l}` that makes the single sampled correction unbiased.
    pub fn weight(&self, level: u32) -> f64 {
        self.normalizer * 4f64.powf(self.zeta * level as f64)
    }

    /// `Σ_j P(l=j) cost(j)` for [`milstein_cost`] with `legs` payoff legs.
    pub fn expected_cost(&self, legs: u64) -> f64 {
        if self.zeta <= 1.0 {
            return f64::INFINITY;
        }
        let x = 4f64.powf(1.0 - self.zeta);
        legs as f64 / self.normalizer * (1.0 + 0.25 * x) / (1.0 - x)
    }
}

impl Default for LevelDistribution {
    fn default() -> Self {
        Self::balanced(2.0, 1.0).expect("default level distribution is valid")
    }
}

/// Inverse-CDF draw of the random level.
pub fn sample_level(dist: &LevelDistribution, noise: &mut NoiseHandle) -> u32 {
    let u = noise.uniform_open0();
    let l = (u.ln() / (-dist.zeta * LN_4)).floor();
    l as u32
}

/// Work of one Milstein level-`l` correction: each payoff leg is charged the
/// time steps of its fine path plus those of its coarse path.
pub fn milstein_cost(level: u32, legs: u64) -> u64 {
    let fine = 1u64 << (2 * level);
    let coarse = if level > 0 { fine / 4 } else { 0 };
    legs * (fine + coarse)
}

/// Everything about one option that the hot loops need, precomputed.
#[derive(Debug, Clone)]
struct TermKernel {
    option: VanillaOption,
    asset: usize,
    weight: f64,
    s0: f64,
    vol: f64,
    discount: f64,
    value0: f64,
    delta0: f64,
    comp: ComputationModel,
    tail: f64,
    head_det: f64,
    head_scale: f64,
    tail_drift: f64,
    tail_scale: f64,
}

impl TermKernel {
    fn new(entry: &PortfolioEntry, model: &MarketModel) -> Result<Self> {
        let tau = model.risk_horizon();
        let option = entry.option;
        if option.asset_index >= model.num_assets() {
            return Err(RiskError::InvalidContract(format!("asset index {} out of range", option.asset_index)));
        }
        if option.maturity <= tau {
            return Err(RiskError::ExpiredContract {
                time_now: tau,
                maturity: option.maturity,
            });
        }
        let a = model.asset(option.asset_index);
        let r = model.risk_free_rate();
        let today = bs_price_delta(&option, a.initial_price, 0.0, a.volatility, r)?;
        let drift = r - 0.5 * a.volatility * a.volatility;
        let tail = option.maturity - tau;
        Ok(Self {
            option,
            asset: option.asset_index,
            weight: entry.weight,
            s0: a.initial_price,
            vol: a.volatility,
            discount: (-r * option.maturity).exp(),
            value0: today.value,
            delta0: today.delta,
            comp: entry.comp_model,
            tail,
            head_det: (drift * tau).exp(),
            head_scale: a.volatility * tau.sqrt(),
            tail_drift: drift * tail,
            tail_scale: a.volatility * tail.sqrt(),
        })
    }

    #[inline]
    fn h(&self, terminal: f64, sensitivity: f64) -> (f64, f64) {
        payoff_and_delta(self.option.kind, self.option.strike, self.discount, terminal, sensitivity)
    }

    fn exact_eval(&self, r_tau: f64, model: &MarketModel, cv: CvConfig) -> f64 {
        let later = bs_price_delta(&self.option, r_tau, model.risk_horizon(), self.vol, model.risk_free_rate())
            .expect("maturity checked against the horizon");
        let mut loss = self.value0 - later.value;
        if cv.delta {
            loss -= (self.s0 - r_tau) * self.delta0;
        }
        self.weight * loss
    }

    /// Loss of one path set given multiplicative growth factors: `head_plus`
    /// and `head_minus` over `[0, τ]` from today's price, `tail` after `τ`.
    #[inline]
    fn path_loss(&self, head_plus: f64, head_minus: f64, tail: f64, r_tau: f64, antithetic: bool, delta: bool) -> f64 {
        let (h_cond, _) = self.h(r_tau * tail, tail);
        let sens_plus = head_plus * tail;
        let (h_plus, d_plus) = self.h(self.s0 * sens_plus, sens_plus);
        if antithetic {
            let sens_minus = head_minus * tail;
            let (h_minus, d_minus) = self.h(self.s0 * sens_minus, sens_minus);
            let mut loss = 0.5 * (h_plus + h_minus) - h_cond;
            if delta {
                loss -= 0.5 * (self.s0 - r_tau) * (d_plus + d_minus);
            }
            loss
        } else {
            let mut loss = h_plus - h_cond;
            if delta {
                loss -= (self.s0 - r_tau) * d_plus;
            }
            loss
        }
    }

    fn exact_sim(&self, r_tau: f64, cv: CvConfig, noise: &mut NoiseHandle) -> f64 {
        let z_head = noise.normal();
        let z_tail = noise.normal();
        let head_rand = (self.head_scale * z_head).exp();
        let tail = (self.tail_drift + self.tail_scale * z_tail).exp();
        let loss = self.path_loss(
            self.head_det * head_rand,
            self.head_det / head_rand,
            tail,
            r_tau,
            cv.antithetic,
            cv.delta,
        );
        self.weight * loss
    }

    /// Weighted `ΔΛ_l` at a fixed level: fine minus coarse path loss, with
    /// `Λ_{-1} = 0`.
    fn milstein_difference(
        &self,
        r_tau: f64,
        model: &MarketModel,
        level: u32,
        mode: DeltaCvMode,
        cv: CvConfig,
        noise: &mut NoiseHandle,
    ) -> f64 {
        let tau = model.risk_horizon();
        let head_start = noise.clone();
        let (plus_f, plus_c) = model.milstein_growth_pair(self.asset, tau, level, Measure::RiskNeutral, noise);
        let (minus_f, minus_c) = if cv.antithetic {
            model.milstein_growth_pair(self.asset, tau, level, Measure::RiskNeutral, &mut head_start.flipped())
        } else {
            (plus_f, plus_c)
        };
        let (tail_f, tail_c) = model.milstein_growth_pair(self.asset, self.tail, level, Measure::RiskNeutral, noise);

        let (delta_fine, delta_coarse) = match mode {
            DeltaCvMode::AllLevels => (cv.delta, cv.delta),
            DeltaCvMode::Level0Only => (cv.delta && level == 0, false),
            DeltaCvMode::Off => (false, false),
        };
        let fine = self.path_loss(plus_f, minus_f, tail_f, r_tau, cv.antithetic, delta_fine);
        let coarse = match (plus_c, minus_c, tail_c) {
            (Some(p), Some(m), Some(t)) => self.path_loss(p, m, t, r_tau, cv.antithetic, delta_coarse),
            _ => 0.0,
        };
        self.weight * (fine - coarse)
    }

    fn approx_sim(
        &self,
        r_tau: f64,
        model: &MarketModel,
        dist: &LevelDistribution,
        mode: DeltaCvMode,
        cv: CvConfig,
        noise: &mut NoiseHandle,
    ) -> TermSample {
        let level = sample_level(dist, noise);
        TermSample {
            value: dist.weight(level) * self.milstein_difference(r_tau, model, level, mode, cv, noise),
            work: milstein_cost(level, cv.legs()),
        }
    }

    /// Threshold gradient contribution `c_i`: the expected shift the delta
    /// correction adds per unit of `R_τ - R_0`.
    fn gradient(&self, model: &MarketModel, cv: CvConfig, mode: DeltaCvMode) -> f64 {
        if !cv.delta {
            return 0.0;
        }
        match (self.comp, mode) {
            (ComputationModel::ApproxSim, DeltaCvMode::Off) => 0.0,
            (ComputationModel::ApproxSim, DeltaCvMode::Level0Only) => 0.5 * level0_delta(self, model),
            _ => self.delta0,
        }
    }
}

fn check_scenario(entry: &PortfolioEntry, scenario: &RiskScenario) -> Result<f64> {
    scenario
        .asset_values
        .get(entry.option.asset_index)
        .copied()
        .ok_or_else(|| RiskError::InvalidContract(format!("scenario has no asset {}", entry.option.asset_index)))
}

/// `w (V_0 - V_τ(R_τ) - (R_0 - R_τ) ∂V_0/∂R_0)`, analytic and deterministic
/// given the scenario. The delta term is dropped when `cv.delta` is off.
pub fn exact_eval_term(entry: &PortfolioEntry, scenario: &RiskScenario, model: &MarketModel, cv: CvConfig) -> Result<TermSample> {
    let r_tau = check_scenario(entry, scenario)?;
    let k = TermKernel::new(entry, model)?;
    Ok(TermSample {
        value: k.exact_eval(r_tau, model, cv),
        work: 1,
    })
}

/// Exact GBM simulation of the antithetic, delta-corrected loss.
pub fn exact_sim_term(
    entry: &PortfolioEntry,
    scenario: &RiskScenario,
    model: &MarketModel,
    cv: CvConfig,
    noise: &mut NoiseHandle,
) -> Result<TermSample> {
    let r_tau = check_scenario(entry, scenario)?;
    let k = TermKernel::new(entry, model)?;
    Ok(TermSample {
        value: k.exact_sim(r_tau, cv, noise),
        work: cv.legs(),
    })
}

/// Randomised-level Milstein estimate `C_ζ 4^{ζ l} ΔΛ_l` of the loss term.
pub fn approx_sim_term(
    entry: &PortfolioEntry,
    scenario: &RiskScenario,
    model: &MarketModel,
    dist: &LevelDistribution,
    mode: DeltaCvMode,
    cv: CvConfig,
    noise: &mut NoiseHandle,
) -> Result<TermSample> {
    let r_tau = check_scenario(entry, scenario)?;
    let k = TermKernel::new(entry, model)?;
    Ok(k.approx_sim(r_tau, model, dist, mode, cv, noise))
}

/// Fixed-level Milstein correction `ΔΛ_l` (no randomisation weight), used to
/// measure the coupling variance decay.
pub fn milstein_level_difference(
    entry: &PortfolioEntry,
    scenario: &RiskScenario,
    model: &MarketModel,
    level: u32,
    mode: DeltaCvMode,
    cv: CvConfig,
    noise: &mut NoiseHandle,
) -> Result<f64> {
    let r_tau = check_scenario(entry, scenario)?;
    let k = TermKernel::new(entry, model)?;
    Ok(k.milstein_difference(r_tau, model, level, mode, cv, noise))
}

/// `E[D_{i,0}]`, the expected sum of the two level-0 pathwise deltas (weight
/// excluded). It does not depend on the scenario because both legs start
/// from today's price.
pub fn expected_level0_delta(entry: &PortfolioEntry, model: &MarketModel) -> Result<f64> {
    let k = TermKernel::new(entry, model)?;
    Ok(level0_delta(&k, model))
}

/// One-step Milstein factor `1 + a + b z + c (z² - 1)` as `c z² + b z + d`.
#[derive(Clone, Copy)]
struct Quadratic {
    c: f64,
    b: f64,
    d: f64,
}

impl Quadratic {
    fn milstein(rate: f64, vol: f64, dt: f64) -> Self {
        let c = 0.5 * vol * vol * dt;
        Self {
            c,
            b: vol * dt.sqrt(),
            d: 1.0 + rate * dt - c,
        }
    }

    fn at(&self, z: f64) -> f64 {
        (self.c * z + self.b) * z + self.d
    }

    fn mean(&self) -> f64 {
        self.c + self.d
    }

    /// `∫_lo^hi q(z) φ(z) dz`.
    fn partial_mean(&self, lo: f64, hi: f64) -> f64 {
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = norm_cdf(hi) - norm_cdf(lo);
        let (pl, ph) = (phi(lo), phi(hi));
        self.c * (mass + lo * pl - hi * ph) + self.b * (pl - ph) + self.d * mass
    }

    /// `E[q(Z) 1{q(Z) > g}]`.
    fn mean_above(&self, g: f64) -> f64 {
        if self.c == 0.0 {
            // b is zero too: deterministic factor
            return if self.d > g { self.d } else { 0.0 };
        }
        let disc = self.b * self.b - 4.0 * self.c * (self.d - g);
        if disc <= 0.0 {
            return self.mean();
        }
        let root = disc.sqrt();
        let lo = (-self.b - root) / (2.0 * self.c);
        let hi = (-self.b + root) / (2.0 * self.c);
        self.mean() - self.partial_mean(lo, hi)
    }
}

/// `E[D_0]` by trapezoidal quadrature over the head normal, with the tail
/// normal integrated in closed form.
fn level0_delta(k: &TermKernel, model: &MarketModel) -> f64 {
    let r = model.risk_free_rate();
    let head = Quadratic::milstein(r, k.vol, model.risk_horizon());
    let tail = Quadratic::milstein(r, k.vol, k.tail);
    let strike = k.option.strike;
    let call = k.option.kind == OptionKind::Call;

    // E_w[G 1{in the money}] for a fixed head factor a
    let tail_part = |a: f64| -> f64 {
        if a == 0.0 {
            return if call { 0.0 } else { tail.mean() };
        }
        let g = strike / (k.s0 * a);
        // in the money: a G > K/s0 for calls, a G < K/s0 for puts
        let above = (a > 0.0) == call;
        let m = tail.mean_above(g);
        if above {
            m
        } else {
            tail.mean() - m
        }
    };

    let sign = if call { 1.0 } else { -1.0 };
    let leg = if k.vol == 0.0 {
        let a = head.d;
        a * tail_part(a)
    } else {
        const HALF_WIDTH: f64 = 12.0;
        const STEPS: usize = 4800;
        let h = 2.0 * HALF_WIDTH / STEPS as f64;
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = 0.0;
        for i in 0..=STEPS {
            let z = -HALF_WIDTH + h * i as f64;
            let a = head.at(z);
            let f = a * tail_part(a) * norm * (-0.5 * z * z).exp();
            acc += if i == 0 || i == STEPS { 0.5 * f } else { f };
        }
        acc * h
    };
    2.0 * sign * k.discount * leg
}

/// How inner samples are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConfig {
    pub cv: CvConfig,
    pub delta_mode: DeltaCvMode,
    pub levels: LevelDistribution,
    /// Draw one random option per inner sample; otherwise every inner sample
    /// covers the whole portfolio.
    pub subsampling: bool,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            cv: CvConfig::ALL,
            delta_mode: DeltaCvMode::Level0Only,
            levels: LevelDistribution::default(),
            subsampling: true,
        }
    }
}

/// Portfolio-wide precomputation shared by every scenario of a run.
#[derive(Debug, Clone)]
pub struct InnerSampler<'a> {
    model: &'a MarketModel,
    config: InnerConfig,
    threshold: f64,
    r0: Vec<f64>,
    kernels: Vec<TermKernel>,
    index: IndexSampler,
    /// `1 / (P p_i)`.
    scale: Vec<f64>,
    gradient: Vec<f64>,
    exact_terms: Vec<usize>,
    random_terms: Vec<usize>,
    /// Position of each analytic term in the per-scenario value cache.
    cache_slot: Vec<usize>,
}

impl<'a> InnerSampler<'a> {
    pub fn new(portfolio: &Portfolio, model: &'a MarketModel, config: InnerConfig) -> Result<Self> {
        let kernels = portfolio
            .entries()
            .iter()
            .map(|e| TermKernel::new(e, model))
            .collect::<Result<Vec<_>>>()?;
        let legs = config.cv.legs();
        let work: Vec<f64> = kernels
            .iter()
            .map(|k| match k.comp {
                ComputationModel::ExactEval => 1.0,
                ComputationModel::ExactSim => legs as f64,
                ComputationModel::ApproxSim => config.levels.expected_cost(legs),
            })
            .collect();
        let importance: Vec<f64> = portfolio.entries().iter().map(|e| e.importance).collect();
        let index = IndexSampler::optimal(&importance, &work)?;
        let p = kernels.len() as f64;
        let scale = index.probabilities().iter().map(|pi| 1.0 / (p * pi)).collect();

        let mut gradient = vec![0.0; model.num_assets()];
        for k in &kernels {
            gradient[k.asset] += k.weight * k.gradient(model, config.cv, config.delta_mode) / p;
        }
        let (exact_terms, random_terms): (Vec<usize>, Vec<usize>) =
            (0..kernels.len()).partition(|&i| kernels[i].comp == ComputationModel::ExactEval);
        let mut cache_slot = vec![usize::MAX; kernels.len()];
        for (slot, &i) in exact_terms.iter().enumerate() {
            cache_slot[i] = slot;
        }
        Ok(Self {
            model,
            config,
            threshold: portfolio.threshold(),
            r0: model.initial_prices(),
            kernels,
            index,
            scale,
            gradient,
            exact_terms,
            random_terms,
            cache_slot,
        })
    }

    pub fn config(&self) -> &InnerConfig {
        &self.config
    }

    pub fn index_sampler(&self) -> &IndexSampler {
        &self.index
    }

    /// Per-asset gradient `a` of the adjusted threshold `K + (R_τ - R_0)·a`.
    pub fn threshold_gradient(&self) -> &[f64] {
        &self.gradient
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// The inner random variable conditional on `scenario`. Without
    /// sub-sampling the analytic terms are evaluated here once; their cost is
    /// reported by [`InnerVariable::setup_work`].
    pub fn variable(&self, scenario: &RiskScenario) -> InnerVariable<'_> {
        assert_eq!(scenario.asset_values.len(), self.r0.len(), "scenario dimension");
        let shift: f64 = scenario
            .asset_values
            .iter()
            .zip(&self.r0)
            .zip(&self.gradient)
            .map(|((rt, r0), g)| (rt - r0) * g)
            .sum();
        let mut cached = 0.0;
        let mut setup_work = 0;
        if !self.config.subsampling {
            for &i in &self.exact_terms {
                let k = &self.kernels[i];
                cached += k.exact_eval(scenario.asset_values[k.asset], self.model, self.config.cv);
            }
            setup_work = self.exact_terms.len() as u64;
        }
        InnerVariable {
            sampler: self,
            r_tau: scenario.asset_values.clone(),
            threshold: self.threshold + shift,
            cached_exact: cached,
            setup_work,
            exact_values: RefCell::new(if self.config.subsampling {
                vec![f64::NAN; self.exact_terms.len()]
            } else {
                Vec::new()
            }),
        }
    }

    /// Term `i` for the scenario `r_tau`. Analytic terms are charged one
    /// evaluation per draw; `cache` only spares recomputing the same value.
    fn term(&self, i: usize, r_tau: &[f64], cache: Option<&RefCell<Vec<f64>>>, noise: &mut NoiseHandle) -> TermSample {
        let k = &self.kernels[i];
        let rt = r_tau[k.asset];
        let cfg = &self.config;
        match k.comp {
            ComputationModel::ExactEval => {
                let value = match cache {
                    Some(cell) => {
                        let slot = self.cache_slot[i];
                        let cached = cell.borrow()[slot];
                        if cached.is_nan() {
                            let v = k.exact_eval(rt, self.model, cfg.cv);
                            cell.borrow_mut()[slot] = v;
                            v
                        } else {
                            cached
                        }
                    }
                    None => k.exact_eval(rt, self.model, cfg.cv),
                };
                TermSample { value, work: 1 }
            }
            ComputationModel::ExactSim => TermSample {
                value: k.exact_sim(rt, cfg.cv, noise),
                work: cfg.cv.legs(),
            },
            ComputationModel::ApproxSim => k.approx_sim(rt, self.model, &cfg.levels, cfg.delta_mode, cfg.cv, noise),
        }
    }
}

/// `X` conditional on one scenario `Y = R_τ`.
#[derive(Debug, Clone)]
pub struct InnerVariable<'s> {
    sampler: &'s InnerSampler<'s>,
    r_tau: Vec<f64>,
    threshold: f64,
    cached_exact: f64,
    setup_work: u64,
    exact_values: RefCell<Vec<f64>>,
}

impl InnerVariable<'_> {
    /// The adjusted threshold in force for this scenario.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Work spent once per scenario before any draw.
    pub fn setup_work(&self) -> u64 {
        self.setup_work
    }

    /// One inner sample. Index draws are not charged.
    #[inline]
    pub fn draw(&self, noise: &mut NoiseHandle) -> TermSample {
        let s = self.sampler;
        if s.config.subsampling {
            let j = s.index.draw(noise);
            let t = s.term(j, &self.r_tau, Some(&self.exact_values), noise);
            TermSample {
                value: t.value * s.scale[j] - self.threshold,
                work: t.work,
            }
        } else {
            let mut sum = self.cached_exact;
            let mut work = 0;
            for &i in &s.random_terms {
                let t = s.term(i, &self.r_tau, None, noise);
                sum += t.value;
                work += t.work;
            }
            TermSample {
                value: sum / s.kernels.len() as f64 - self.threshold,
                work,
            }
        }
    }

    /// `E[X | Y]` in closed form: the analytic portfolio loss minus the raw
    /// threshold, which the control variates and adjusted threshold preserve.
    pub fn conditional_mean(&self) -> f64 {
        let s = self.sampler;
        let no_cv = CvConfig::NONE;
        let total: f64 = s
            .kernels
            .iter()
            .map(|k| k.exact_eval(self.r_tau[k.asset], s.model, no_cv))
            .sum();
        total / s.kernels.len() as f64 - s.threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::AssetParams;
    use crate::rng::{Domain, StreamKey};

    fn model(vol: f64) -> MarketModel {
        MarketModel::new(vec![AssetParams::new(100.0, 0.1, vol).unwrap()], 0.2, 0.05, 0.02).unwrap()
    }

    fn entry(m: &MarketModel, kind: OptionKind, strike: f64, maturity: f64, comp: ComputationModel) -> PortfolioEntry {
        let opt = VanillaOption::new(kind, strike, maturity, 0).unwrap();
        Portfolio::from_parts(vec![(opt, 1.0, 1.0, comp)], 0.0, m).unwrap().entries()[0].clone()
    }

    #[test]
    fn level_distribution_basics() {
        let d = LevelDistribution::default();
        assert_eq!(d.zeta(), 1.5);
        assert!((d.probability(0) - 0.875).abs() < 1e-15);
        assert!((d.normalizer() - 1.0 / (1.0 - 4f64.powf(-1.5))).abs() < 1e-12);
        assert!(LevelDistribution::new(2.0, 1.0, 2.0).is_err());
        assert!(LevelDistribution::new(2.0, 1.0, 1.0).is_err());
        let total: f64 = (0..60).map(|j| d.probability(j)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_zeta_always_gives_level_zero() {
        let d = LevelDistribution::new(1e9, 1.0, 1e8).unwrap();
        let mut n = NoiseHandle::from_seed(1);
        for _ in 0..10_000 {
            assert_eq!(sample_level(&d, &mut n), 0);
        }
    }

    #[test]
    fn expected_cost_matches_series() {
        for zeta in [1.1, 1.5, 1.9] {
            let d = LevelDistribution::new(2.0, 1.0, zeta).unwrap();
            let cost = |j: u32| {
                let c = if j < 25 { milstein_cost(j, 3) as f64 } else { 3.0 * 1.25 * 4f64.powi(j as i32) };
                c
            };
            let series: f64 = (0..400).map(|j| d.probability(j) * cost(j)).sum();
            assert!((d.expected_cost(3) - series).abs() < 1e-9 * series, "{zeta}");
        }
        assert_eq!(milstein_cost(0, 3), 3);
        assert_eq!(milstein_cost(2, 2), 2 * (16 + 4));
    }

    #[test]
    fn exact_eval_vanishes_at_zero_displacement_in_the_short_horizon_limit() {
        let m = model(0.25).with_horizon(1e-12).unwrap();
        let e = entry(&m, OptionKind::Call, 95.0, 1.0, ComputationModel::ExactEval);
        let s = RiskScenario::new(vec![100.0]).unwrap();
        let t = exact_eval_term(&e, &s, &m, CvConfig::ALL).unwrap();
        assert!(t.value.abs() < 1e-9, "{}", t.value);
        assert_eq!(t.work, 1);
    }

    #[test]
    fn zero_vol_exact_sim_equals_exact_eval() {
        let m = model(0.0);
        for kind in [OptionKind::Call, OptionKind::Put] {
            let e = entry(&m, kind, 100.0, 2.0, ComputationModel::ExactSim);
            let s = RiskScenario::new(vec![93.0]).unwrap();
            let eval = exact_eval_term(&e, &s, &m, CvConfig::ALL).unwrap().value;
            let mut n = NoiseHandle::from_seed(3);
            for _ in 0..10 {
                let sim = exact_sim_term(&e, &s, &m, CvConfig::ALL, &mut n).unwrap();
                assert!((sim.value - eval).abs() < 1e-10, "{kind:?} {} {eval}", sim.value);
                assert_eq!(sim.work, 3);
            }
        }
    }

    #[test]
    fn exact_sim_rejects_expired_contract() {
        let m = model(0.2);
        let e = entry(&m, OptionKind::Call, 100.0, 1.0, ComputationModel::ExactSim);
        let short = m.with_horizon(1.5).unwrap();
        let s = RiskScenario::new(vec![100.0]).unwrap();
        assert!(exact_sim_term(&e, &s, &short, CvConfig::ALL, &mut NoiseHandle::from_seed(0)).is_err());
    }

    #[test]
    fn level0_delta_quadrature_matches_monte_carlo() {
        let m = model(0.35);
        for (kind, strike, mat) in [(OptionKind::Call, 105.0, 1.3), (OptionKind::Put, 92.0, 4.0)] {
            let e = entry(&m, kind, strike, mat, ComputationModel::ApproxSim);
            let exact = expected_level0_delta(&e, &m).unwrap();
            let k = TermKernel::new(&e, &m).unwrap();
            let mut n = NoiseHandle::for_stream(5, StreamKey::new(Domain::Diagnostics, 0, 0));
            let reps = 400_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..reps {
                let start = n.clone();
                let (p, _) = m.milstein_growth_pair(0, 0.02, 0, Measure::RiskNeutral, &mut n);
                let (q, _) = m.milstein_growth_pair(0, 0.02, 0, Measure::RiskNeutral, &mut start.flipped());
                let (g, _) = m.milstein_growth_pair(0, mat - 0.02, 0, Measure::RiskNeutral, &mut n);
                let d = k.h(100.0 * p * g, p * g).1 + k.h(100.0 * q * g, q * g).1;
                s1 += d;
                s2 += d * d;
            }
            let mean = s1 / reps as f64;
            let se = ((s2 / reps as f64 - mean * mean) / reps as f64).sqrt();
            assert!((mean - exact).abs() < 4.0 * se, "{kind:?}: mc {mean} ± {se}, quad {exact}");
        }
    }

    #[test]
    fn single_option_inner_draw_is_term_minus_threshold() {
        let m = model(0.2);
        let e = entry(&m, OptionKind::Put, 100.0, 1.0, ComputationModel::ExactEval);
        let p = Portfolio::from_parts(vec![(e.option, 1.0, 1.0, ComputationModel::ExactEval)], 0.3, &m).unwrap();
        let sampler = InnerSampler::new(&p, &m, InnerConfig::default()).unwrap();
        let s = RiskScenario::new(vec![97.0]).unwrap();
        let var = sampler.variable(&s);
        let f = exact_eval_term(&e, &s, &m, CvConfig::ALL).unwrap().value;
        let x = var.draw(&mut NoiseHandle::from_seed(0));
        assert!((x.value - (f - var.threshold())).abs() < 1e-14);
        assert_eq!(x.work, 1);
        // the delta-adjusted threshold turns the analytic loss into the raw one
        assert!((x.value - var.conditional_mean()).abs() < 1e-12);
    }
}
