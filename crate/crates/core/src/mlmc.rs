//! Multilevel estimation of `η = E[H(E[X | Y])]`.
//!
//! Level `ℓ` approximates the inner expectation with `N_ℓ` samples, where
//! `N_0 2^ℓ ≤ N_ℓ ≤ N_0 4^ℓ` is chosen per scenario by the adaptive rule.
//! Level differences are antithetic: the coarser estimators are averages over
//! groups of the same inner draws used by the finer one.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Result, RiskError};
use crate::loss_estimators::{InnerSampler, InnerVariable};
use crate::rng::{Domain, NoiseHandle, StreamKey};

/// `H(x) = 1` for `x > 0`, else 0.
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerCountMode {
    Adaptive,
    /// `N_ℓ = N_0 4^ℓ` for every scenario.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    pub n0: u64,
    pub c: f64,
    pub r: f64,
    pub mode: InnerCountMode,
}

impl AdaptiveConfig {
    pub fn new(n0: u64, c: f64, r: f64, mode: InnerCountMode) -> Result<Self> {
        if n0 < 2 {
            return Err(RiskError::InvalidParameter {
                name: "n0",
                value: n0 as f64,
                constraint: "must be at least 2",
            });
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(RiskError::InvalidParameter {
                name: "c",
                value: c,
                constraint: "must be positive",
            });
        }
        if !(r > 1.0 && r < 2.0) {
            return Err(RiskError::InvalidParameter {
                name: "r",
                value: r,
                constraint: "must lie in (1, 2)",
            });
        }
        Ok(Self { n0, c, r, mode })
    }

    pub fn min_inner(&self, level: u32) -> u64 {
        self.n0 << level
    }

    pub fn max_inner(&self, level: u32) -> u64 {
        self.n0 << (2 * level)
    }
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            n0: 32,
            c: 3.0,
            r: 1.5,
            mode: InnerCountMode::Adaptive,
        }
    }
}

/// Mean and sum of squares of `n` inner draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerEstimate {
    pub n: u64,
    pub mean: f64,
    pub sq_sum: f64,
    pub work: u64,
}

impl InnerEstimate {
    /// Biased (divide by `n`) variance.
    pub fn variance(&self) -> f64 {
        (self.sq_sum / self.n as f64 - self.mean * self.mean).max(0.0)
    }

    /// `δ̂ = |mean| / sd`, infinite when the draws do not vary.
    pub fn boundary_distance(&self) -> f64 {
        let sd = self.variance().sqrt();
        if sd > 0.0 {
            self.mean.abs() / sd
        } else {
            f64::INFINITY
        }
    }
}

/// Plain Monte Carlo estimate of `E[X | Y]` from `n` fresh draws.
pub fn inner_estimate(var: &InnerVariable<'_>, n: u64, noise: &mut NoiseHandle) -> InnerEstimate {
    let (mut sum, mut sq, mut work) = (0.0, 0.0, 0);
    for _ in 0..n {
        let t = var.draw(noise);
        sum += t.value;
        sq += t.value * t.value;
        work += t.work;
    }
    InnerEstimate {
        n,
        mean: sum / n as f64,
        sq_sum: sq,
        work,
    }
}

/// Number of inner samples for `level` in this scenario, and the work spent on
/// the draws that decided it. Those draws are not reused by the estimator.
pub fn adaptive_n(var: &InnerVariable<'_>, level: u32, cfg: &AdaptiveConfig, noise: &mut NoiseHandle) -> (u64, u64) {
    let cap = cfg.max_inner(level);
    if cfg.mode == InnerCountMode::Fixed {
        return (cap, 0);
    }
    let mut n = cfg.min_inner(level);
    let mut work = 0;
    let scale = (cfg.n0 as f64).sqrt() * (1u64 << level) as f64 / cfg.c;
    loop {
        if 2 * n >= cap {
            return (cap, work);
        }
        let est = inner_estimate(var, n, noise);
        work += est.work;
        let required = cap as f64 * (scale * est.boundary_distance()).powf(-cfg.r);
        if n as f64 >= required {
            return (n, work);
        }
        n *= 2;
    }
}

/// One outer sample of a level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSample {
    /// `Δ̃H_ℓ`, or `H(Ê_ℓ)` alone at the coarsest level used.
    pub delta: f64,
    /// `H(Ê_ℓ)` from the first `N_ℓ` draws.
    pub fine: f64,
    pub work: u64,
    /// Work needed for `fine` alone.
    pub work_fine: u64,
    pub n_fine: u64,
    pub n_coarse: u64,
}

/// Antithetic level difference for one scenario. At `level == 0` (or with
/// `fine_only`) only the fine indicator is formed.
pub fn antithetic_delta(
    var: &InnerVariable<'_>,
    level: u32,
    cfg: &AdaptiveConfig,
    fine_only: bool,
    noise: &mut NoiseHandle,
) -> LevelSample {
    let setup = var.setup_work();
    let (n_fine, decide_fine) = adaptive_n(var, level, cfg, noise);
    if fine_only || level == 0 {
        let est = inner_estimate(var, n_fine, noise);
        let h = heaviside(est.mean);
        let work = setup + decide_fine + est.work;
        return LevelSample {
            delta: h,
            fine: h,
            work,
            work_fine: work,
            n_fine,
            n_coarse: 0,
        };
    }
    let (n_coarse, decide_coarse) = adaptive_n(var, level - 1, cfg, noise);
    let n = n_fine.max(n_coarse);
    let group = n_fine.min(n_coarse);
    let groups = n / group;

    let mut total = 0.0;
    let mut group_sum = 0.0;
    let mut group_hits = 0.0;
    let mut first_group = f64::NAN;
    let mut draw_work = 0;
    let mut fine_draw_work = 0;
    for i in 0..n {
        let t = var.draw(noise);
        total += t.value;
        group_sum += t.value;
        draw_work += t.work;
        if i < n_fine {
            fine_draw_work += t.work;
        }
        if (i + 1) % group == 0 {
            let h = heaviside(group_sum / group as f64);
            if first_group.is_nan() {
                first_group = h;
            }
            group_hits += h;
            group_sum = 0.0;
        }
    }
    let whole = heaviside(total / n as f64);
    let averaged = group_hits / groups as f64;
    let (delta, fine) = if n_fine >= n_coarse {
        (whole - averaged, whole)
    } else {
        (averaged - whole, first_group)
    };
    LevelSample {
        delta,
        fine,
        work: setup + decide_fine + decide_coarse + draw_work,
        work_fine: setup + decide_fine + fine_draw_work,
        n_fine,
        n_coarse,
    }
}

/// Running sums for one level, merged in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LevelAccumulator {
    pub m: u64,
    pub m_delta: u64,
    pub sum_delta: f64,
    pub sq_delta: f64,
    pub sum_fine: f64,
    pub sq_fine: f64,
    pub work: u64,
    pub work_fine: u64,
    pub sum_n: u64,
}

impl LevelAccumulator {
    fn push(&mut self, s: &LevelSample, with_delta: bool) {
        self.m += 1;
        if with_delta {
            self.m_delta += 1;
            self.sum_delta += s.delta;
            self.sq_delta += s.delta * s.delta;
        }
        self.sum_fine += s.fine;
        self.sq_fine += s.fine * s.fine;
        self.work += s.work;
        self.work_fine += s.work_fine;
        self.sum_n += s.n_fine;
    }

    pub fn merge(&mut self, o: &LevelAccumulator) {
        self.m += o.m;
        self.m_delta += o.m_delta;
        self.sum_delta += o.sum_delta;
        self.sq_delta += o.sq_delta;
        self.sum_fine += o.sum_fine;
        self.sq_fine += o.sq_fine;
        self.work += o.work;
        self.work_fine += o.work_fine;
        self.sum_n += o.sum_n;
    }

    fn mean_var(count: u64, sum: f64, sq: f64) -> (f64, f64) {
        if count == 0 {
            return (0.0, 0.0);
        }
        let n = count as f64;
        let mean = sum / n;
        let var = if count > 1 {
            ((sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        (mean, var)
    }

    pub fn stats(&self, level: u32, used: bool) -> LevelStats {
        let (mean_delta, var_delta) = Self::mean_var(self.m_delta, self.sum_delta, self.sq_delta);
        let (mean_fine, var_fine) = Self::mean_var(self.m, self.sum_fine, self.sq_fine);
        let m = self.m.max(1) as f64;
        LevelStats {
            level,
            m: self.m,
            mean_delta,
            var_delta,
            mean_fine,
            var_fine,
            mean_inner_n: self.sum_n as f64 / m,
            work: self.work,
            cost_delta: self.work as f64 / m,
            cost_fine: self.work_fine as f64 / m,
            used,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelStats {
    pub level: u32,
    /// Outer samples drawn at this level.
    pub m: u64,
    pub mean_delta: f64,
    /// `V_ℓ`.
    pub var_delta: f64,
    pub mean_fine: f64,
    /// `V_ℓ^f`.
    pub var_fine: f64,
    /// Mean `N_ℓ` over scenarios.
    pub mean_inner_n: f64,
    /// Total work spent at this level.
    pub work: u64,
    /// Mean work of one level-difference sample.
    pub cost_delta: f64,
    /// Mean work of one fine-only sample.
    pub cost_fine: f64,
    /// Whether this level contributes to the estimate.
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmcResult {
    /// Raw telescoped estimate, never clamped.
    pub estimate: f64,
    pub out_of_range: bool,
    /// Estimated variance of `estimate`, `Σ V_ℓ / M_ℓ`.
    pub variance: f64,
    /// Bias proxy at the final level.
    pub bias_estimate: f64,
    pub start_level: u32,
    pub max_level: u32,
    /// Every sampled level, including pilot levels below the start level.
    pub per_level: Vec<LevelStats>,
    pub total_work: u64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmcConfig {
    pub adaptive: AdaptiveConfig,
    /// Pilot samples per level.
    pub m0: u64,
    /// Pilot covers levels `0..=pilot_levels`.
    pub pilot_levels: u32,
    pub max_level: u32,
    /// Safety factor of the start-level rule.
    pub start_factor: f64,
}

impl Default for MlmcConfig {
    fn default() -> Self {
        Self {
            adaptive: AdaptiveConfig::default(),
            m0: 1024,
            pilot_levels: 4,
            max_level: 14,
            start_factor: 1.5,
        }
    }
}

const CHUNK: u64 = 64;
/// Allocation passes per finest level; later passes top up only levels more
/// than 5% short.
const REFINE_ROUNDS: usize = 4;

/// Draws outer samples `first..first + count` of `level`. Each sample has its
/// own stream, and chunk results are merged in index order, so the sums do
/// not depend on the number of worker threads.
pub fn sample_outer(
    sampler: &InnerSampler<'_>,
    model: &crate::market_model::MarketModel,
    level: u32,
    fine_only: bool,
    cfg: &AdaptiveConfig,
    first: u64,
    count: u64,
    seed: u64,
) -> LevelAccumulator {
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<LevelAccumulator> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = LevelAccumulator::default();
            let lo = first + c * CHUNK;
            let hi = (lo + CHUNK).min(first + count);
            for idx in lo..hi {
                let mut noise = NoiseHandle::for_stream(seed, StreamKey::new(Domain::Inner, level, idx));
                let scenario = model.sample_risk_scenario(&mut noise);
                let var = sampler.variable(&scenario);
                let s = antithetic_delta(&var, level, cfg, fine_only, &mut noise);
                acc.push(&s, !fine_only);
            }
            acc
        })
        .collect();
    let mut total = LevelAccumulator::default();
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Smallest `ℓ₀` such that starting there and correcting up to any higher
/// pilot level `ℓ₀′` costs less than `factor` times starting at `ℓ₀′`:
/// `√(V^f_{ℓ₀} W^f_{ℓ₀}) + Σ_{ℓ₀<ℓ≤ℓ₀′} √(V_ℓ W_ℓ) < factor √(V^f_{ℓ₀′} W^f_{ℓ₀′})`.
pub fn select_start_level(stats: &[LevelStats], factor: f64) -> Result<u32> {
    if stats.is_empty() {
        return Err(RiskError::MissingPilot);
    }
    let fine_cost: Vec<f64> = stats.iter().map(|s| (s.var_fine * s.cost_fine).sqrt()).collect();
    let delta_cost: Vec<f64> = stats.iter().map(|s| (s.var_delta * s.cost_delta).sqrt()).collect();
    for start in 0..stats.len() {
        let mut lhs = fine_cost[start];
        let mut ok = true;
        for upper in start + 1..stats.len() {
            lhs += delta_cost[upper];
            let rhs = factor * fine_cost[upper];
            if !(lhs < rhs || lhs == 0.0) {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(stats[start].level);
        }
    }
    unreachable!("the last level always qualifies")
}

/// Bias proxy over the last three levels, assuming `|E[ΔH_ℓ]|` halves per
/// level: `max_j |mean Δ̃_{L-j}| 2^{-j}`.
fn bias_proxy(stats: &[LevelStats], start: u32, last: u32) -> f64 {
    (0..3u32)
        .filter(|&j| last >= j && last - j > start)
        .map(|j| stats[(last - j) as usize].mean_delta.abs() / f64::from(1u32 << j))
        .fold(0.0, f64::max)
}

/// Tolerance-driven MLMC run with absolute tolerance `tol` on the root mean
/// square error. The statistical and bias budgets are `tol/√2` each.
pub fn run_mlmc(
    sampler: &InnerSampler<'_>,
    model: &crate::market_model::MarketModel,
    tol: f64,
    cfg: &MlmcConfig,
    seed: u64,
) -> Result<MlmcResult> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(RiskError::InvalidParameter {
            name: "tol",
            value: tol,
            constraint: "must be positive",
        });
    }
    let clock = Instant::now();
    let ad = &cfg.adaptive;
    let budget = tol / std::f64::consts::SQRT_2;

    if budget >= 1.0 {
        let acc = sample_outer(sampler, model, 0, true, ad, 0, cfg.m0, seed);
        let s = acc.stats(0, true);
        return Ok(finish(vec![acc], 0, 0, s.mean_fine, 0.0, clock));
    }

    let mut accs: Vec<LevelAccumulator> = (0..=cfg.pilot_levels)
        .map(|l| sample_outer(sampler, model, l, false, ad, 0, cfg.m0, seed))
        .collect();
    let pilot: Vec<LevelStats> = accs.iter().enumerate().map(|(l, a)| a.stats(l as u32, true)).collect();
    let start = select_start_level(&pilot, cfg.start_factor)?;
    let mut last = (start + 2).max(cfg.pilot_levels);

    loop {
        while accs.len() <= last as usize {
            let l = accs.len() as u32;
            accs.push(sample_outer(sampler, model, l, false, ad, 0, cfg.m0, seed));
        }
        // Optimal allocation over start..=last, refined with the variances of
        // the samples just added until no level is noticeably short.
        for round in 0..REFINE_ROUNDS {
            let (var, cost): (Vec<f64>, Vec<f64>) = (start..=last)
                .map(|l| {
                    let s = accs[l as usize].stats(l, true);
                    if l == start {
                        (s.var_fine, s.cost_fine)
                    } else {
                        (s.var_delta, s.cost_delta)
                    }
                })
                .unzip();
            let sum_sqrt: f64 = var.iter().zip(&cost).map(|(v, w)| (v * w).sqrt()).sum();
            let mut added = false;
            for (i, l) in (start..=last).enumerate() {
                let want = if var[i] > 0.0 && cost[i] > 0.0 {
                    ((var[i] / cost[i]).sqrt() * sum_sqrt / (budget * budget)).ceil() as u64
                } else {
                    0
                };
                let have = accs[l as usize].m;
                let short = if round == 0 { want > have } else { want > have + have / 20 };
                if short {
                    let extra = sample_outer(sampler, model, l, l == start, ad, have, want - have, seed);
                    accs[l as usize].merge(&extra);
                    added = true;
                }
            }
            if !added {
                break;
            }
        }
        let stats: Vec<LevelStats> = accs.iter().enumerate().map(|(l, a)| a.stats(l as u32, true)).collect();
        let bias = bias_proxy(&stats, start, last);
        if bias <= budget {
            let estimate = stats[start as usize].mean_fine
                + (start + 1..=last).map(|l| stats[l as usize].mean_delta).sum::<f64>();
            return Ok(finish(accs, start, last, estimate, bias, clock));
        }
        if last >= cfg.max_level {
            return Err(RiskError::ToleranceUnreachable {
                tol,
                bias,
                max_level: cfg.max_level as usize,
            });
        }
        last += 1;
    }
}

fn finish(accs: Vec<LevelAccumulator>, start: u32, last: u32, estimate: f64, bias: f64, clock: Instant) -> MlmcResult {
    let per_level: Vec<LevelStats> = accs
        .iter()
        .enumerate()
        .map(|(l, a)| {
            let l = l as u32;
            a.stats(l, l >= start && l <= last)
        })
        .collect();
    let variance = per_level
        .iter()
        .filter(|s| s.used)
        .map(|s| {
            if s.level == start {
                s.var_fine / s.m as f64
            } else {
                s.var_delta / s.m as f64
            }
        })
        .sum();
    MlmcResult {
        estimate,
        out_of_range: !(0.0..=1.0).contains(&estimate),
        variance,
        bias_estimate: bias,
        start_level: start,
        max_level: last,
        total_work: per_level.iter().map(|s| s.work).sum(),
        per_level,
        wall_time: clock.elapsed().as_secs_f64(),
    }
}

/// Fixed-sample statistics of the given levels, for rate measurements.
pub fn level_diagnostics(
    sampler: &InnerSampler<'_>,
    model: &crate::market_model::MarketModel,
    levels: std::ops::RangeInclusive<u32>,
    m: u64,
    cfg: &AdaptiveConfig,
    seed: u64,
) -> Vec<LevelStats> {
    levels
        .map(|l| sample_outer(sampler, model, l, false, cfg, 0, m, seed).stats(l, true))
        .collect()
}

/// Plain nested Monte Carlo: `m` scenarios, each with `n` inner draws, and
/// the indicator of the inner mean. Returns the estimate and its standard
/// error.
pub fn nested_brute_force(
    sampler: &InnerSampler<'_>,
    model: &crate::market_model::MarketModel,
    m: u64,
    n: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    if m == 0 || n == 0 {
        return Err(RiskError::InvalidParameter {
            name: "samples",
            value: 0.0,
            constraint: "outer and inner counts must be positive",
        });
    }
    let chunks = m.div_ceil(CHUNK);
    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(m);
            (lo..hi)
                .filter(|&idx| {
                    let mut noise = NoiseHandle::for_stream(seed, StreamKey::new(Domain::Oracle, 0, idx));
                    let scenario = model.sample_risk_scenario(&mut noise);
                    let var = sampler.variable(&scenario);
                    inner_estimate(&var, n, &mut noise).mean > 0.0
                })
                .count() as u64
        })
        .sum();
    let p = hits as f64 / m as f64;
    Ok((p, (p * (1.0 - p) / m as f64).sqrt()))
}
