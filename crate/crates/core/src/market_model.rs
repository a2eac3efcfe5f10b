//! Correlated geometric Brownian motion asset universe.
//!
//! Each asset follows `dS_k = μ_k S_k dt + σ_k S_k dB_k` under the physical
//! measure, where `B_k = ρ B_sys + sqrt(1 - ρ²) B_k_ind`. Under the
//! risk-neutral measure the drift is the risk-free rate. Option terms only ever
//! need single-asset paths after the risk horizon, so only the outer scenario
//! draw is multivariate.

use crate::error::{ensure, Result, RiskError};
use crate::rng::NoiseHandle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssetParams {
    pub initial_price: f64,
    pub drift: f64,
    pub volatility: f64,
}

impl AssetParams {
    pub fn new(initial_price: f64, drift: f64, volatility: f64) -> Result<Self> {
        ensure(initial_price > 0.0 && initial_price.is_finite(), "initial_price", initial_price, "must be positive")?;
        ensure(volatility >= 0.0 && volatility.is_finite(), "volatility", volatility, "must be nonnegative")?;
        ensure(drift.is_finite(), "drift", drift, "must be finite")?;
        Ok(Self {
            initial_price,
            drift,
            volatility,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Physical,
    RiskNeutral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    assets: Vec<AssetParams>,
    correlation: f64,
    risk_free_rate: f64,
    risk_horizon: f64,
}

/// Realization of the asset values at the risk horizon under the physical measure.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskScenario {
    pub asset_values: Vec<f64>,
}

impl RiskScenario {
    pub fn new(asset_values: Vec<f64>) -> Result<Self> {
        for &v in &asset_values {
            ensure(v > 0.0 && v.is_finite(), "asset_value", v, "must be positive")?;
        }
        Ok(Self { asset_values })
    }
}

/// The three terminal values of the antithetic construction plus the pathwise
/// sensitivities of the two legs started from today's prices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeSample {
    pub s_plus: f64,
    pub s_minus: f64,
    pub s_cond: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
}

/// Ranges used to draw a random asset universe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniverseRanges {
    pub initial_price: (f64, f64),
    pub drift: (f64, f64),
    pub volatility: (f64, f64),
}

impl Default for UniverseRanges {
    fn default() -> Self {
        Self {
            initial_price: (90.0, 110.0),
            drift: (0.05, 0.15),
            volatility: (0.01, 0.4),
        }
    }
}

impl MarketModel {
    pub fn new(assets: Vec<AssetParams>, correlation: f64, risk_free_rate: f64, risk_horizon: f64) -> Result<Self> {
        if assets.is_empty() {
            return Err(RiskError::InvalidParameter {
                name: "assets",
                value: 0.0,
                constraint: "at least one asset is required",
            });
        }
        ensure(correlation > 0.0 && correlation < 1.0, "correlation", correlation, "must lie in (0, 1)")?;
        ensure(risk_horizon > 0.0 && risk_horizon.is_finite(), "risk_horizon", risk_horizon, "must be positive")?;
        ensure(risk_free_rate.is_finite(), "risk_free_rate", risk_free_rate, "must be finite")?;
        Ok(Self {
            assets,
            correlation,
            risk_free_rate,
            risk_horizon,
        })
    }

    /// Random universe of `count` assets with parameters drawn uniformly from `ranges`.
    pub fn generate(
        count: usize,
        ranges: UniverseRanges,
        correlation: f64,
        risk_free_rate: f64,
        risk_horizon: f64,
        noise: &mut NoiseHandle,
    ) -> Result<Self> {
        let mut uniform_in = |(lo, hi): (f64, f64)| lo + (hi - lo) * noise.uniform();
        let assets = (0..count)
            .map(|_| {
                let s0 = uniform_in(ranges.initial_price);
                let mu = uniform_in(ranges.drift);
                let sigma = uniform_in(ranges.volatility);
                AssetParams::new(s0, mu, sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(assets, correlation, risk_free_rate, risk_horizon)
    }

    pub fn assets(&self) -> &[AssetParams] {
        &self.assets
    }

    pub fn asset(&self, k: usize) -> &AssetParams {
        &self.assets[k]
    }

    pub fn num_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn correlation(&self) -> f64 {
        self.correlation
    }

    pub fn risk_free_rate(&self) -> f64 {
        self.risk_free_rate
    }

    pub fn risk_horizon(&self) -> f64 {
        self.risk_horizon
    }

    /// Today's asset prices, `R_0`.
    pub fn initial_prices(&self) -> Vec<f64> {
        self.assets.iter().map(|a| a.initial_price).collect()
    }

    /// Same universe with a different risk horizon.
    pub fn with_horizon(&self, risk_horizon: f64) -> Result<Self> {
        Self::new(self.assets.clone(), self.correlation, self.risk_free_rate, risk_horizon)
    }

    fn drift(&self, k: usize, measure: Measure) -> f64 {
        match measure {
            Measure::Physical => self.assets[k].drift,
            Measure::RiskNeutral => self.risk_free_rate,
        }
    }

    /// Draws `R_τ` under the physical measure, with one systemic Gaussian shared
    /// by all assets.
    pub fn sample_risk_scenario(&self, noise: &mut NoiseHandle) -> RiskScenario {
        let tau = self.risk_horizon;
        let sqrt_tau = tau.sqrt();
        let rho = self.correlation;
        let idio = (1.0 - rho * rho).sqrt();
        let z_sys = noise.normal();
        let asset_values = self
            .assets
            .iter()
            .map(|a| {
                let b = sqrt_tau * (rho * z_sys + idio * noise.normal());
                a.initial_price * ((a.drift - 0.5 * a.volatility * a.volatility) * tau + a.volatility * b).exp()
            })
            .collect();
        RiskScenario { asset_values }
    }

    /// Scenario built from given standard normals (systemic first, then one per
    /// asset). Lets callers rescale τ while keeping the same underlying draw.
    pub fn scenario_from_normals(&self, z_sys: f64, z_ind: &[f64]) -> RiskScenario {
        assert_eq!(z_ind.len(), self.assets.len());
        let tau = self.risk_horizon;
        let rho = self.correlation;
        let idio = (1.0 - rho * rho).sqrt();
        let asset_values = self
            .assets
            .iter()
            .zip(z_ind)
            .map(|(a, &z)| {
                let b = tau.sqrt() * (rho * z_sys + idio * z);
                a.initial_price * ((a.drift - 0.5 * a.volatility * a.volatility) * tau + a.volatility * b).exp()
            })
            .collect();
        RiskScenario { asset_values }
    }

    /// Closed-form GBM terminal value from `start_value` after `horizon` years.
    pub fn exact_terminal(
        &self,
        asset_index: usize,
        start_value: f64,
        horizon: f64,
        measure: Measure,
        noise: &mut NoiseHandle,
    ) -> f64 {
        if horizon == 0.0 {
            return start_value;
        }
        let sigma = self.assets[asset_index].volatility;
        let mu = self.drift(asset_index, measure);
        let z = noise.normal();
        start_value * ((mu - 0.5 * sigma * sigma) * horizon + sigma * horizon.sqrt() * z).exp()
    }

    /// Antithetic construction for an option maturing at `maturity`.
    ///
    /// `s_plus`/`s_minus` start from `R_0` and use `±B` over `[0, τ]`;
    /// `s_cond` starts from `r_tau` at `τ`. All three share the increments after
    /// `τ`. The head increment comes from `scenario_noise`, the tail from
    /// `tail_noise`; pass the same handle twice to draw both sequentially.
    pub fn antithetic_bridge_pair(
        &self,
        asset_index: usize,
        r_tau: f64,
        maturity: f64,
        head_noise: &mut NoiseHandle,
        tail_noise: &mut NoiseHandle,
    ) -> Result<BridgeSample> {
        let tau = self.risk_horizon;
        if maturity <= tau {
            return Err(RiskError::InvalidContract(format!(
                "maturity {maturity} must exceed the risk horizon {tau}"
            )));
        }
        let z_head = head_noise.normal();
        let z_tail = tail_noise.normal();
        Ok(self.bridge_from_normals(asset_index, r_tau, maturity, z_head, z_tail))
    }

    /// The antithetic construction from explicit head and tail normals.
    /// `maturity` must exceed the risk horizon.
    pub fn bridge_from_normals(&self, asset_index: usize, r_tau: f64, maturity: f64, z_head: f64, z_tail: f64) -> BridgeSample {
        let tau = self.risk_horizon;
        debug_assert!(maturity > tau);
        let a = &self.assets[asset_index];
        let sigma = a.volatility;
        let drift = self.risk_free_rate - 0.5 * sigma * sigma;

        let head_det = (drift * tau).exp();
        let head_rand = (sigma * tau.sqrt() * z_head).exp();
        let tail = maturity - tau;
        let growth = (drift * tail + sigma * tail.sqrt() * z_tail).exp();

        let plus_factor = head_det * head_rand * growth;
        let minus_factor = head_det / head_rand * growth;
        let s0 = a.initial_price;
        BridgeSample {
            s_plus: s0 * plus_factor,
            s_minus: s0 * minus_factor,
            s_cond: r_tau * growth,
            delta_plus: plus_factor,
            delta_minus: minus_factor,
        }
    }

    /// Coupled Milstein terminal values for one asset under the risk-neutral
    /// measure: `4^level` fine steps, and for `level > 0` a coarse path with
    /// `4^(level-1)` steps driven by the summed fine increments.
    pub fn milstein_terminal_pair(
        &self,
        asset_index: usize,
        start_value: f64,
        maturity: f64,
        level: u32,
        noise: &mut NoiseHandle,
    ) -> (f64, Option<f64>) {
        let (fine, coarse) = self.milstein_growth_pair(asset_index, maturity, level, Measure::RiskNeutral, noise);
        (start_value * fine, coarse.map(|c| start_value * c))
    }

    /// Multiplicative Milstein growth factors `S(T)/S(0)` over `horizon`.
    ///
    /// GBM is linear in `S`, so the scheme's terminal value is the start value
    /// times a factor that does not depend on it. That factor is also the
    /// pathwise sensitivity `∂S(T)/∂S(0)`.
    pub fn milstein_growth_pair(
        &self,
        asset_index: usize,
        horizon: f64,
        level: u32,
        measure: Measure,
        noise: &mut NoiseHandle,
    ) -> (f64, Option<f64>) {
        self.milstein_walk(asset_index, horizon, level, measure, noise, |_, _| {})
    }

    /// Milstein walk with a hook receiving each coarse step's four fine
    /// increments and the coarse increment built from them. At level 0 the hook
    /// sees the single fine increment in slot 0 and `None` for the coarse one.
    pub fn milstein_walk<F>(
        &self,
        asset_index: usize,
        horizon: f64,
        level: u32,
        measure: Measure,
        noise: &mut NoiseHandle,
        mut on_step: F,
    ) -> (f64, Option<f64>)
    where
        F: FnMut(&[f64], Option<f64>),
    {
        let sigma = self.assets[asset_index].volatility;
        let mu = self.drift(asset_index, measure);
        let step = |s: f64, dt: f64, db: f64| s * (1.0 + mu * dt + sigma * db + 0.5 * sigma * sigma * (db * db - dt));

        if level == 0 {
            let db = horizon.sqrt() * noise.normal();
            on_step(&[db], None);
            return (step(1.0, horizon, db), None);
        }

        let coarse_steps = 4usize.pow(level - 1);
        let dt_c = horizon / coarse_steps as f64;
        let dt_f = 0.25 * dt_c;
        let sqrt_dt_f = dt_f.sqrt();
        let mut fine = 1.0;
        let mut coarse = 1.0;
        let mut incs = [0.0; 4];
        for _ in 0..coarse_steps {
            let mut db_c = 0.0;
            for inc in incs.iter_mut() {
                let db = sqrt_dt_f * noise.normal();
                fine = step(fine, dt_f, db);
                db_c += db;
                *inc = db;
            }
            coarse = step(coarse, dt_c, db_c);
            on_step(&incs, Some(db_c));
        }
        (fine, Some(coarse))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, StreamKey};

    fn single(s0: f64, mu: f64, sigma: f64) -> MarketModel {
        MarketModel::new(vec![AssetParams::new(s0, mu, sigma).unwrap()], 0.2, 0.05, 0.02).unwrap()
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(AssetParams::new(0.0, 0.1, 0.2).is_err());
        assert!(AssetParams::new(100.0, 0.1, -0.2).is_err());
        let a = AssetParams::new(100.0, 0.1, 0.2).unwrap();
        assert!(MarketModel::new(vec![a], 0.0, 0.05, 0.02).is_err());
        assert!(MarketModel::new(vec![a], 1.0, 0.05, 0.02).is_err());
        assert!(MarketModel::new(vec![a], 0.2, 0.05, 0.0).is_err());
        assert!(MarketModel::new(vec![], 0.2, 0.05, 0.02).is_err());
    }

    #[test]
    fn zero_volatility_scenario_is_deterministic_drift() {
        let assets = vec![
            AssetParams::new(95.0, 0.07, 0.0).unwrap(),
            AssetParams::new(105.0, 0.12, 0.0).unwrap(),
        ];
        let m = MarketModel::new(assets, 0.2, 0.05, 0.02).unwrap();
        let s = m.sample_risk_scenario(&mut NoiseHandle::from_seed(1));
        assert!((s.asset_values[0] - 95.0 * (0.07f64 * 0.02).exp()).abs() < 1e-12);
        assert!((s.asset_values[1] - 105.0 * (0.12f64 * 0.02).exp()).abs() < 1e-12);
    }

    #[test]
    fn exact_terminal_identity_and_deterministic_cases() {
        let m = single(100.0, 0.1, 0.0);
        let mut n = NoiseHandle::from_seed(2);
        assert_eq!(m.exact_terminal(0, 100.0, 0.0, Measure::RiskNeutral, &mut n), 100.0);
        let v = m.exact_terminal(0, 100.0, 1.0, Measure::RiskNeutral, &mut n);
        assert!((v - 105.127_109_637_602_4).abs() < 1e-9);
    }

    #[test]
    fn measures_agree_when_drift_equals_rate() {
        let m = single(100.0, 0.05, 0.3);
        let mut a = NoiseHandle::from_seed(9);
        let mut b = a.clone();
        for _ in 0..100 {
            let x = m.exact_terminal(0, 100.0, 0.7, Measure::Physical, &mut a);
            let y = m.exact_terminal(0, 100.0, 0.7, Measure::RiskNeutral, &mut b);
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bridge_rejects_short_maturity() {
        let m = single(100.0, 0.1, 0.2);
        let mut n = NoiseHandle::from_seed(3);
        let mut t = n.clone();
        assert!(m.antithetic_bridge_pair(0, 100.0, 0.02, &mut n, &mut t).is_err());
    }

    #[test]
    fn bridge_legs_coincide_without_noise() {
        let m = single(100.0, 0.1, 0.0);
        let mut n = NoiseHandle::from_seed(4);
        let mut t = NoiseHandle::from_seed(5);
        let b = m.antithetic_bridge_pair(0, 101.0, 2.0, &mut n, &mut t).unwrap();
        assert_eq!(b.s_plus, b.s_minus);
        assert!((b.s_plus - 100.0 * (0.05f64 * 2.0).exp()).abs() < 1e-10);
        assert!((b.s_cond - 101.0 * (0.05f64 * 1.98).exp()).abs() < 1e-10);
    }

    #[test]
    fn milstein_is_exact_for_zero_diffusion() {
        let m = single(100.0, 0.1, 0.0);
        for level in 0..4 {
            let mut n = NoiseHandle::from_seed(level as u64);
            let (f, c) = m.milstein_terminal_pair(0, 100.0, 1.0, level, &mut n);
            let steps = 4f64.powi(level as i32);
            let expect = 100.0 * (1.0 + 0.05 / steps).powf(steps);
            assert!((f - expect).abs() < 1e-9);
            if level == 0 {
                assert!(c.is_none());
            } else {
                let cs = steps / 4.0;
                assert!((c.unwrap() - 100.0 * (1.0 + 0.05 / cs).powf(cs)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn milstein_coarse_increments_sum_fine_ones() {
        let m = single(100.0, 0.1, 0.3);
        for level in 1..5 {
            let mut n = NoiseHandle::for_stream(11, StreamKey::new(Domain::Diagnostics, level, 0));
            let mut steps = 0;
            m.milstein_walk(0, 1.5, level, Measure::RiskNeutral, &mut n, |fine, coarse| {
                let sum: f64 = fine.iter().sum();
                assert_eq!(fine.len(), 4);
                assert!((sum - coarse.unwrap()).abs() <= 1e-15 * (1.0 + sum.abs()));
                steps += 1;
            });
            assert_eq!(steps, 4usize.pow(level - 1));
        }
    }

    #[test]
    fn milstein_flipped_replay_negates_every_increment() {
        let m = single(100.0, 0.1, 0.3);
        let base = NoiseHandle::from_seed(77);
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        m.milstein_walk(0, 1.0, 3, Measure::RiskNeutral, &mut base.clone(), |f, _| plus.extend_from_slice(f));
        m.milstein_walk(0, 1.0, 3, Measure::RiskNeutral, &mut base.flipped(), |f, _| minus.extend_from_slice(f));
        assert_eq!(plus.len(), minus.len());
        for (p, q) in plus.iter().zip(&minus) {
            assert_eq!((-p).to_bits(), q.to_bits());
        }
    }

    #[test]
    fn milstein_terminal_differences_decay_like_step_squared() {
        let m = single(100.0, 0.1, 0.3);
        let n = 20_000;
        let vars: Vec<f64> = (1..=4u32)
            .map(|level| {
                let mut noise = NoiseHandle::for_stream(5, StreamKey::new(Domain::Diagnostics, level, 0));
                let d: Vec<f64> = (0..n)
                    .map(|_| {
                        let (f, c) = m.milstein_terminal_pair(0, 100.0, 1.0, level, &mut noise);
                        f - c.unwrap()
                    })
                    .collect();
                let mean = d.iter().sum::<f64>() / n as f64;
                d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            })
            .collect();
        // least-squares slope of log4 V against level
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = vars.iter().map(|v| v.ln() / 4f64.ln()).collect();
        let (mx, my) = (2.5, ys.iter().sum::<f64>() / 4.0);
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((1.6..=2.4).contains(&-slope), "rate {} from {vars:?}", -slope);
    }
}
