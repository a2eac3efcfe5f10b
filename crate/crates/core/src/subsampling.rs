//! Random sub-sampling of a large sum of heterogeneous terms.
//!
//! `(1/P) Σ E[f_i] = E[f_j / (P p_j)]` for a random index `j` with
//! `P(j = i) = p_i`. Choosing `p_i ∝ g̃_i / sqrt(W_i)` minimises the mean-square
//! error per unit work when `g̃_i` estimates `sqrt(E[f_i²])` and `W_i` is the
//! cost of one sample of `f_i`.

use crate::error::{Result, RiskError};
use crate::rng::NoiseHandle;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSampler {
    probabilities: Vec<f64>,
    cumulative: Vec<f64>,
    work: Vec<f64>,
}

impl IndexSampler {
    /// Sampler with the MSE-per-work optimal probabilities.
    pub fn optimal(importance: &[f64], work: &[f64]) -> Result<Self> {
        assert_eq!(importance.len(), work.len(), "importance and work lengths differ");
        let mut weights = Vec::with_capacity(importance.len());
        for (i, (&g, &w)) in importance.iter().zip(work).enumerate() {
            if !(g > 0.0 && g.is_finite() && w > 0.0 && w.is_finite()) {
                return Err(RiskError::InvalidImportance { index: i });
            }
            weights.push(g / w.sqrt());
        }
        Self::from_weights(&weights, work.to_vec())
    }

    /// Sampler with explicitly given (unnormalised) probabilities.
    pub fn from_weights(weights: &[f64], work: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(RiskError::InvalidImportance { index: 0 });
        }
        if let Some(i) = weights.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(RiskError::InvalidImportance { index: i });
        }
        let total: f64 = weights.iter().sum();
        let probabilities: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut cumulative = Vec::with_capacity(probabilities.len());
        let mut acc = 0.0;
        for &p in &probabilities {
            acc += p;
            cumulative.push(acc);
        }
        // guard against round-off leaving the last entry just under 1
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(Self {
            probabilities,
            cumulative,
            work,
        })
    }

    pub fn uniform(count: usize, work: Vec<f64>) -> Result<Self> {
        Self::from_weights(&vec![1.0; count], work)
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn probability(&self, index: usize) -> f64 {
        self.probabilities[index]
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn work(&self) -> &[f64] {
        &self.work
    }

    /// Expected work of one draw, `Σ p_i W_i`.
    pub fn expected_work(&self) -> f64 {
        self.probabilities.iter().zip(&self.work).map(|(p, w)| p * w).sum()
    }

    /// Index drawn by inverting the cumulative table with a binary search.
    #[inline]
    pub fn draw(&self, noise: &mut NoiseHandle) -> usize {
        if self.cumulative.len() == 1 {
            return 0;
        }
        let u = noise.uniform();
        let idx = self.cumulative.partition_point(|&c| c <= u);
        idx.min(self.cumulative.len() - 1)
    }
}

/// Real-valued per-term sample counts of a stratified estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub samples_per_term: Vec<f64>,
}

/// Budget-constrained optimal allocation `N_i = B (σ̃_i/√W_i) / Σ_j σ̃_j √W_j`.
///
/// Terms with `σ̃_i = 0` get no samples; the positivity invariant applies to the
/// random terms only.
pub fn stratified_allocation(sigma_estimates: &[f64], work: &[f64], budget: f64) -> Result<Allocation> {
    assert_eq!(sigma_estimates.len(), work.len());
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(RiskError::InvalidParameter {
            name: "budget",
            value: budget,
            constraint: "must be positive",
        });
    }
    if let Some(i) = work.iter().position(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(RiskError::InvalidImportance { index: i });
    }
    if let Some(i) = sigma_estimates.iter().position(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(RiskError::InvalidImportance { index: i });
    }
    let denom: f64 = sigma_estimates.iter().zip(work).map(|(s, w)| s * w.sqrt()).sum();
    if denom <= 0.0 {
        return Err(RiskError::DegenerateAllocation);
    }
    let samples_per_term = sigma_estimates
        .iter()
        .zip(work)
        .map(|(s, w)| budget * (s / w.sqrt()) / denom)
        .collect();
    Ok(Allocation { samples_per_term })
}

/// MSE of the stratified estimator with the optimal allocation built from
/// `sigma_estimates`, when the true standard deviations are `sigma`.
pub fn stratified_mse(sigma: &[f64], sigma_estimates: &[f64], work: &[f64], budget: f64) -> f64 {
    let p = sigma.len() as f64;
    let a: f64 = sigma
        .iter()
        .zip(sigma_estimates)
        .zip(work)
        .map(|((s, se), w)| s * s / se * w.sqrt())
        .sum::<f64>()
        / p;
    let b: f64 = sigma_estimates.iter().zip(work).map(|(se, w)| se * w.sqrt()).sum::<f64>() / p;
    a * b / budget
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimal_probability_examples() {
        let s = IndexSampler::optimal(&[2.0; 4], &[3.0; 4]).unwrap();
        for &p in s.probabilities() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let s = IndexSampler::optimal(&[1.0, 2.0], &[1.0, 4.0]).unwrap();
        assert!((s.probability(0) - 0.5).abs() < 1e-15);
        let s = IndexSampler::optimal(&[1.0, 3.0], &[1.0, 1.0]).unwrap();
        assert!((s.probability(0) - 0.25).abs() < 1e-15);
        assert!((s.probability(1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_inputs() {
        assert!(matches!(
            IndexSampler::optimal(&[1.0, 0.0], &[1.0, 1.0]),
            Err(RiskError::InvalidImportance { index: 1 })
        ));
        assert!(IndexSampler::optimal(&[1.0, 1.0], &[-1.0, 1.0]).is_err());
        assert!(IndexSampler::optimal(&[], &[]).is_err());
    }

    #[test]
    fn cumulative_table_ends_at_one() {
        let s = IndexSampler::optimal(&[0.1, 0.7, 0.3, 1e-3], &[1.0, 3.0, 3.0, 10.0]).unwrap();
        let c = s.cumulative();
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*c.last().unwrap(), 1.0);
        assert!((s.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_term_always_draws_zero() {
        let s = IndexSampler::uniform(1, vec![1.0]).unwrap();
        let mut n = NoiseHandle::from_seed(1);
        for _ in 0..100 {
            assert_eq!(s.draw(&mut n), 0);
        }
    }

    #[test]
    fn stratified_examples() {
        let a = stratified_allocation(&[1.0; 4], &[2.0; 4], 16.0).unwrap();
        for &n in &a.samples_per_term {
            assert!((n - 2.0).abs() < 1e-12);
        }
        let a = stratified_allocation(&[1.0, 1.0], &[1.0, 4.0], 6.0).unwrap();
        assert!((a.samples_per_term[0] - 2.0).abs() < 1e-12);
        assert!((a.samples_per_term[1] - 1.0).abs() < 1e-12);
        assert!(matches!(
            stratified_allocation(&[0.0, 0.0], &[1.0, 1.0], 1.0),
            Err(RiskError::DegenerateAllocation)
        ));
    }

    #[test]
    fn stratified_mse_matches_direct_sum() {
        let sigma = [0.3, 1.2, 0.05, 2.0, 0.7];
        let est = [0.4, 1.0, 0.1, 2.5, 0.7];
        let work = [1.0, 3.0, 3.0, 7.0, 1.0];
        let budget = 250.0;
        let alloc = stratified_allocation(&est, &work, budget).unwrap();
        let p = sigma.len() as f64;
        let direct: f64 = sigma
            .iter()
            .zip(&alloc.samples_per_term)
            .map(|(s, n)| s * s / n)
            .sum::<f64>()
            / (p * p);
        let formula = stratified_mse(&sigma, &est, &work, budget);
        assert!((direct - formula).abs() <= 1e-12 * formula);
    }
}
