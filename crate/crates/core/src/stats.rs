//! Small statistical helpers shared by the diagnostics and the test suites.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Least-squares slope of `log2(y)` against `x`.
pub fn log2_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2, "need at least two points");
    let ly: Vec<f64> = y.iter().map(|v| v.log2()).collect();
    least_squares_slope(x, &ly)
}

pub fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Pearson chi-square goodness-of-fit p-value of observed counts against
/// expected probabilities. Bins with expected count below 5 are pooled into
/// the last bin.
pub fn chi_square_p_value(observed: &[u64], probabilities: &[f64]) -> f64 {
    assert_eq!(observed.len(), probabilities.len());
    let total: u64 = observed.iter().sum();
    let total = total as f64;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probabilities) {
        let e = p * total;
        if e >= 5.0 && pooled.1 == 0.0 {
            bins.push((o as f64, e));
        } else {
            pooled.0 += o as f64;
            pooled.1 += e;
        }
    }
    if pooled.1 > 0.0 {
        bins.push(pooled);
    }
    let stat: f64 = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = (bins.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).expect("positive degrees of freedom").cdf(stat)
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|l| 7.0 * 2f64.powf(-1.3 * l)).collect();
        assert!((log2_slope(&x, &y) + 1.3).abs() < 1e-12);
    }

    #[test]
    fn chi_square_of_perfect_fit_is_one() {
        let p = chi_square_p_value(&[250, 250, 500], &[0.25, 0.25, 0.5]);
        assert!((p - 1.0).abs() < 1e-12);
        let bad = chi_square_p_value(&[500, 0, 500], &[0.25, 0.25, 0.5]);
        assert!(bad < 1e-6);
    }
}
