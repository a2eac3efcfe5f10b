//! Black-Scholes values, deltas and discounted payoffs of vanilla options.
//!
//! Every value here is discounted to time 0, so the value at the risk horizon
//! and today's value can be subtracted directly.

use statrs::function::erf::erfc;

use crate::error::{Result, RiskError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptionKind {
    Call,
    Put,
}

impl OptionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptionKind::Call => "call",
            OptionKind::Put => "put",
        }
    }

    fn sign(self) -> f64 {
        match self {
            OptionKind::Call => 1.0,
            OptionKind::Put => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VanillaOption {
    pub kind: OptionKind,
    pub strike: f64,
    pub maturity: f64,
    pub asset_index: usize,
}

impl VanillaOption {
    pub fn new(kind: OptionKind, strike: f64, maturity: f64, asset_index: usize) -> Result<Self> {
        if !(strike > 0.0 && strike.is_finite()) {
            return Err(RiskError::InvalidContract(format!("strike {strike} must be positive")));
        }
        if !(maturity > 0.0 && maturity.is_finite()) {
            return Err(RiskError::InvalidContract(format!("maturity {maturity} must be positive")));
        }
        Ok(Self {
            kind,
            strike,
            maturity,
            asset_index,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceAndDelta {
    pub value: f64,
    pub delta: f64,
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Value at `time_now` of `option` given `spot`, discounted back to time 0,
/// together with its derivative in `spot`.
pub fn bs_price_delta(option: &VanillaOption, spot: f64, time_now: f64, vol: f64, rate: f64) -> Result<PriceAndDelta> {
    if time_now >= option.maturity {
        return Err(RiskError::ExpiredContract {
            time_now,
            maturity: option.maturity,
        });
    }
    let k = option.strike;
    let remaining = option.maturity - time_now;
    let disc_total = (-rate * option.maturity).exp();
    let disc_now = (-rate * time_now).exp();
    let sign = option.kind.sign();

    let std_dev = vol * remaining.sqrt();
    if std_dev <= 0.0 {
        // deterministic forward
        let forward = spot * (rate * remaining).exp();
        let intrinsic = sign * (forward - k);
        let in_money = intrinsic > 0.0;
        return Ok(PriceAndDelta {
            value: disc_total * intrinsic.max(0.0),
            delta: if in_money { sign * disc_now } else { 0.0 },
        });
    }

    let d1 = ((spot / k).ln() + (rate + 0.5 * vol * vol) * remaining) / std_dev;
    let d2 = d1 - std_dev;
    let (value_now, delta_now) = match option.kind {
        OptionKind::Call => {
            let nd1 = norm_cdf(d1);
            (spot * nd1 - k * (-rate * remaining).exp() * norm_cdf(d2), nd1)
        }
        OptionKind::Put => {
            let nmd1 = norm_cdf(-d1);
            (k * (-rate * remaining).exp() * norm_cdf(-d2) - spot * nmd1, -nmd1)
        }
    };
    Ok(PriceAndDelta {
        value: disc_now * value_now,
        delta: disc_now * delta_now,
    })
}

/// Discounted payoff `e^{-rT} max(±(S_T - K), 0)`.
#[inline]
pub fn payoff(option: &VanillaOption, terminal_value: f64, rate: f64) -> f64 {
    let intrinsic = option.kind.sign() * (terminal_value - option.strike);
    if intrinsic > 0.0 {
        (-rate * option.maturity).exp() * intrinsic
    } else {
        0.0
    }
}

/// Pathwise derivative of the discounted payoff with respect to the initial
/// asset value, given `path_sensitivity = ∂S_T/∂S_0`. Ties at the strike count
/// as out of the money.
#[inline]
pub fn pathwise_delta(option: &VanillaOption, terminal_value: f64, path_sensitivity: f64, rate: f64) -> f64 {
    let intrinsic = option.kind.sign() * (terminal_value - option.strike);
    if intrinsic > 0.0 {
        option.kind.sign() * (-rate * option.maturity).exp() * path_sensitivity
    } else {
        0.0
    }
}

/// Discounted payoff and pathwise delta computed together; the discount factor
/// is passed in so hot loops can hoist it.
#[inline]
pub(crate) fn payoff_and_delta(kind: OptionKind, strike: f64, discount: f64, terminal: f64, sensitivity: f64) -> (f64, f64) {
    let sign = kind.sign();
    let intrinsic = sign * (terminal - strike);
    if intrinsic > 0.0 {
        (discount * intrinsic, sign * discount * sensitivity)
    } else {
        (0.0, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(k: f64, t: f64) -> VanillaOption {
        VanillaOption::new(OptionKind::Call, k, t, 0).unwrap()
    }

    fn put(k: f64, t: f64) -> VanillaOption {
        VanillaOption::new(OptionKind::Put, k, t, 0).unwrap()
    }

    #[test]
    fn rejects_bad_contracts() {
        assert!(VanillaOption::new(OptionKind::Call, 0.0, 1.0, 0).is_err());
        assert!(VanillaOption::new(OptionKind::Put, 100.0, 0.0, 0).is_err());
        let err = bs_price_delta(&call(100.0, 1.0), 100.0, 1.0, 0.2, 0.05).unwrap_err();
        assert!(matches!(err, RiskError::ExpiredContract { .. }));
    }

    #[test]
    fn payoff_examples() {
        assert_eq!(payoff(&call(100.0, 1.0), 100.0, 0.05), 0.0);
        assert!((payoff(&call(100.0, 1.0), 101.0, 0.0) - 1.0).abs() < 1e-15);
        let v = payoff(&put(100.0, 2.0), 80.0, 0.05);
        assert!((v - 20.0 * (-0.1f64).exp()).abs() < 1e-12);
        assert!((v - 18.096_748_360_719_2).abs() < 1e-9);
    }

    #[test]
    fn pathwise_delta_examples() {
        let c = call(100.0, 1.0);
        assert_eq!(pathwise_delta(&c, 50.0, 0.5, 0.05), 0.0);
        let expect = (-0.05f64).exp() * 2.0;
        assert!((pathwise_delta(&c, 200.0, 2.0, 0.05) - expect).abs() < 1e-15);
        // tie at strike
        assert_eq!(pathwise_delta(&c, 100.0, 1.0, 0.05), 0.0);
        assert!(pathwise_delta(&put(100.0, 1.0), 90.0, 0.9, 0.05) < 0.0);
    }

    #[test]
    fn zero_vol_call_is_discounted_intrinsic() {
        let c = call(90.0, 1.0);
        let p = bs_price_delta(&c, 100.0, 0.0, 0.0, 0.05).unwrap();
        assert!((p.value - (100.0 - 90.0 * (-0.05f64).exp())).abs() < 1e-12);
        assert!((p.delta - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tiny_strike_call_is_worth_spot() {
        let c = call(1e-12, 1.0);
        let p = bs_price_delta(&c, 100.0, 0.0, 0.2, 0.05).unwrap();
        assert!((p.value - 100.0).abs() < 1e-9);
        assert!((p.delta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn known_reference_value() {
        // Standard textbook value: S=K=100, T=1, r=5%, σ=20%
        let p = bs_price_delta(&call(100.0, 1.0), 100.0, 0.0, 0.2, 0.05).unwrap();
        assert!((p.value - 10.450_583_572_185_565).abs() < 1e-9);
        assert!((p.delta - 0.636_830_651_175_619).abs() < 1e-9);
    }

    #[test]
    fn value_at_later_time_is_discounted_to_zero() {
        let c = call(100.0, 2.0);
        let r: f64 = 0.05;
        let later = bs_price_delta(&c, 100.0, 0.5, 0.3, r).unwrap();
        let fresh = bs_price_delta(&call(100.0, 1.5), 100.0, 0.0, 0.3, r).unwrap();
        assert!((later.value - (-r * 0.5).exp() * fresh.value).abs() < 1e-12);
        assert!((later.delta - (-r * 0.5).exp() * fresh.delta).abs() < 1e-12);
    }

    #[test]
    fn delta_bounds_hold() {
        for &spot in &[50.0, 90.0, 100.0, 110.0, 200.0] {
            let c = bs_price_delta(&call(100.0, 1.0), spot, 0.2, 0.25, 0.05).unwrap();
            let p = bs_price_delta(&put(100.0, 1.0), spot, 0.2, 0.25, 0.05).unwrap();
            assert!((0.0..=1.0).contains(&c.delta));
            assert!((-1.0..=0.0).contains(&p.delta));
        }
    }
}
