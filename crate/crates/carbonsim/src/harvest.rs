//! Renewable-energy harvesting and battery dynamics.
//!
//! Each server owns an independent harvest process: per slot it draws an
//! amount of free renewable energy from a normal distribution truncated to
//! `[0, mean + 3*stddev]` (rejection sampling), or replays a fixed trace.
//! Harvested energy not consumed or exported in the slot may be stored in
//! the battery subject to capacity and charge efficiency; the remainder is
//! curtailed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::ViolationCode;

/// Harvest process configuration for one server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum HarvestParams {
    /// No harvester installed; every slot yields zero.
    #[default]
    None,
    /// Truncated normal draw per slot, kWh.
    Stochastic { mean_kwh: f64, stddev_kwh: f64 },
    /// Deterministic per-slot replay; slots beyond the trace yield zero.
    Trace { values_kwh: Vec<f64> },
}

impl HarvestParams {
    /// Invariant check used by scenario validation.
    pub fn validate(&self) -> Vec<(ViolationCode, String)> {
        let mut v = Vec::new();
        match self {
            HarvestParams::None => {}
            HarvestParams::Stochastic {
                mean_kwh,
                stddev_kwh,
            } => {
                if *mean_kwh < 0.0 {
                    v.push((
                        ViolationCode::NegativeHarvestMean,
                        format!("harvest mean must be >= 0, found {mean_kwh}"),
                    ));
                }
                if *stddev_kwh < 0.0 {
                    v.push((
                        ViolationCode::NegativeHarvestStddev,
                        format!("harvest stddev must be >= 0, found {stddev_kwh}"),
                    ));
                }
            }
            HarvestParams::Trace { values_kwh } => {
                if values_kwh.is_empty() {
                    v.push((
                        ViolationCode::MissingHarvestTrace,
                        "harvest trace must contain at least one slot".into(),
                    ));
                }
                if values_kwh.iter().any(|x| *x < 0.0) {
                    v.push((
                        ViolationCode::NegativeHarvestMean,
                        "harvest trace values must be >= 0".into(),
                    ));
                }
            }
        }
        v
    }

    /// Energy harvested in `slot`, drawing from `rng` for stochastic
    /// processes. Deterministic given the rng stream and slot sequence.
    pub fn sample(&self, slot: u64, rng: &mut impl Rng) -> f64 {
        match self {
            HarvestParams::None => 0.0,
            HarvestParams::Stochastic {
                mean_kwh,
                stddev_kwh,
            } => {
                if *mean_kwh == 0.0 && *stddev_kwh == 0.0 {
                    return 0.0;
                }
                if *stddev_kwh == 0.0 {
                    return *mean_kwh;
                }
                let normal = Normal::new(*mean_kwh, *stddev_kwh)
                    .expect("validated stddev is finite and non-negative");
                let hi = mean_kwh + 3.0 * stddev_kwh;
                // Truncation window always covers the mean, so acceptance
                // probability is > 0.49 and the loop terminates quickly.
                loop {
                    let x = normal.sample(rng);
                    if (0.0..=hi).contains(&x) {
                        return x;
                    }
                }
            }
            HarvestParams::Trace { values_kwh } => {
                values_kwh.get(slot as usize).copied().unwrap_or(0.0)
            }
        }
    }

    /// Expected value of one draw. For the stochastic process this is the
    /// mean of the truncated distribution, not the untruncated `mean_kwh`.
    pub fn expected_value(&self) -> f64 {
        match self {
            HarvestParams::None => 0.0,
            HarvestParams::Stochastic {
                mean_kwh,
                stddev_kwh,
            } => truncated_normal_mean(*mean_kwh, *stddev_kwh),
            HarvestParams::Trace { values_kwh } => {
                values_kwh.iter().sum::<f64>() / values_kwh.len() as f64
            }
        }
    }
}

/// Mean of a normal(mu, sigma) truncated to `[0, mu + 3 sigma]`.
///
/// With `phi`/`Phi` the standard normal pdf/cdf and standardized bounds
/// `a = -mu/sigma`, `b = 3`:
///
/// ```text
/// E[X] = mu + sigma * (phi(a) - phi(b)) / (Phi(b) - Phi(a))
/// ```
pub fn truncated_normal_mean(mu: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return mu;
    }
    let a = -mu / sigma;
    let b = 3.0;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cap_phi = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    mu + sigma * (phi(a) - phi(b)) / (cap_phi(b) - cap_phi(a))
}

/// Abramowitz & Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

#[derive(Debug, Error, PartialEq)]
pub enum BatteryError {
    #[error("battery discharge {requested} kWh exceeds stored level {available} kWh")]
    DischargeExceedsLevel { requested: f64, available: f64 },
    #[error("battery flows must be non-negative (charge={charge}, discharge={discharge})")]
    NegativeFlow { charge: f64, discharge: f64 },
}

/// Result of one battery slot update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryStep {
    /// Stored level after the update, kWh.
    pub level_kwh: f64,
    /// Portion of the offered charge actually accepted (pre-loss), kWh.
    pub accepted_kwh: f64,
    /// Offered charge that did not fit and was curtailed, kWh.
    pub overflow_kwh: f64,
}

/// Applies one slot of battery dynamics: discharge first, then charge with
/// efficiency `eff`, clipping at `capacity`.
///
/// The post-charge level is `interim + eff * accepted` where
/// `interim = level - discharge`, and `accepted` is the largest portion of
/// `charge` that keeps the level at or below capacity. Discharging more
/// than the stored level is an error, not a clamp: callers decide how much
/// to draw and a violation means their allocation was wrong.
pub fn battery_step(
    level: f64,
    capacity: f64,
    eff: f64,
    charge: f64,
    discharge: f64,
) -> Result<BatteryStep, BatteryError> {
    if charge < 0.0 || discharge < 0.0 {
        return Err(BatteryError::NegativeFlow { charge, discharge });
    }
    // Tolerate float dust from the allocator: treat a discharge within
    // 1e-12 kWh above the level as exactly the level.
    if discharge > level + 1e-12 {
        return Err(BatteryError::DischargeExceedsLevel {
            requested: discharge,
            available: level,
        });
    }
    let interim = (level - discharge).max(0.0);
    let headroom = (capacity - interim).max(0.0);
    let accepted = (headroom / eff).min(charge);
    Ok(BatteryStep {
        level_kwh: interim + eff * accepted,
        accepted_kwh: accepted,
        overflow_kwh: charge - accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn charge_within_headroom_is_fully_accepted() {
        let step = battery_step(0.2, 1.0, 1.0, 0.45, 0.1).unwrap();
        assert_abs_diff_eq!(step.level_kwh, 0.55, epsilon = 1e-15);
        assert_abs_diff_eq!(step.accepted_kwh, 0.45, epsilon = 1e-15);
        assert_eq!(step.overflow_kwh, 0.0);
    }

    #[test]
    fn charge_beyond_capacity_overflows() {
        let step = battery_step(0.9, 1.0, 1.0, 0.3, 0.0).unwrap();
        assert_abs_diff_eq!(step.level_kwh, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(step.accepted_kwh, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(step.overflow_kwh, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn lossy_charging_consumes_more_than_it_stores() {
        // 0.2 kWh headroom at 80% efficiency absorbs 0.25 kWh of offer.
        let step = battery_step(0.8, 1.0, 0.8, 0.4, 0.0).unwrap();
        assert_abs_diff_eq!(step.level_kwh, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(step.accepted_kwh, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(step.overflow_kwh, 0.15, epsilon = 1e-15);
    }

    #[test]
    fn over_discharge_is_an_error() {
        let err = battery_step(0.1, 1.0, 1.0, 0.0, 0.2).unwrap_err();
        assert!(matches!(err, BatteryError::DischargeExceedsLevel { .. }));
    }

    #[test]
    fn discharge_then_charge_in_same_slot() {
        let step = battery_step(0.5, 1.0, 1.0, 0.8, 0.5).unwrap();
        assert_abs_diff_eq!(step.level_kwh, 0.8, epsilon = 1e-15);
        assert_eq!(step.overflow_kwh, 0.0);
    }

    #[test]
    fn stochastic_samples_stay_in_truncation_window() {
        let params = HarvestParams::Stochastic {
            mean_kwh: 0.05,
            stddev_kwh: 0.03,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for slot in 0..10_000 {
            let x = params.sample(slot, &mut rng);
            assert!((0.0..=0.05 + 3.0 * 0.03).contains(&x), "sample {x} escaped");
        }
    }

    #[test]
    fn identical_seeds_reproduce_the_harvest_sequence() {
        let params = HarvestParams::Stochastic {
            mean_kwh: 0.1,
            stddev_kwh: 0.05,
        };
        let draw = |seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|s| params.sample(s, &mut rng)).collect()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn empirical_mean_matches_truncated_normal_mean() {
        let (mu, sigma) = (0.05, 0.04);
        let params = HarvestParams::Stochastic {
            mean_kwh: mu,
            stddev_kwh: sigma,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let sum: f64 = (0..n).map(|s| params.sample(s, &mut rng)).sum();
        let empirical = sum / n as f64;
        let analytic = truncated_normal_mean(mu, sigma);
        assert_abs_diff_eq!(empirical, analytic, epsilon = 3e-4);
    }

    #[test]
    fn analytic_truncated_mean_matches_numerical_integration() {
        // Simpson's rule over [0, mu + 3 sigma] as an independent check.
        let (mu, sigma) = (0.05, 0.04);
        let pdf = |x: f64| {
            let z = (x - mu) / sigma;
            (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let (lo, hi) = (0.0, mu + 3.0 * sigma);
        let n = 10_000; // even
        let h = (hi - lo) / n as f64;
        let simpson = |f: &dyn Fn(f64) -> f64| {
            let mut acc = f(lo) + f(hi);
            for k in 1..n {
                let x = lo + k as f64 * h;
                acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            acc * h / 3.0
        };
        let mass = simpson(&|x| pdf(x));
        let first_moment = simpson(&|x| x * pdf(x));
        assert_abs_diff_eq!(
            truncated_normal_mean(mu, sigma),
            first_moment / mass,
            epsilon = 1e-6
        );
    }

    #[test]
    fn trace_replays_and_pads_with_zero() {
        let params = HarvestParams::Trace {
            values_kwh: vec![0.1, 0.2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(params.sample(0, &mut rng), 0.1);
        assert_eq!(params.sample(1, &mut rng), 0.2);
        assert_eq!(params.sample(2, &mut rng), 0.0);
    }

    #[test]
    fn zero_stddev_is_deterministic() {
        let params = HarvestParams::Stochastic {
            mean_kwh: 0.07,
            stddev_kwh: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(params.sample(0, &mut rng), 0.07);
        assert_eq!(params.expected_value(), 0.07);
    }
}
