//! Power-to-energy quadrature.
//!
//! Power series are integrated with the trapezoidal rule, which is exact for
//! piecewise-linear power. Sums use Neumaier compensation so that splitting a
//! series and adding the parts agrees with the whole to rounding.

use thiserror::Error;

use crate::scalar::Scalar;

pub const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("power at {timestamp_ms} ms is negative or not finite")]
    InvalidPower { timestamp_ms: i64 },
    #[error("timestamps not strictly increasing at {timestamp_ms} ms")]
    Unordered { timestamp_ms: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Energy<S> {
    pub joules: S,
    pub kwh: S,
}

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum<S> {
    sum: S,
    carry: S,
}

impl<S: Scalar> KahanSum<S> {
    pub fn add(&mut self, x: S) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry = self.carry + ((self.sum - t) + x);
        } else {
            self.carry = self.carry + ((x - t) + self.sum);
        }
        self.sum = t;
    }

    pub fn value(&self) -> S {
        self.sum + self.carry
    }
}

fn check_points<S: Scalar>(points: &[(i64, S)]) -> Result<(), EnergyError> {
    for (i, &(ts, w)) in points.iter().enumerate() {
        if !w.is_finite() || w < S::zero() {
            return Err(EnergyError::InvalidPower { timestamp_ms: ts });
        }
        if i > 0 && ts <= points[i - 1].0 {
            return Err(EnergyError::Unordered { timestamp_ms: ts });
        }
    }
    Ok(())
}

fn segment_joules<S: Scalar>(a: (i64, S), b: (i64, S)) -> S {
    let dt = S::of((b.0 - a.0) as f64 / 1000.0);
    (a.1 + b.1) * dt / S::of(2.0)
}

/// Integrates a power series given as `(timestamp ms, watts)` points.
/// Fewer than two points integrate to zero.
pub fn integrate_energy<S: Scalar>(points: &[(i64, S)]) -> Result<Energy<S>, EnergyError> {
    check_points(points)?;
    let mut acc = KahanSum::default();
    for w in points.windows(2) {
        acc.add(segment_joules(w[0], w[1]));
    }
    let joules = acc.value();
    Ok(Energy {
        joules,
        kwh: joules / S::of(JOULES_PER_KWH),
    })
}

/// Integrates emissions in grams: each segment's energy is weighted by the
/// emission factor (g/kWh) in force at the segment's start.
pub fn integrate_emissions<S, F>(points: &[(i64, S)], mut factor_at: F) -> Result<S, EnergyError>
where
    S: Scalar,
    F: FnMut(i64) -> S,
{
    check_points(points)?;
    let mut acc = KahanSum::default();
    for w in points.windows(2) {
        let kwh = segment_joules(w[0], w[1]) / S::of(JOULES_PER_KWH);
        acc.add(kwh * factor_at(w[0].0));
    }
    Ok(acc.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_power_for_an_hour() {
        let points: Vec<(i64, f64)> = (0..=60).map(|i| (i * 60_000, 100.0)).collect();
        let e = integrate_energy(&points).unwrap();
        assert_eq!(e.joules, 360_000.0);
        assert_eq!(e.kwh, 0.1);
    }

    #[test]
    fn degenerate_series_are_zero() {
        assert_eq!(integrate_energy::<f64>(&[]).unwrap().joules, 0.0);
        assert_eq!(integrate_energy(&[(5, 10.0f64)]).unwrap().joules, 0.0);
    }

    #[test]
    fn rejects_negative_and_unordered() {
        assert_eq!(
            integrate_energy(&[(0, 1.0), (1000, -1.0f64)]).unwrap_err(),
            EnergyError::InvalidPower { timestamp_ms: 1000 }
        );
        assert_eq!(
            integrate_energy(&[(0, 1.0), (0, 1.0f64)]).unwrap_err(),
            EnergyError::Unordered { timestamp_ms: 0 }
        );
    }

    #[test]
    fn emissions_use_factor_at_segment_start() {
        let points = [(0, 1000.0f64), (3_600_000, 1000.0), (7_200_000, 1000.0)];
        let grams = integrate_emissions(&points, |t| if t < 3_600_000 { 10.0 } else { 20.0 }).unwrap();
        assert!((grams - 30.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn splitting_is_additive(
            steps in proptest::collection::vec((1i64..120_000, 0.0f64..5000.0), 3..400),
            cut in 1usize..1000,
        ) {
            let mut t = 0;
            let points: Vec<(i64, f64)> = steps.iter().map(|&(dt, w)| { t += dt; (t, w) }).collect();
            let k = 1 + cut % (points.len() - 2);
            let whole = integrate_energy(&points).unwrap().joules;
            let left = integrate_energy(&points[..=k]).unwrap().joules;
            let right = integrate_energy(&points[k..]).unwrap().joules;
            prop_assert!((left + right - whole).abs() <= 1e-12 * whole.max(1e-300));
        }
    }
}
