//! Simulation clock values.
//!
//! All event ordering happens on integer nanoseconds. Cost functions work in
//! `f64` seconds and are converted once, rounding up so that a transfer never
//! finishes faster than its link allows.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// A point in simulated time (or a span), in nanoseconds.
#[derive(
    Debug, Default, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    /// Converts seconds to nanoseconds, rounding up. Negative and NaN inputs
    /// clamp to zero.
    pub fn from_secs_ceil(secs: f64) -> Self {
        if !(secs > 0.0) {
            return SimTime::ZERO;
        }
        let ns = secs * 1e9;
        // Absorb float noise such as 0.1 * 1e9 = 100000000.00000001.
        let rounded = ns.round();
        if (ns - rounded).abs() < 1e-6 * rounded.max(1.0) {
            SimTime(rounded as u64)
        } else {
            SimTime(ns.ceil() as u64)
        }
    }

    pub fn from_secs_round(secs: f64) -> Self {
        if !(secs > 0.0) {
            return SimTime::ZERO;
        }
        SimTime((secs * 1e9).round() as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;

    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 = self.0.saturating_add(rhs.0);
    }
}

impl Sub for SimTime {
    type Output = SimTime;

    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_conversion_absorbs_float_noise() {
        assert_eq!(SimTime::from_secs_ceil(0.1), SimTime(100_000_000));
        assert_eq!(SimTime::from_secs_ceil(1.0), SimTime(1_000_000_000));
        assert_eq!(SimTime::from_secs_ceil(1.5e-9), SimTime(2));
        assert_eq!(SimTime::from_secs_ceil(-3.0), SimTime::ZERO);
        assert_eq!(SimTime::from_secs_ceil(f64::NAN), SimTime::ZERO);
    }

    #[test]
    fn arithmetic() {
        let a = SimTime(10) + SimTime(5);
        assert_eq!(a, SimTime(15));
        assert_eq!(a - SimTime(5), SimTime(10));
        assert_eq!(SimTime(3).saturating_sub(SimTime(7)), SimTime::ZERO);
        assert!((SimTime(1_500_000_000).as_secs_f64() - 1.5).abs() < 1e-12);
    }
}
