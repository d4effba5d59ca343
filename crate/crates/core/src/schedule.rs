//! Hyperparameter schedules on normalized training time `t ∈ [0, 1]`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Multi-cycle schedule `½(1 − cos(2π·log₂(1 + (2ᵏ − 1)·t)))` with `k`
/// valleys, at `t = (2ᵐ − 1)/(2ᵏ − 1)` for `m = 0..=k`.
pub fn coslog(k: u32, t: f64) -> f64 {
    let span = 2f64.powi(k as i32) - 1.0;
    0.5 * (1.0 - (2.0 * PI * (1.0 + span * t).log2()).cos())
}

/// Flat at 1 on `[0, ½]`, then a half cosine down to 0 at `t = 1`.
pub fn flat_cos(t: f64) -> f64 {
    0.5 * (1.0 + (PI * ((2.0 * t).max(1.0) - 1.0)).cos())
}

pub fn cosine_decay(t: f64) -> f64 {
    0.5 * (1.0 + (PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Schedule {
    Constant,
    CosLog(u32),
    FlatCos,
    CosineDecay,
}

impl Schedule {
    pub fn at(self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match self {
            Schedule::Constant => 1.0,
            Schedule::CosLog(k) => coslog(k, t),
            Schedule::FlatCos => flat_cos(t),
            Schedule::CosineDecay => cosine_decay(t),
        }
    }
}

/// `base · factor · schedule(iteration / total_iterations)`.
pub fn scheduled_value(
    base: f64,
    factor: f64,
    schedule: Schedule,
    iteration: usize,
    total_iterations: usize,
) -> f64 {
    let t = if total_iterations == 0 {
        0.0
    } else {
        iteration as f64 / total_iterations as f64
    };
    base * factor * schedule.at(t)
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant => f.write_str("constant"),
            Schedule::CosLog(k) => write!(f, "coslog{k}"),
            Schedule::FlatCos => f.write_str("flat_cos"),
            Schedule::CosineDecay => f.write_str("cosine_decay"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "flat_cos" => Ok(Schedule::FlatCos),
            "cosine_decay" | "cos" => Ok(Schedule::CosineDecay),
            other => other
                .strip_prefix("coslog")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &u32| (1..=30).contains(&k))
                .map(Schedule::CosLog)
                .ok_or_else(|| Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

impl From<Schedule> for String {
    fn from(s: Schedule) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Schedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coslog4_examples() {
        assert_eq!(coslog(4, 0.0), 0.0);
        assert!(coslog(4, 1.0 / 15.0).abs() < 1e-15);
        assert!(coslog(4, 1.0).abs() < 1e-15);
    }

    #[test]
    fn flat_cos_examples() {
        assert_eq!(flat_cos(0.25), 1.0);
        assert!((flat_cos(0.75) - 0.5).abs() < 1e-15);
        assert!(flat_cos(1.0).abs() < 1e-15);
    }

    #[test]
    fn scheduled_values() {
        assert!((scheduled_value(0.04, 6.0, Schedule::Constant, 5, 10) - 0.24).abs() < 1e-15);
        assert_eq!(scheduled_value(0.2, 1.0, Schedule::CosLog(4), 0, 1000), 0.0);
        assert!(scheduled_value(0.02, 1.0, Schedule::FlatCos, 1000, 1000).abs() < 1e-15);
    }

    #[test]
    fn schedules_stay_in_unit_interval() {
        for s in [
            Schedule::Constant,
            Schedule::CosLog(4),
            Schedule::CosLog(2),
            Schedule::FlatCos,
            Schedule::CosineDecay,
        ] {
            for i in 0..=10_000 {
                let v = s.at(i as f64 / 10_000.0);
                assert!((0.0..=1.0).contains(&v), "{s} at {i}: {v}");
            }
        }
    }

    #[test]
    fn coslog_has_k_plus_one_zeros() {
        // local minima on a fine grid, counting the endpoints
        for k in 1..=5u32 {
            let n = 200_000;
            let vals: Vec<f64> = (0..=n).map(|i| coslog(k, i as f64 / n as f64)).collect();
            let mut zeros = 0;
            for i in 0..=n {
                let left = if i == 0 { f64::INFINITY } else { vals[i - 1] };
                let right = if i == n { f64::INFINITY } else { vals[i + 1] };
                if vals[i] <= left && vals[i] < right || vals[i] < left && vals[i] <= right {
                    assert!(vals[i] < 1e-6);
                    zeros += 1;
                }
            }
            assert_eq!(zeros, k + 1, "k = {k}");
        }
    }

    #[test]
    fn parse_and_print() {
        for s in ["constant", "coslog4", "flat_cos", "cosine_decay"] {
            assert_eq!(s.parse::<Schedule>().unwrap().to_string(), s);
        }
        assert!("coslog".parse::<Schedule>().is_err());
        assert!("linear".parse::<Schedule>().is_err());
    }
}
