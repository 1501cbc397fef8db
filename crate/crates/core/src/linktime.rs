//! Wall-clock cost of an exchange session and whether it fits in a contact.
//!
//! One round of a session is: send the model, train remotely, send the
//! gradient back, train and aggregate locally. A session of `rho` rounds
//! therefore costs `rho * (2 t_send + 2 t_train + t_agg)` seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Table size at which the reference aggregation times were measured.
pub const REFERENCE_TABLE_SIZE: usize = 32;

/// Relative slack when comparing a session cost with a contact duration.
const FIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkProfile {
    pub name: String,
    pub datarate_bps: f64,
    /// Literal per-transfer time; bypasses the datarate when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_send_override: Option<f64>,
}

impl LinkProfile {
    pub fn new(name: impl Into<String>, datarate_bps: f64) -> Result<Self> {
        let link = LinkProfile {
            name: name.into(),
            datarate_bps,
            t_send_override: None,
        };
        link.validate()?;
        Ok(link)
    }

    pub fn wifi_direct() -> Self {
        LinkProfile::new("wifi-direct", 250e6).unwrap()
    }

    pub fn bluetooth() -> Self {
        LinkProfile::new("bluetooth", 2e6).unwrap()
    }

    /// The 1 Mbps link used by the simulations.
    pub fn simulation_default() -> Self {
        LinkProfile::new("bluetooth-1mbps", 1e6).unwrap()
    }

    pub fn with_t_send(mut self, t_send: f64) -> Self {
        self.t_send_override = Some(t_send);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.datarate_bps > 0.0) {
            return Err(Error::param(format!(
                "link {} needs a positive datarate",
                self.name
            )));
        }
        if let Some(t) = self.t_send_override {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(Error::param(format!(
                    "link {} has invalid t_send override {t}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeProfile {
    /// Seconds for one round of training on a local set.
    pub t_train: f64,
    /// Seconds for one aggregation over a full table of 32 entries.
    pub t_agg_worst_case: f64,
}

impl ComputeProfile {
    pub fn mnist() -> Self {
        ComputeProfile {
            t_train: 1.543,
            t_agg_worst_case: 0.064,
        }
    }

    pub fn cifar10() -> Self {
        ComputeProfile {
            t_train: 5.740,
            t_agg_worst_case: 0.448,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_train >= 0.0) || !(self.t_agg_worst_case >= 0.0) {
            return Err(Error::param("compute times must be non-negative"));
        }
        Ok(())
    }

    /// Aggregation time for a table with `entries` gradients, linear in size.
    pub fn t_agg(&self, entries: usize) -> f64 {
        self.t_agg_worst_case * entries as f64 / REFERENCE_TABLE_SIZE as f64
    }
}

/// Seconds to move `model_bytes` over `link`.
pub fn t_send(model_bytes: u64, link: &LinkProfile) -> f64 {
    match link.t_send_override {
        Some(t) => t,
        None => model_bytes as f64 * 8.0 / link.datarate_bps,
    }
}

pub fn encounter_time(rho: u32, t_send: f64, t_train: f64, t_agg: f64) -> f64 {
    rho as f64 * (2.0 * t_send + 2.0 * t_train + t_agg)
}

/// Most rounds (up to `rho_max`) whose total cost fits the contact.
///
/// With `split_both_ways` each direction only gets half of the contact.
/// Returns 0 when not even one round fits.
pub fn feasible_rounds(
    predicted_duration: f64,
    t_send: f64,
    t_train: f64,
    t_agg: f64,
    rho_max: u32,
    split_both_ways: bool,
) -> u32 {
    let budget = if split_both_ways {
        predicted_duration / 2.0
    } else {
        predicted_duration
    };
    let limit = budget * (1.0 + FIT_TOLERANCE);
    (1..=rho_max)
        .rev()
        .find(|&rho| encounter_time(rho, t_send, t_train, t_agg) <= limit)
        .unwrap_or(0)
}

/// One row of the required-duration matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DurationRow {
    pub name: &'static str,
    pub t_train: f64,
    pub t_agg: f64,
    pub t_send: f64,
    pub t_enc: f64,
}

/// Measured transfer times for the two models over the two reference links.
pub const REFERENCE_T_SEND: [(&str, f64); 4] = [
    ("MNIST_WIFI", 0.020),
    ("MNIST_Bluetooth", 3.05),
    ("CIFAR-10_WIFI", 0.153),
    ("CIFAR-10_Bluetooth", 19.1),
];

/// Required encounter durations at a full table for both models and links.
pub fn duration_matrix(rho: u32) -> Vec<DurationRow> {
    REFERENCE_T_SEND
        .iter()
        .map(|&(name, t_send)| {
            let compute = if name.starts_with("MNIST") {
                ComputeProfile::mnist()
            } else {
                ComputeProfile::cifar10()
            };
            let t_agg = compute.t_agg(REFERENCE_TABLE_SIZE);
            DurationRow {
                name,
                t_train: compute.t_train,
                t_agg,
                t_send,
                t_enc: encounter_time(rho, t_send, compute.t_train, t_agg),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_send_from_datarate() {
        let t = t_send(796_840, &LinkProfile::wifi_direct());
        assert!((t - 0.025_498_88).abs() < 1e-9);
        assert!((t_send(1_000_000, &LinkProfile::new("x", 8e6).unwrap()) - 1.0).abs() < 1e-15);
        let slow = t_send(12_345, &LinkProfile::new("a", 1e6).unwrap());
        let fast = t_send(12_345, &LinkProfile::new("b", 2e6).unwrap());
        assert_eq!(slow, 2.0 * fast);
        assert!(t_send(796_840, &LinkProfile::new("c", 1e300).unwrap()) < 1e-290);
        assert_eq!(t_send(1, &LinkProfile::bluetooth().with_t_send(3.05)), 3.05);
    }

    #[test]
    fn encounter_time_rows() {
        assert!((encounter_time(6, 0.020, 1.543, 0.064) - 19.14).abs() < 1e-9);
        assert!((encounter_time(6, 3.05, 1.543, 0.064) - 55.50).abs() < 1e-9);
        assert!((encounter_time(6, 19.1, 5.740, 0.448) - 300.77).abs() < 0.01);
    }

    #[test]
    fn encounter_time_is_linear() {
        for rho in 1..20 {
            assert_eq!(
                encounter_time(2 * rho, 0.3, 1.1, 0.07),
                2.0 * encounter_time(rho, 0.3, 1.1, 0.07)
            );
        }
    }

    #[test]
    fn feasibility_examples() {
        assert_eq!(feasible_rounds(19.14, 0.020, 1.543, 0.064, 6, false), 6);
        assert_eq!(feasible_rounds(3.18, 0.020, 1.543, 0.064, 6, false), 0);
        assert_eq!(feasible_rounds(1e9, 0.020, 1.543, 0.064, 6, false), 6);
        assert_eq!(feasible_rounds(5.0, 0.0, 0.0, 0.0, 6, true), 6);
    }

    #[test]
    fn split_halves_rounds() {
        // Sweep durations that fit exactly 2k rounds unsplit.
        let per_round = encounter_time(1, 0.5, 1.0, 0.1);
        for k in 1..=6u32 {
            let d = per_round * (2 * k) as f64;
            assert_eq!(feasible_rounds(d, 0.5, 1.0, 0.1, 12, false), 2 * k);
            assert_eq!(feasible_rounds(d, 0.5, 1.0, 0.1, 12, true), k);
        }
    }

    #[test]
    fn feasibility_is_monotone() {
        let mut prev = 0;
        for i in 0..400 {
            let r = feasible_rounds(i as f64 * 0.25, 0.3, 1.5, 0.05, 6, false);
            assert!(r >= prev);
            prev = r;
        }
        let mut prev = u32::MAX;
        for i in 0..100 {
            let r = feasible_rounds(30.0, 0.01 * i as f64, 1.5, 0.05, 6, false);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn linear_aggregation_time() {
        let c = ComputeProfile::mnist();
        assert_eq!(c.t_agg(32), 0.064);
        assert_eq!(c.t_agg(16), 0.032);
        assert_eq!(c.t_agg(0), 0.0);
    }

    #[test]
    fn matrix_reproduces_reference_rows() {
        let rows = duration_matrix(6);
        let expected = [19.14, 55.50, 73.40, 300.77];
        for (row, want) in rows.iter().zip(expected) {
            assert!(
                (row.t_enc - want).abs() <= 0.01,
                "{}: {}",
                row.name,
                row.t_enc
            );
        }
        for (a, b) in rows.iter().zip(duration_matrix(12)) {
            assert_eq!(b.t_enc, 2.0 * a.t_enc);
        }
    }
}
