//! Injected link latency: a base delay plus half-normal jitter, with a
//! drop marker while the QKD link is in outage.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::qlink::LinkState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub base_latency: f64,
    #[serde(default)]
    pub jitter_std: f64,
    #[serde(default = "yes")]
    pub outage_aware: bool,
}

fn yes() -> bool {
    true
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_latency >= 0.0 && self.base_latency.is_finite()) {
            return Err(format!("base_latency must be ≥ 0, got {}", self.base_latency));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(format!("jitter_std must be ≥ 0, got {}", self.jitter_std));
        }
        Ok(())
    }

    /// `base + σ/√(2π)`, the mean of `base + max(0, N(0, σ²))`.
    pub fn mean_delivered(&self) -> f64 {
        self.base_latency + self.jitter_std / (2.0 * std::f64::consts::PI).sqrt()
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            base_latency: 0.01,
            jitter_std: 0.005,
            outage_aware: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Latency {
    Delivered(f64),
    Dropped,
}

impl Latency {
    pub fn seconds(&self) -> f64 {
        match self {
            Latency::Delivered(s) => *s,
            Latency::Dropped => f64::INFINITY,
        }
    }

    pub fn within(&self, tolerance: f64) -> bool {
        matches!(self, Latency::Delivered(s) if *s <= tolerance)
    }
}

pub fn inject_latency<R: Rng + ?Sized>(model: &LatencyModel, link: &LinkState, rng: &mut R) -> Latency {
    if model.outage_aware && link.broken {
        return Latency::Dropped;
    }
    if model.jitter_std == 0.0 {
        return Latency::Delivered(model.base_latency);
    }
    let z: f64 = rng.sample(StandardNormal);
    Latency::Delivered(model.base_latency + (model.jitter_std * z).max(0.0))
}
