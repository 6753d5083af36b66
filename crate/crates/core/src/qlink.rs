//! Physical QKD link: fiber attenuation, QBER, secure key rate, the
//! mean-reverting rate process and Poisson outage injection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("probability {value} outside [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },
    #[error("invalid link parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
}

fn check_prob(value: f64, lo: f64, hi: f64) -> Result<(), LinkError> {
    if value.is_nan() || value < lo || value > hi {
        return Err(LinkError::Domain { value, lo, hi });
    }
    Ok(())
}

/// Binary entropy in bits, with `0·log2(0) = 0`.
pub fn binary_entropy(p: f64) -> Result<f64, LinkError> {
    check_prob(p, 0.0, 1.0)?;
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    Ok(term(p) + term(1.0 - p))
}

/// Fraction of sifted bits that survive privacy amplification,
/// `max(0, 1 - 2h(qber))`.
pub fn privacy_amplification(qber: f64) -> Result<f64, LinkError> {
    check_prob(qber, 0.0, 0.5)?;
    Ok((1.0 - 2.0 * binary_entropy(qber)?).max(0.0))
}

/// QBER at which `1 - 2h(p)` reaches zero, by bisection on `[0, 0.5]`.
/// Above it no secure key survives.
pub fn secure_qber_threshold(tol: f64) -> f64 {
    let f = |p: f64| 1.0 - 2.0 * binary_entropy(p).expect("p in [0, 0.5]");
    let (mut lo, mut hi) = (0.0, 0.5);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Fiber transmittance `10^(-(α0 + Δα)·L/10)`. A jitter draw that would
/// push the total attenuation below zero is clamped to a lossless fiber.
pub fn attenuation(params: &LinkParams, jitter: f64) -> f64 {
    let alpha = (params.attenuation_db_per_km + jitter).max(0.0);
    10f64.powf(-alpha * params.fiber_length_km / 10.0)
}

/// Secure key rate in bits/s. Zero while the link is broken.
pub fn key_rate(params: &LinkParams, transmittance: f64, qber: f64, broken: bool) -> f64 {
    if broken {
        return 0.0;
    }
    let f_sec = privacy_amplification(qber.clamp(0.0, 0.5)).unwrap_or(0.0);
    params.photon_rate * transmittance.clamp(0.0, 1.0) * params.sift_ratio * f_sec
}

/// One explicit Euler–Maruyama step of `dG = -λ_G (G - Ḡ) dt + σ dW`,
/// clamped at zero.
pub fn step_rate_ou(rate: f64, params: &LinkParams, dt: f64, noise_draw: f64) -> f64 {
    debug_assert!(dt > 0.0);
    let drift = -params.reversion_rate * (rate - params.mean_rate);
    let next = rate + drift * dt + params.rate_noise_std * dt.sqrt() * noise_draw;
    next.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParams {
    /// Photon emission rate R_p (photons/s).
    pub photon_rate: f64,
    pub fiber_length_km: f64,
    /// Nominal attenuation α0 (dB/km).
    pub attenuation_db_per_km: f64,
    /// Std-dev of the Gaussian attenuation jitter Δα (dB/km).
    pub attenuation_jitter_std: f64,
    /// Sifting ratio q, held constant per link.
    pub sift_ratio: f64,
    /// Long-run mean of the key rate Ḡ (bits/s).
    pub mean_rate: f64,
    /// Mean-reversion speed λ_G (1/s).
    pub reversion_rate: f64,
    /// Diffusion coefficient of the rate noise (bits/s per √s).
    pub rate_noise_std: f64,
    /// Poisson link-break intensity λ_break (events/s).
    pub break_rate: f64,
    /// Outage durations are uniform over this range (s).
    pub outage_duration: [f64; 2],
    #[serde(default = "default_qber_base")]
    pub qber_base: f64,
    #[serde(default = "default_qber_slope")]
    pub qber_slope: f64,
}

fn default_qber_base() -> f64 {
    0.02
}

fn default_qber_slope() -> f64 {
    0.05
}

impl LinkParams {
    pub fn validate(&self) -> Result<(), LinkError> {
        let bad = |field, reason: &str| {
            Err(LinkError::InvalidParams {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.photon_rate > 0.0) {
            return bad("photon_rate", "must be > 0");
        }
        if !(self.fiber_length_km > 0.0) {
            return bad("fiber_length_km", "must be > 0");
        }
        if !(self.attenuation_db_per_km >= 0.0) {
            return bad("attenuation_db_per_km", "must be >= 0");
        }
        if !(self.attenuation_jitter_std >= 0.0) {
            return bad("attenuation_jitter_std", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.sift_ratio) {
            return bad("sift_ratio", "must lie in [0, 1]");
        }
        if !(self.mean_rate >= 0.0) {
            return bad("mean_rate", "must be >= 0");
        }
        if !(self.reversion_rate > 0.0) {
            return bad("reversion_rate", "must be > 0");
        }
        if !(self.rate_noise_std >= 0.0) {
            return bad("rate_noise_std", "must be >= 0");
        }
        if !(self.break_rate >= 0.0) {
            return bad("break_rate", "must be >= 0");
        }
        let [lo, hi] = self.outage_duration;
        if !(lo > 0.0 && hi >= lo) {
            return bad("outage_duration", "range must be positive and ordered");
        }
        if !(0.0..=0.5).contains(&self.qber_base) || !(self.qber_slope >= 0.0) {
            return bad("qber_base", "qber model must map into [0, 0.5]");
        }
        Ok(())
    }

    /// QBER as an affine function of transmission loss.
    pub fn qber_for(&self, transmittance: f64) -> f64 {
        (self.qber_base + self.qber_slope * (1.0 - transmittance)).clamp(0.0, 0.5)
    }

    /// Physical key rate with zero attenuation jitter.
    pub fn nominal_physical_rate(&self) -> f64 {
        let eta = attenuation(self, 0.0);
        key_rate(self, eta, self.qber_for(eta), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub time: f64,
    pub transmittance: f64,
    pub qber: f64,
    pub broken: bool,
    /// Delivered secure key rate (bits/s).
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub start: f64,
    pub duration: f64,
}

impl Outage {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutageSchedule {
    pub events: Vec<Outage>,
    max_duration: f64,
}

impl OutageSchedule {
    pub fn new(mut events: Vec<Outage>) -> Self {
        events.sort_by(|a, b| a.start.total_cmp(&b.start));
        let max_duration = events.iter().map(|e| e.duration).fold(0.0, f64::max);
        Self {
            events,
            max_duration,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Whether any outage covers `t` (half-open `[start, end)`).
    pub fn is_broken(&self, t: f64) -> bool {
        let upto = self.events.partition_point(|e| e.start <= t);
        self.events[..upto]
            .iter()
            .rev()
            .take_while(|e| e.start + self.max_duration > t)
            .any(|e| t < e.end())
    }

    /// Outage that starts inside `(t0, t1]`, if any.
    pub fn starting_in(&self, t0: f64, t1: f64) -> impl Iterator<Item = &Outage> {
        let from = self.events.partition_point(|e| e.start <= t0);
        self.events[from..].iter().take_while(move |e| e.start <= t1)
    }
}

/// Realize the link-break Poisson process over `[0, horizon)`.
pub fn sample_outages(params: &LinkParams, horizon: f64, seed: u64) -> OutageSchedule {
    if params.break_rate <= 0.0 || horizon <= 0.0 {
        return OutageSchedule::default();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(OUTAGE_STREAM);
    let gaps = Exp::new(params.break_rate).expect("break_rate > 0");
    let [lo, hi] = params.outage_duration;
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut rng);
        if t >= horizon {
            break;
        }
        let duration = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        events.push(Outage { start: t, duration });
    }
    OutageSchedule::new(events)
}

const OUTAGE_STREAM: u64 = 0x0u64;
const LINK_STREAM: u64 = 0x1u64;

/// A single QKD link advanced tick by tick.
///
/// The OU process tracks the environmental rate level; the delivered rate
/// scales it by the ratio of the instantaneous physical rate to the
/// nominal one, so attenuation and QBER jitter show up in `G` while its
/// long-run mean stays at `mean_rate`. During an outage η and QBER freeze
/// and the delivered rate is zero; the hidden OU level keeps evolving.
#[derive(Debug, Clone)]
pub struct QkdLink {
    params: LinkParams,
    outages: OutageSchedule,
    state: LinkState,
    ou_level: f64,
    nominal: f64,
    jitter: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl QkdLink {
    pub fn new(params: LinkParams, seed: u64, horizon: f64) -> Result<Self, LinkError> {
        params.validate()?;
        let outages = sample_outages(&params, horizon, seed);
        Ok(Self::with_outages(params, seed, outages))
    }

    pub fn with_outages(params: LinkParams, seed: u64, outages: OutageSchedule) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(LINK_STREAM);
        let eta = attenuation(&params, 0.0);
        let qber = params.qber_for(eta);
        let nominal = params.nominal_physical_rate();
        let jitter = (params.attenuation_jitter_std > 0.0)
            .then(|| Normal::new(0.0, params.attenuation_jitter_std).expect("std >= 0"));
        let broken = outages.is_broken(0.0);
        let ou_level = params.mean_rate;
        let state = LinkState {
            time: 0.0,
            transmittance: eta,
            qber,
            broken,
            rate: if broken || nominal <= 0.0 {
                0.0
            } else {
                ou_level
            },
        };
        Self {
            params,
            outages,
            state,
            ou_level,
            nominal,
            jitter,
            rng,
        }
    }

    pub fn params(&self) -> &LinkParams {
        &self.params
    }

    pub fn state(&self) -> &LinkState {
        &self.state
    }

    pub fn outages(&self) -> &OutageSchedule {
        &self.outages
    }

    /// Advance by `dt` seconds and return the new state.
    pub fn advance(&mut self, dt: f64) -> &LinkState {
        let t = self.state.time + dt;
        // Draws happen unconditionally so the random stream does not depend
        // on the outage pattern.
        let jitter = match &self.jitter {
            Some(n) => n.sample(&mut self.rng),
            None => 0.0,
        };
        let noise: f64 = StandardNormal.sample(&mut self.rng);
        self.ou_level = step_rate_ou(self.ou_level, &self.params, dt, noise);

        let broken = self.outages.is_broken(t);
        if !broken {
            self.state.transmittance = attenuation(&self.params, jitter);
            self.state.qber = self.params.qber_for(self.state.transmittance);
        }
        let physical = key_rate(
            &self.params,
            self.state.transmittance,
            self.state.qber,
            broken,
        );
        self.state.rate = if self.nominal > 0.0 {
            self.ou_level * physical / self.nominal
        } else {
            0.0
        };
        self.state.broken = broken;
        self.state.time = t;
        &self.state
    }
}
