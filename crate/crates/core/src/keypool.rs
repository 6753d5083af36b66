//! Key inventory: reservoir update with cap discard, tiered thresholds,
//! Poisson task triggers and an integer-bit debit ledger.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("`{field}` must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("thresholds must satisfy K_safe < K_th < K_cap (got {k_safe}, {k_th}, {k_cap})")]
    ThresholdOrder { k_safe: u64, k_th: u64, k_cap: u64 },
    #[error("initial level {initial} exceeds capacity {k_cap}")]
    InitialAboveCap { initial: u64, k_cap: u64 },
    #[error("debit of zero bits")]
    ZeroDebit,
}

/// `α_max · L_max · λ_max · τ_crit`, the inventory needed to ride out a
/// generation stall of `τ_crit` seconds at peak demand.
pub fn safe_threshold(
    alpha_max: f64,
    l_max: f64,
    lambda_max: f64,
    tau_crit: f64,
) -> Result<f64, PoolError> {
    for (field, value) in [
        ("alpha_max", alpha_max),
        ("l_max", l_max),
        ("lambda_max", lambda_max),
        ("tau_crit", tau_crit),
    ] {
        if !(value > 0.0) {
            return Err(PoolError::NonPositive { field, value });
        }
    }
    Ok(alpha_max * l_max * lambda_max * tau_crit)
}

/// Encryption mode of a single message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CryptoMode {
    /// Session-key AES: fixed cost per message.
    Degraded,
    /// One-time pad: one key bit per message bit.
    Full,
}

/// Per-mode key cost convention. Full mode costs `full_bits_per_bit · L`
/// bits per message, degraded mode a flat `degraded_bits_per_message`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeCosts {
    #[serde(default = "one")]
    pub full_bits_per_bit: f64,
    #[serde(default = "aes_key_bits")]
    pub degraded_bits_per_message: u64,
}

fn one() -> f64 {
    1.0
}

fn aes_key_bits() -> u64 {
    128
}

impl Default for ModeCosts {
    fn default() -> Self {
        Self {
            full_bits_per_bit: 1.0,
            degraded_bits_per_message: 128,
        }
    }
}

impl ModeCosts {
    pub fn message_cost(&self, mode: CryptoMode, message_bits: u64) -> u64 {
        match mode {
            CryptoMode::Full => (self.full_bits_per_bit * message_bits as f64).round() as u64,
            CryptoMode::Degraded => self.degraded_bits_per_message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub id: usize,
    pub message_length: u64,
    pub cost_full: u64,
    pub cost_degraded: u64,
    pub trigger_rate: f64,
    pub priority: u32,
}

impl TaskProfile {
    pub fn new(
        id: usize,
        message_length: u64,
        trigger_rate: f64,
        priority: u32,
        costs: &ModeCosts,
    ) -> Self {
        Self {
            id,
            message_length,
            cost_full: costs.message_cost(CryptoMode::Full, message_length),
            cost_degraded: costs.message_cost(CryptoMode::Degraded, message_length),
            trigger_rate,
            priority,
        }
    }

    pub fn cost(&self, mode: CryptoMode) -> u64 {
        match mode {
            CryptoMode::Full => self.cost_full,
            CryptoMode::Degraded => self.cost_degraded,
        }
    }
}

/// Number of task triggers in one tick, Poisson with mean `λ_i·dt`.
pub fn sample_triggers<R: Rng + ?Sized>(profile: &TaskProfile, dt: f64, rng: &mut R) -> u64 {
    poisson_count(profile.trigger_rate * dt, rng)
}

pub fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    Poisson::new(mean).expect("mean > 0").sample(rng) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Protect,
    Reconfigure,
    Normal,
}

impl Zone {
    pub fn as_str(&self) -> &'static str {
        match self {
            Zone::Protect => "protect",
            Zone::Reconfigure => "reconfigure",
            Zone::Normal => "normal",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Zone::Protect => 0,
            Zone::Reconfigure => 1,
            Zone::Normal => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Zone::Protect),
            1 => Some(Zone::Reconfigure),
            2 => Some(Zone::Normal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub initial: u64,
    pub k_safe: u64,
    pub k_th: u64,
    pub k_cap: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Debit {
    Granted { bits: u64 },
    Refused { level: u64 },
}

impl Debit {
    pub fn is_granted(&self) -> bool {
        matches!(self, Debit::Granted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionEvent {
    pub time: f64,
    pub task_id: usize,
    pub bits: u64,
    pub granted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPool {
    level: u64,
    initial: u64,
    k_safe: u64,
    k_th: u64,
    k_cap: u64,
    total_generated: u64,
    total_consumed: u64,
    total_discarded: u64,
    /// Sub-bit generation not yet credited.
    carry: f64,
}

impl KeyPool {
    pub fn new(cfg: PoolConfig) -> Result<Self, PoolError> {
        if !(cfg.k_safe < cfg.k_th && cfg.k_th < cfg.k_cap) {
            return Err(PoolError::ThresholdOrder {
                k_safe: cfg.k_safe,
                k_th: cfg.k_th,
                k_cap: cfg.k_cap,
            });
        }
        if cfg.initial > cfg.k_cap {
            return Err(PoolError::InitialAboveCap {
                initial: cfg.initial,
                k_cap: cfg.k_cap,
            });
        }
        Ok(Self {
            level: cfg.initial,
            initial: cfg.initial,
            k_safe: cfg.k_safe,
            k_th: cfg.k_th,
            k_cap: cfg.k_cap,
            total_generated: 0,
            total_consumed: 0,
            total_discarded: 0,
            carry: 0.0,
        })
    }

    pub fn level(&self) -> u64 {
        self.level
    }
    pub fn initial(&self) -> u64 {
        self.initial
    }
    pub fn k_safe(&self) -> u64 {
        self.k_safe
    }
    pub fn k_th(&self) -> u64 {
        self.k_th
    }
    pub fn k_cap(&self) -> u64 {
        self.k_cap
    }
    pub fn total_generated(&self) -> u64 {
        self.total_generated
    }
    pub fn total_consumed(&self) -> u64 {
        self.total_consumed
    }
    pub fn total_discarded(&self) -> u64 {
        self.total_discarded
    }

    /// Take `bits` from the pool if available; otherwise leave it untouched.
    pub fn debit(&mut self, bits: u64) -> Result<Debit, PoolError> {
        if bits == 0 {
            return Err(PoolError::ZeroDebit);
        }
        if self.level >= bits {
            self.level -= bits;
            self.total_consumed += bits;
            Ok(Debit::Granted { bits })
        } else {
            Ok(Debit::Refused { level: self.level })
        }
    }

    /// Credit `rate·dt` bits of fresh key, discarding what overflows the cap.
    /// Consumption for the tick has already been taken by [`debit`](Self::debit).
    /// Fractional bits carry over to the next call.
    pub fn step_inventory(&mut self, rate: f64, dt: f64) -> u64 {
        debug_assert!(dt > 0.0);
        let accrued = rate.max(0.0) * dt + self.carry;
        let whole = accrued.floor();
        self.carry = accrued - whole;
        let bits = whole as u64;
        self.total_generated += bits;
        let room = self.k_cap - self.level;
        let kept = bits.min(room);
        self.level += kept;
        self.total_discarded += bits - kept;
        bits
    }

    /// Record `rate·dt` bits of link output that the pool does not accept
    /// (a pre-loaded, non-replenished pool). The bits count as generated
    /// and discarded, so the ledger identity still holds.
    pub fn discard_generation(&mut self, rate: f64, dt: f64) -> u64 {
        debug_assert!(dt > 0.0);
        let accrued = rate.max(0.0) * dt + self.carry;
        let whole = accrued.floor();
        self.carry = accrued - whole;
        let bits = whole as u64;
        self.total_generated += bits;
        self.total_discarded += bits;
        bits
    }

    pub fn zone(&self) -> Zone {
        classify_zone(self.level, self.k_safe, self.k_th)
    }

    /// `generated − (ΔK + consumed + discarded)`; zero for a consistent ledger.
    pub fn ledger_residual(&self) -> i128 {
        self.total_generated as i128
            - (self.level as i128 - self.initial as i128
                + self.total_consumed as i128
                + self.total_discarded as i128)
    }
}

/// Half-open bands: protect below `K_safe`, reconfigure on `[K_safe, K_th)`.
pub fn classify_zone(level: u64, k_safe: u64, k_th: u64) -> Zone {
    if level < k_safe {
        Zone::Protect
    } else if level < k_th {
        Zone::Reconfigure
    } else {
        Zone::Normal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(initial: u64) -> KeyPool {
        KeyPool::new(PoolConfig {
            initial,
            k_safe: 5120,
            k_th: 10_000,
            k_cap: 100_000,
        })
        .unwrap()
    }

    #[test]
    fn safe_threshold_examples() {
        assert_eq!(safe_threshold(1.0, 256.0, 2.0, 10.0).unwrap(), 5120.0);
        assert!(safe_threshold(0.0, 256.0, 2.0, 10.0).is_err());
        assert!(safe_threshold(1.0, 256.0, 2.0, 0.0).is_err());
        assert_eq!(
            safe_threshold(1.0, 256.0, 2.0, 20.0).unwrap(),
            2.0 * safe_threshold(1.0, 256.0, 2.0, 10.0).unwrap()
        );
    }

    #[test]
    fn trigger_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idle = TaskProfile::new(0, 512, 0.0, 1, &ModeCosts::default());
        assert!((0..1000).all(|_| sample_triggers(&idle, 0.1, &mut rng) == 0));

        let task = TaskProfile::new(0, 512, 1.0, 1, &ModeCosts::default());
        let n = 1_000_000;
        let total: u64 = (0..n).map(|_| sample_triggers(&task, 0.1, &mut rng)).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 0.1).abs() < 0.001, "mean {mean}");

        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_triggers(&task, 0.1, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn debit_examples() {
        let mut p = KeyPool::new(PoolConfig {
            initial: 100,
            k_safe: 10,
            k_th: 20,
            k_cap: 1000,
        })
        .unwrap();
        assert_eq!(p.debit(40).unwrap(), Debit::Granted { bits: 40 });
        assert_eq!(p.level(), 60);
        p.debit(50).unwrap();
        assert_eq!(p.level(), 10);
        assert_eq!(p.debit(40).unwrap(), Debit::Refused { level: 10 });
        assert_eq!(p.level(), 10);
        assert_eq!(p.debit(0), Err(PoolError::ZeroDebit));
        assert_eq!(p.ledger_residual(), 0);
    }

    #[test]
    fn inventory_step_examples() {
        let mut p = pool(1000);
        p.debit(3).unwrap();
        p.step_inventory(50.0, 0.1);
        assert_eq!(p.level(), 1002);
        assert_eq!(p.ledger_residual(), 0);

        let mut p = pool(100_000);
        p.step_inventory(500.0, 0.1);
        assert_eq!(p.level(), 100_000);
        assert_eq!(p.total_discarded(), 50);

        let mut p = pool(4321);
        p.step_inventory(0.0, 0.1);
        assert_eq!(p.level(), 4321);
    }

    #[test]
    fn fractional_generation_carries() {
        let mut p = pool(0);
        for _ in 0..10 {
            p.step_inventory(3.0, 0.1);
        }
        assert_eq!(p.level(), 3);
        assert_eq!(p.ledger_residual(), 0);
    }

    #[test]
    fn zone_boundaries() {
        let p = pool(10_000);
        assert_eq!(p.zone(), Zone::Normal);
        assert_eq!(classify_zone(5119, 5120, 10_000), Zone::Protect);
        assert_eq!(classify_zone(5120, 5120, 10_000), Zone::Reconfigure);
        assert_eq!(classify_zone(7000, 5120, 10_000), Zone::Reconfigure);
    }

    #[test]
    fn threshold_ordering_validated() {
        let bad = |s, t, c| {
            KeyPool::new(PoolConfig {
                initial: 0,
                k_safe: s,
                k_th: t,
                k_cap: c,
            })
        };
        assert!(bad(10, 10, 100).is_err());
        assert!(bad(10, 100, 100).is_err());
        assert!(bad(10, 50, 100).is_ok());
    }

    #[test]
    fn mode_cost_convention() {
        let c = ModeCosts::default();
        assert_eq!(c.message_cost(CryptoMode::Full, 512), 512);
        assert_eq!(c.message_cost(CryptoMode::Degraded, 512), 128);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Debit(u64),
            Step(f64),
            Discard(f64),
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                (1u64..5000).prop_map(Op::Debit),
                (0.0f64..50_000.0).prop_map(Op::Step),
                (0.0f64..50_000.0).prop_map(Op::Discard),
            ]
        }

        proptest! {
            #[test]
            fn ledger_and_bounds_hold(init in 0u64..100_000, ops in prop::collection::vec(op(), 0..200)) {
                let mut p = pool(init);
                for o in ops {
                    match o {
                        Op::Debit(b) => { p.debit(b).unwrap(); }
                        Op::Step(g) => { p.step_inventory(g, 0.1); }
                        Op::Discard(g) => {
                            let before = p.level();
                            p.discard_generation(g, 0.1);
                            prop_assert_eq!(p.level(), before);
                        }
                    }
                    prop_assert_eq!(p.ledger_residual(), 0);
                    prop_assert!(p.level() <= p.k_cap());
                }
            }

            #[test]
            fn no_generation_means_non_increasing(init in 0u64..100_000,
                                                  debits in prop::collection::vec(1u64..5000, 0..100)) {
                let mut p = pool(init);
                let mut last = p.level();
                for b in debits {
                    p.debit(b).unwrap();
                    p.step_inventory(0.0, 0.1);
                    prop_assert!(p.level() <= last);
                    last = p.level();
                }
            }
        }
    }
}
