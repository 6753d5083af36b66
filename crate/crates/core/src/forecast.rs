//! One-step-ahead forecast of key generation `Ĝ` and inventory `K̂`: a
//! pluggable rate predictor wrapped in a two-state Kalman corrector.

use std::collections::VecDeque;

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForecastError {
    #[error("innovation covariance is zero; the observation carries no usable information")]
    Degenerate,
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
}

/// Measured quantities at one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector {
    /// Key generation rate (bits/s).
    pub g: f64,
    /// Per-task consumption rates (bits/s).
    pub consumption: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateEstimate {
    pub g: f64,
    pub k: f64,
    pub p: Matrix2<f64>,
}

impl StateEstimate {
    pub fn new(g: f64, k: f64, p: Matrix2<f64>) -> Self {
        Self { g, k, p }
    }

    pub fn mean(&self) -> Vector2<f64> {
        Vector2::new(self.g, self.k)
    }

    pub fn std_k(&self) -> f64 {
        self.p[(1, 1)].max(0.0).sqrt()
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        let sym = (self.p - self.p.transpose()).abs().max() <= tol * (1.0 + self.p.abs().max());
        let eig = self.p.symmetric_eigenvalues();
        sym && eig.iter().all(|&e| e >= -tol * (1.0 + self.p.abs().max()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Process noise covariance, row-major.
    pub process_noise: [[f64; 2]; 2],
    /// Variance of the generation-rate observation.
    pub observation_noise: f64,
    /// Variance of the inventory observation (key-server status poll).
    #[serde(default)]
    pub inventory_noise: f64,
    #[serde(default = "observe_rate")]
    pub observation_map: [f64; 2],
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
}

fn observe_rate() -> [f64; 2] {
    [1.0, 0.0]
}

fn default_window() -> usize {
    10
}

fn default_level() -> f64 {
    0.95
}

impl FilterConfig {
    pub fn q(&self) -> Matrix2<f64> {
        let q = self.process_noise;
        Matrix2::new(q[0][0], q[0][1], q[1][0], q[1][1])
    }

    pub fn h(&self) -> RowVector2<f64> {
        RowVector2::new(self.observation_map[0], self.observation_map[1])
    }

    pub fn validate(&self) -> Result<(), ForecastError> {
        let q = self.q();
        if (q - q.transpose()).abs().max() > 1e-12 || q.symmetric_eigenvalues().min() < -1e-12 {
            return Err(ForecastError::InvalidConfig(
                "process_noise must be symmetric PSD".into(),
            ));
        }
        if !(self.observation_noise >= 0.0) || !(self.inventory_noise >= 0.0) {
            return Err(ForecastError::InvalidConfig(
                "observation noise must be >= 0".into(),
            ));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(ForecastError::InvalidConfig(
                "ci_level must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One-step forecaster for the generation rate.
///
/// Returns the predicted rate and its derivative with respect to the current
/// estimate, which becomes the `(0,0)` entry of the transition Jacobian.
pub trait RatePredictor: Send + Sync {
    fn predict_rate(&self, g_hat: f64, history: &[f64], dt: f64) -> (f64, f64);
}

/// Mean reversion toward the long-run rate, the drift of the link model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanReversion {
    pub mean_rate: f64,
    pub reversion_rate: f64,
}

impl RatePredictor for MeanReversion {
    fn predict_rate(&self, g_hat: f64, _history: &[f64], dt: f64) -> (f64, f64) {
        let a = 1.0 - self.reversion_rate * dt;
        (g_hat + self.reversion_rate * (self.mean_rate - g_hat) * dt, a)
    }
}

/// Time update: `Ĝ' = f(Ĝ)`, `K̂' = K̂ + (Ĝ' − c)·dt`, `P' = F P Fᵀ + Q`.
pub fn predict(
    est: &StateEstimate,
    predicted_consumption: f64,
    q: &Matrix2<f64>,
    predictor: &dyn RatePredictor,
    history: &[f64],
    dt: f64,
) -> StateEstimate {
    debug_assert!(dt > 0.0);
    let (g, a) = predictor.predict_rate(est.g, history, dt);
    let k = est.k + (g - predicted_consumption) * dt;
    let f = Matrix2::new(a, 0.0, a * dt, 1.0);
    let p = f * est.p * f.transpose() + q;
    StateEstimate {
        g,
        k: k.max(0.0),
        p: symmetrize(p),
    }
}

/// Measurement update for a scalar observation `y = h·x + v`, `v ~ N(0, r)`,
/// with the Joseph-form covariance update.
pub fn correct_scalar(
    est: &StateEstimate,
    y: f64,
    h: RowVector2<f64>,
    r: f64,
) -> Result<StateEstimate, ForecastError> {
    if r.is_infinite() {
        return Ok(*est);
    }
    let s = (h * est.p * h.transpose())[(0, 0)] + r;
    if !(s > 0.0) {
        return Err(ForecastError::Degenerate);
    }
    let gain: Vector2<f64> = est.p * h.transpose() / s;
    let x = est.mean() + gain * (y - (h * est.mean())[(0, 0)]);
    let ikh = Matrix2::identity() - gain * h;
    let p = ikh * est.p * ikh.transpose() + gain * r * gain.transpose();
    Ok(StateEstimate {
        g: x[0],
        k: x[1].max(0.0),
        p: symmetrize(p),
    })
}

/// Correction with the configured observation map against the observed
/// generation rate.
pub fn correct(
    est: &StateEstimate,
    obs: &ObservationVector,
    cfg: &FilterConfig,
) -> Result<StateEstimate, ForecastError> {
    correct_scalar(est, obs.g, cfg.h(), cfg.observation_noise)
}

/// Correction against a direct inventory reading.
pub fn correct_inventory(
    est: &StateEstimate,
    level: f64,
    r: f64,
) -> Result<StateEstimate, ForecastError> {
    correct_scalar(est, level, RowVector2::new(0.0, 1.0), r)
}

/// Two-sided standard-normal quantile for a central interval at `level`.
pub fn z_for_level(level: f64) -> f64 {
    standard_normal().inverse_cdf(0.5 + level / 2.0)
}

pub(crate) fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `K̂ ± z·√P_KK`, lower end clamped at zero.
pub fn confidence_interval(est: &StateEstimate, level: f64) -> (f64, f64) {
    let half = z_for_level(level) * est.std_k();
    ((est.k - half).max(0.0), est.k + half)
}

fn symmetrize(p: Matrix2<f64>) -> Matrix2<f64> {
    (p + p.transpose()) * 0.5
}

/// Stateful filter owned by one run.
pub struct KeyForecaster {
    cfg: FilterConfig,
    q: Matrix2<f64>,
    predictor: Box<dyn RatePredictor>,
    history: VecDeque<f64>,
    est: StateEstimate,
}

impl KeyForecaster {
    pub fn new(
        cfg: FilterConfig,
        predictor: Box<dyn RatePredictor>,
        initial: StateEstimate,
    ) -> Result<Self, ForecastError> {
        cfg.validate()?;
        Ok(Self {
            q: cfg.q(),
            history: VecDeque::with_capacity(cfg.window.max(1)),
            cfg,
            predictor,
            est: initial,
        })
    }

    pub fn estimate(&self) -> &StateEstimate {
        &self.est
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn predict(&mut self, predicted_consumption: f64, dt: f64) {
        let hist = self.history.make_contiguous();
        self.est = predict(
            &self.est,
            predicted_consumption,
            &self.q,
            self.predictor.as_ref(),
            hist,
            dt,
        );
    }

    pub fn observe_rate(&mut self, obs: &ObservationVector) -> Result<(), ForecastError> {
        if self.history.len() == self.cfg.window.max(1) {
            self.history.pop_front();
        }
        self.history.push_back(obs.g);
        self.est = correct(&self.est, obs, &self.cfg)?;
        Ok(())
    }

    pub fn observe_inventory(&mut self, level: f64) -> Result<(), ForecastError> {
        self.est = correct_inventory(&self.est, level, self.cfg.inventory_noise)?;
        Ok(())
    }

    pub fn interval(&self) -> (f64, f64) {
        confidence_interval(&self.est, self.cfg.ci_level)
    }

    /// Iterate the time update `steps` times without corrections, returning
    /// the `(K̂, σ_K)` trajectory for the scheduler horizon.
    pub fn lookahead(&self, consumption: f64, dt: f64, steps: usize) -> Vec<(f64, f64)> {
        let mut est = self.est;
        let hist: Vec<f64> = self.history.iter().copied().collect();
        (0..steps)
            .map(|_| {
                est = predict(&est, consumption, &self.q, self.predictor.as_ref(), &hist, dt);
                (est.k, est.std_k())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mr(mean: f64, rev: f64) -> MeanReversion {
        MeanReversion {
            mean_rate: mean,
            reversion_rate: rev,
        }
    }

    #[test]
    fn predict_equilibrium_is_fixed() {
        let est = StateEstimate::new(500.0, 2000.0, Matrix2::zeros());
        let out = predict(&est, 500.0, &Matrix2::zeros(), &mr(500.0, 0.5), &[], 0.1);
        assert_eq!(out.g, 500.0);
        assert_eq!(out.k, 2000.0);
        assert_eq!(out.p, Matrix2::zeros());
    }

    #[test]
    fn predict_inventory_arithmetic() {
        let est = StateEstimate::new(100.0, 1000.0, Matrix2::zeros());
        let out = predict(&est, 40.0, &Matrix2::zeros(), &mr(0.0, 0.0), &[], 0.1);
        assert!((out.k - 1006.0).abs() < 1e-9);
    }

    #[test]
    fn covariance_grows_without_corrections() {
        let q = Matrix2::new(1.0, 0.0, 0.0, 4.0);
        let mut est = StateEstimate::new(0.0, 100.0, Matrix2::identity());
        let m = mr(0.0, 0.5);
        for _ in 0..100 {
            let next = predict(&est, 0.0, &q, &m, &[], 0.1);
            assert!(next.p.trace() > est.p.trace());
            est = next;
        }
    }

    #[test]
    fn perfect_and_uninformative_observations() {
        let est = StateEstimate::new(10.0, 50.0, Matrix2::new(4.0, 1.0, 1.0, 3.0));
        let h = RowVector2::new(1.0, 0.0);
        let exact = correct_scalar(&est, 42.0, h, 0.0).unwrap();
        assert!((exact.g - 42.0).abs() < 1e-12);
        let same = correct_scalar(&est, 42.0, h, f64::INFINITY).unwrap();
        assert_eq!(same, est);
        let zero = StateEstimate::new(1.0, 1.0, Matrix2::zeros());
        assert_eq!(
            correct_scalar(&zero, 3.0, h, 0.0),
            Err(ForecastError::Degenerate)
        );
    }

    #[test]
    fn exact_model_recovers_truth_after_one_correction() {
        // zero noise, G observed directly, K observed directly
        let est = StateEstimate::new(0.0, 0.0, Matrix2::identity() * 100.0);
        let a = correct_scalar(&est, 250.0, RowVector2::new(1.0, 0.0), 0.0).unwrap();
        let b = correct_inventory(&a, 800.0, 0.0).unwrap();
        assert!((b.g - 250.0).abs() < 1e-9);
        assert!((b.k - 800.0).abs() < 1e-9);
    }

    #[test]
    fn z_quantile_and_interval() {
        let z = z_for_level(0.95);
        assert!((1.9599..=1.9600).contains(&z));
        let est = StateEstimate::new(0.0, 1000.0, Matrix2::new(0.0, 0.0, 0.0, 2500.0));
        let (lo, hi) = confidence_interval(&est, 0.95);
        assert!((lo - 902.0).abs() < 0.1 && (hi - 1098.0).abs() < 0.1);
        let certain = StateEstimate::new(0.0, 1000.0, Matrix2::zeros());
        assert_eq!(confidence_interval(&certain, 0.95), (1000.0, 1000.0));
        let low = StateEstimate::new(0.0, 10.0, Matrix2::new(0.0, 0.0, 0.0, 2500.0));
        assert_eq!(confidence_interval(&low, 0.95).0, 0.0);
    }

    #[test]
    fn filtered_rate_beats_raw_observations() {
        let (mean, rev, dt) = (1000.0, 0.5, 0.1);
        let sigma_proc: f64 = 20.0;
        let r: f64 = 150.0f64.powi(2);
        let m = mr(mean, rev);
        let q = Matrix2::new(sigma_proc.powi(2), 0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = mean;
        let mut est = StateEstimate::new(mean, 0.0, Matrix2::identity() * 100.0);
        let (mut se_f, mut se_raw) = (0.0, 0.0);
        for _ in 0..10_000 {
            let w: f64 = StandardNormal.sample(&mut rng);
            g = g + rev * (mean - g) * dt + sigma_proc * w;
            let v: f64 = StandardNormal.sample(&mut rng);
            let y = g + r.sqrt() * v;
            est = predict(&est, 0.0, &q, &m, &[], dt);
            est = correct_scalar(&est, y, RowVector2::new(1.0, 0.0), r).unwrap();
            se_f += (est.g - g).powi(2);
            se_raw += (y - g).powi(2);
            assert!(est.is_psd(1e-9));
        }
        assert!(se_f < se_raw, "{se_f} vs {se_raw}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn psd() -> impl Strategy<Value = Matrix2<f64>> {
            (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0)
                .prop_map(|(a, b, c, d)| {
                    let l = Matrix2::new(a, b, c, d);
                    l * l.transpose()
                })
        }

        proptest! {
            #[test]
            fn correction_shrinks_trace_and_keeps_psd(p in psd(), y in -100.0f64..100.0,
                                                      r in 0.01f64..50.0, obs_k in any::<bool>()) {
                let est = StateEstimate::new(1.0, 30.0, p);
                let h = if obs_k { RowVector2::new(0.0, 1.0) } else { RowVector2::new(1.0, 0.0) };
                let out = correct_scalar(&est, y, h, r).unwrap();
                prop_assert!(out.p.trace() <= p.trace() + 1e-9);
                prop_assert!(out.is_psd(1e-9));
            }

            #[test]
            fn predict_keeps_psd(p in psd(), q in psd(), dt in 0.01f64..1.0) {
                let est = StateEstimate::new(5.0, 100.0, p);
                let out = predict(&est, 1.0, &q, &mr(10.0, 0.5), &[], dt);
                prop_assert!(out.is_psd(1e-9));
            }
        }
    }
}
