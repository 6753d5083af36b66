//! Reduced linear area model of the power system, chain control laws,
//! step-load disturbances and the run metrics.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension mismatch: {what} has {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("state matrix is not stable: spectral radius {radius:.6} >= 1")]
    Unstable { radius: f64 },
    #[error("unknown grid preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid grid parameter: {0}")]
    Invalid(String),
}

/// Ordering of the state vector: `[Δf per area, ∫Δf per area (optional), ΔV per node]`.
/// Inputs: one power channel per area followed by one excitation channel per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub areas: usize,
    pub integrators: bool,
    pub nodes: usize,
}

impl Layout {
    pub fn states(&self) -> usize {
        self.areas * if self.integrators { 2 } else { 1 } + self.nodes
    }
    pub fn inputs(&self) -> usize {
        self.areas + self.nodes
    }
    pub fn df_index(&self, area: usize) -> usize {
        area
    }
    pub fn integral_index(&self, area: usize) -> Option<usize> {
        self.integrators.then_some(self.areas + area)
    }
    pub fn dv_index(&self, node: usize) -> usize {
        self.areas * if self.integrators { 2 } else { 1 } + node
    }
    pub fn voltage_channel(&self, node: usize) -> usize {
        self.areas + node
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub layout: Layout,
}

impl GridModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, layout: Layout) -> Result<Self, GridError> {
        let n = layout.states();
        for (what, got, expected) in [
            ("A rows", a.nrows(), n),
            ("A columns", a.ncols(), n),
            ("B rows", b.nrows(), n),
            ("B columns", b.ncols(), layout.inputs()),
        ] {
            if got != expected {
                return Err(GridError::Dimension {
                    what,
                    got,
                    expected,
                });
            }
        }
        let radius = spectral_radius(&a);
        if !(radius < 1.0) {
            return Err(GridError::Unstable { radius });
        }
        Ok(Self { a, b, layout })
    }

    /// Build a discrete model from per-area physical parameters.
    pub fn from_params(p: &AreaParams, dt: f64) -> Result<Self, GridError> {
        let areas = p.inertia.len();
        if areas == 0 || p.damping.len() != areas {
            return Err(GridError::Invalid(
                "inertia and damping must be non-empty and equally long".into(),
            ));
        }
        if p.inertia.iter().any(|&m| !(m > 0.0)) || p.damping.iter().any(|&d| !(d >= 0.0)) {
            return Err(GridError::Invalid(
                "inertia must be > 0 and damping >= 0".into(),
            ));
        }
        if !(dt > 0.0) || !(p.integral_leak >= 0.0) || !(p.voltage_time_constant > 0.0) {
            return Err(GridError::Invalid(
                "dt and voltage time constant must be > 0, leak >= 0".into(),
            ));
        }
        let layout = Layout {
            areas,
            integrators: true,
            nodes: p.voltage_nodes,
        };
        let n = layout.states();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, layout.inputs());
        for i in 0..areas {
            let m = p.inertia[i];
            let mut diag = 1.0 - dt * p.damping[i] / m;
            for &(x, y, t) in &p.ties {
                let other = if x == i {
                    y
                } else if y == i {
                    x
                } else {
                    continue;
                };
                if other >= areas {
                    return Err(GridError::Invalid(format!("tie references area {other}")));
                }
                diag -= dt * t / m;
                a[(i, other)] += dt * t / m;
            }
            a[(i, i)] = diag;
            b[(i, i)] = dt / m;
            let zi = layout.integral_index(i).expect("integrators on");
            a[(zi, zi)] = 1.0 - dt * p.integral_leak;
            a[(zi, i)] = dt;
        }
        let kv = dt / p.voltage_time_constant;
        for node in 0..p.voltage_nodes {
            let vi = layout.dv_index(node);
            a[(vi, vi)] = 1.0 - kv;
            b[(vi, layout.voltage_channel(node))] = kv;
        }
        Self::new(a, b, layout)
    }

    pub fn preset(name: &str, dt: f64) -> Result<Self, GridError> {
        Self::from_params(&AreaParams::preset(name)?, dt)
    }

    pub fn zero_state(&self) -> GridState {
        GridState {
            x: DVector::zeros(self.layout.states()),
            layout: self.layout,
        }
    }

    /// Map a per-channel load vector into state space (`B·load`).
    pub fn disturbance_to_state(&self, load: &DVector<f64>) -> DVector<f64> {
        &self.b * load
    }

    /// Closed-loop state matrix with every law active and undelayed.
    pub fn closed_loop(&self, laws: &[ControlLaw]) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.layout.inputs(), self.layout.states());
        for law in laws {
            law.add_gain_row(&self.layout, &mut k);
        }
        &self.a + &self.b * k
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if let Some(schur) = Schur::try_new(a.clone(), 1e-14, 10_000) {
        return schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re.hypot(z.im))
            .fold(0.0, f64::max);
    }
    // Gelfand's formula by repeated squaring, rescaled to avoid overflow.
    let mut m = a.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..40 {
        let norm = m.norm();
        if norm == 0.0 {
            return 0.0;
        }
        m /= norm;
        log_scale += norm.ln() / power;
        m = &m * &m;
        power *= 2.0;
    }
    (log_scale + m.norm().ln() / power).exp()
}

/// Per-area swing parameters used to build the discrete model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaParams {
    /// Aggregate inertia per area (pu·s/Hz).
    pub inertia: Vec<f64>,
    /// Load damping per area (pu/Hz).
    pub damping: Vec<f64>,
    /// Tie-line synchronizing coefficients `(area, area, T)` (pu/Hz).
    #[serde(default)]
    pub ties: Vec<(usize, usize, f64)>,
    /// Leak on the integral-of-frequency state (1/s); keeps A strictly stable.
    #[serde(default = "default_leak")]
    pub integral_leak: f64,
    #[serde(default)]
    pub voltage_nodes: usize,
    #[serde(default = "default_tv")]
    pub voltage_time_constant: f64,
}

fn default_leak() -> f64 {
    0.02
}

fn default_tv() -> f64 {
    0.5
}

impl AreaParams {
    pub fn preset(name: &str) -> Result<Self, GridError> {
        match name {
            // New England system reduced to three coherent areas.
            "ieee39-3area" => Ok(Self {
                inertia: vec![10.0, 9.0, 11.0],
                damping: vec![1.0, 0.9, 1.1],
                ties: vec![(0, 1, 0.6), (1, 2, 0.5), (0, 2, 0.4)],
                integral_leak: 0.02,
                voltage_nodes: 0,
                voltage_time_constant: 0.5,
            }),
            // Transmission area 0 feeding three radial distribution areas.
            "ieee118-tso-3dso" => Ok(Self {
                inertia: vec![14.0, 6.0, 5.0, 6.5],
                damping: vec![1.4, 0.7, 0.6, 0.7],
                ties: vec![(0, 1, 0.5), (0, 2, 0.5), (0, 3, 0.5)],
                integral_leak: 0.02,
                voltage_nodes: 0,
                voltage_time_constant: 0.5,
            }),
            other => Err(GridError::UnknownPreset(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub x: DVector<f64>,
    pub layout: Layout,
}

impl GridState {
    pub fn df(&self) -> &[f64] {
        &self.x.as_slice()[..self.layout.areas]
    }

    pub fn dv(&self) -> &[f64] {
        let start = self.layout.dv_index(0);
        &self.x.as_slice()[start..start + self.layout.nodes]
    }

    pub fn max_abs_df(&self) -> f64 {
        self.df().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `x' = A·x + B·u + d` with `d` already in state coordinates.
pub fn step_grid(
    model: &GridModel,
    state: &GridState,
    u: &DVector<f64>,
    disturbance: &DVector<f64>,
) -> Result<GridState, GridError> {
    let n = model.layout.states();
    if state.x.len() != n {
        return Err(GridError::Dimension {
            what: "state",
            got: state.x.len(),
            expected: n,
        });
    }
    if u.len() != model.layout.inputs() {
        return Err(GridError::Dimension {
            what: "input",
            got: u.len(),
            expected: model.layout.inputs(),
        });
    }
    if disturbance.len() != n {
        return Err(GridError::Dimension {
            what: "disturbance",
            got: disturbance.len(),
            expected: n,
        });
    }
    let mut x = &model.a * &state.x;
    x.gemv(1.0, &model.b, u, 1.0);
    x += disturbance;
    Ok(GridState {
        x,
        layout: model.layout,
    })
}

/// Feedback law a chain applies when it delivers a command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ControlLaw {
    /// Proportional-integral frequency feedback on one area's power channel.
    Frequency {
        area: usize,
        kp: f64,
        #[serde(default)]
        ki: f64,
    },
    /// Proportional voltage feedback on one node's excitation channel.
    Voltage { node: usize, kp: f64 },
    /// Measurement-only chain; no actuation.
    Monitor,
}

impl ControlLaw {
    pub fn channel(&self, layout: &Layout) -> Option<usize> {
        match *self {
            ControlLaw::Frequency { area, .. } => Some(area),
            ControlLaw::Voltage { node, .. } => Some(layout.voltage_channel(node)),
            ControlLaw::Monitor => None,
        }
    }

    pub fn validate(&self, layout: &Layout) -> Result<(), GridError> {
        match *self {
            ControlLaw::Frequency { area, .. } if area >= layout.areas => {
                Err(GridError::Invalid(format!("control law names area {area}")))
            }
            ControlLaw::Voltage { node, .. } if node >= layout.nodes => {
                Err(GridError::Invalid(format!("control law names node {node}")))
            }
            _ => Ok(()),
        }
    }

    pub fn output(&self, layout: &Layout, x: &DVector<f64>) -> f64 {
        match *self {
            ControlLaw::Frequency { area, kp, ki } => {
                let z = layout.integral_index(area).map_or(0.0, |i| x[i]);
                -kp * x[layout.df_index(area)] - ki * z
            }
            ControlLaw::Voltage { node, kp } => -kp * x[layout.dv_index(node)],
            ControlLaw::Monitor => 0.0,
        }
    }

    fn add_gain_row(&self, layout: &Layout, k: &mut DMatrix<f64>) {
        match *self {
            ControlLaw::Frequency { area, kp, ki } => {
                k[(area, layout.df_index(area))] -= kp;
                if let Some(i) = layout.integral_index(area) {
                    k[(area, i)] -= ki;
                }
            }
            ControlLaw::Voltage { node, kp } => {
                k[(layout.voltage_channel(node), layout.dv_index(node))] -= kp;
            }
            ControlLaw::Monitor => {}
        }
    }
}

/// What the grid sees of one chain at a tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainActuation {
    pub law: ControlLaw,
    /// 0 = off, 1 = degraded, 2 = full.
    pub state: u8,
    /// Measurement lag (ticks) applied in degraded mode.
    pub degraded_lag: usize,
}

/// Ring buffer of recent states; index 0 is the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct GridHistory {
    buf: VecDeque<DVector<f64>>,
    depth: usize,
}

impl GridHistory {
    pub fn new(initial: &GridState, max_lag: usize) -> Self {
        let mut buf = VecDeque::with_capacity(max_lag + 1);
        buf.push_front(initial.x.clone());
        Self {
            buf,
            depth: max_lag + 1,
        }
    }

    pub fn push(&mut self, state: &GridState) {
        self.push_vec(&state.x);
    }

    pub fn push_vec(&mut self, x: &DVector<f64>) {
        if self.buf.len() == self.depth {
            self.buf.pop_back();
        }
        self.buf.push_front(x.clone());
    }

    /// State `lag` ticks ago, or the oldest retained one.
    pub fn lagged(&self, lag: usize) -> &DVector<f64> {
        &self.buf[lag.min(self.buf.len() - 1)]
    }
}

/// Per-channel input produced by the active chains.
pub fn control_input_map(
    chains: &[ChainActuation],
    history: &GridHistory,
    layout: &Layout,
) -> DVector<f64> {
    let mut u = DVector::zeros(layout.inputs());
    for c in chains {
        if c.state == 0 {
            continue;
        }
        let Some(ch) = c.law.channel(layout) else {
            continue;
        };
        let lag = if c.state == 1 { c.degraded_lag } else { 0 };
        u[ch] += c.law.output(layout, history.lagged(lag));
    }
    u
}

/// Step-load disturbance process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    /// Poisson arrival rate of load steps (events/s).
    #[serde(default)]
    pub rate: f64,
    /// Step magnitude range (pu), sign drawn uniformly.
    #[serde(default = "default_mag")]
    pub magnitude: [f64; 2],
    /// Step duration range (s).
    #[serde(default = "default_dur")]
    pub duration: [f64; 2],
    /// Areas eligible for random steps; empty means all.
    #[serde(default)]
    pub areas: Vec<usize>,
    /// Fixed events in addition to the random ones.
    #[serde(default)]
    pub events: Vec<LoadStep>,
}

fn default_mag() -> [f64; 2] {
    [0.05, 0.15]
}

fn default_dur() -> [f64; 2] {
    [10.0, 30.0]
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        Self {
            rate: 0.0,
            magnitude: default_mag(),
            duration: default_dur(),
            areas: Vec::new(),
            events: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadStep {
    pub start: f64,
    pub duration: f64,
    /// Input channel (area index for power steps).
    pub channel: usize,
    /// Signed magnitude (pu).
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DisturbanceProfile {
    steps: Vec<LoadStep>,
    channels: usize,
}

impl DisturbanceProfile {
    pub fn generate(
        cfg: &DisturbanceConfig,
        layout: &Layout,
        horizon: f64,
        seed: u64,
    ) -> Result<Self, GridError> {
        let channels = layout.inputs();
        let mut steps = cfg.events.clone();
        if steps.iter().any(|s| s.channel >= channels) {
            return Err(GridError::Invalid(
                "load step channel out of range".into(),
            ));
        }
        if cfg.rate > 0.0 {
            let areas: Vec<usize> = if cfg.areas.is_empty() {
                (0..layout.areas).collect()
            } else {
                cfg.areas.clone()
            };
            if areas.iter().any(|&a| a >= layout.areas) {
                return Err(GridError::Invalid("disturbance area out of range".into()));
            }
            let [mlo, mhi] = cfg.magnitude;
            let [dlo, dhi] = cfg.duration;
            if !(0.0 <= mlo && mlo <= mhi && 0.0 < dlo && dlo <= dhi) {
                return Err(GridError::Invalid(
                    "disturbance ranges must be ordered and non-negative".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(DISTURBANCE_STREAM);
            let gaps = Exp::new(cfg.rate).expect("rate > 0");
            let mut t = 0.0;
            loop {
                t += gaps.sample(&mut rng);
                if t >= horizon {
                    break;
                }
                let area = areas[rng.gen_range(0..areas.len())];
                let mag = uniform(&mut rng, mlo, mhi);
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let duration = uniform(&mut rng, dlo, dhi);
                steps.push(LoadStep {
                    start: t,
                    duration,
                    channel: area,
                    magnitude: sign * mag,
                });
            }
        }
        steps.sort_by(|a, b| a.start.total_cmp(&b.start));
        Ok(Self { steps, channels })
    }

    pub fn steps(&self) -> &[LoadStep] {
        &self.steps
    }

    /// Per-channel load at time `t`. Loads enter as negative power.
    pub fn load_at(&self, t: f64) -> DVector<f64> {
        let mut v = DVector::zeros(self.channels);
        for s in &self.steps {
            if s.start > t {
                break;
            }
            if t < s.start + s.duration {
                v[s.channel] -= s.magnitude;
            }
        }
        v
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

const DISTURBANCE_STREAM: u64 = 0x2;

/// Counters from which the four run metrics are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub n_trigger: u64,
    pub n_success: u64,
    pub max_abs_df: f64,
    pub generated_bits: u64,
    pub consumed_bits: u64,
    pub initial_bits: u64,
    pub violation_ticks: u64,
    pub dt: f64,
    pub df_safe: f64,
}

impl MetricsAccumulator {
    pub fn new(dt: f64, df_safe: f64, initial_bits: u64) -> Self {
        Self {
            n_trigger: 0,
            n_success: 0,
            max_abs_df: 0.0,
            generated_bits: 0,
            consumed_bits: 0,
            initial_bits,
            violation_ticks: 0,
            dt,
            df_safe,
        }
    }

    pub fn record_frequency(&mut self, max_abs_df: f64) {
        self.max_abs_df = self.max_abs_df.max(max_abs_df);
        if max_abs_df > self.df_safe {
            self.violation_ticks += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Task success rate; `None` when no task triggered.
    pub p_succ: Option<f64>,
    pub df_max: f64,
    /// Consumed over available key bits; `None` when nothing was available.
    pub eta_util: Option<f64>,
    /// Seconds spent outside the safe frequency band.
    pub trr: f64,
}

/// Key utilization uses the bits that were available to spend, the
/// pre-loaded inventory plus fresh generation, as its denominator.
pub fn finalize_metrics(acc: &MetricsAccumulator) -> Metrics {
    let p_succ = (acc.n_trigger > 0).then(|| acc.n_success as f64 / acc.n_trigger as f64);
    let available = acc.initial_bits + acc.generated_bits;
    let eta_util = (available > 0).then(|| acc.consumed_bits as f64 / available as f64);
    Metrics {
        p_succ,
        df_max: acc.max_abs_df,
        eta_util,
        trr: acc.violation_ticks as f64 * acc.dt,
    }
}
