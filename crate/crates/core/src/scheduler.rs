//! Rolling-horizon chain scheduling under a chance-constrained key budget:
//! deterministic budget reformulation, schedule evaluation by grid rollout,
//! an exhaustive oracle and a depth-first branch-and-bound.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use thiserror::Error;

use crate::chains::{chain_loss, ChainState, ControlChain, LossWeights};
use crate::forecast::standard_normal;
use crate::grid::{control_input_map, ChainActuation, GridHistory, GridModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("enumeration of {count} candidates exceeds the cap of {cap}; use branch-and-bound")]
    CapExceeded { count: f64, cap: u64 },
    #[error("malformed problem: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskModel {
    /// Normal posterior on the inventory forecast.
    #[default]
    Gaussian,
    /// Distribution-free one-sided Chebyshev (Cantelli) bound.
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub epsilon: f64,
    /// η_buf (bits).
    pub eta_buf: f64,
    #[serde(default)]
    pub model: RiskModel,
}

impl RiskConfig {
    /// Safety factor multiplying σ_K.
    pub fn z(&self) -> f64 {
        risk_quantile(self.epsilon, self.model)
    }
}

/// Gaussian: `z = Φ⁻¹(1 − ε/2)`; Chebyshev: `√((1 − ε)/ε)`.
pub fn risk_quantile(epsilon: f64, model: RiskModel) -> f64 {
    match model {
        RiskModel::Gaussian => standard_normal().inverse_cdf(1.0 - epsilon / 2.0),
        RiskModel::Chebyshev => ((1.0 - epsilon) / epsilon).sqrt(),
    }
}

/// Largest consumption rate (bits/s) that keeps the inventory above the
/// buffer with probability `1 − ε`: `(K̂ − η_buf − z·σ_K)/dt`, floored at 0.
pub fn deterministic_budget(k_hat: f64, sigma_k: f64, epsilon: f64, eta_buf: f64, dt: f64) -> f64 {
    deterministic_budget_with(k_hat, sigma_k, eta_buf, dt, risk_quantile(epsilon, RiskModel::Gaussian))
}

pub fn deterministic_budget_with(k_hat: f64, sigma_k: f64, eta_buf: f64, dt: f64, z: f64) -> f64 {
    debug_assert!(sigma_k >= 0.0 && dt > 0.0);
    ((k_hat - eta_buf - z * sigma_k) / dt).max(0.0)
}

/// Grid snapshot the rollout starts from.
#[derive(Debug, Clone)]
pub struct GridContext {
    pub model: Arc<GridModel>,
    pub history: GridHistory,
    /// Disturbance per tick in state coordinates, held over the horizon.
    pub disturbance: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proximal {
    /// Reference schedule, step-major over all chains.
    pub reference: Vec<ChainState>,
    pub rho: f64,
}

#[derive(Debug, Clone)]
pub struct ScheduleProblem {
    pub chains: Vec<ControlChain>,
    /// Indices of the chains being decided; the rest follow `fixed`.
    pub free: Vec<usize>,
    pub horizon: usize,
    /// Length of one scheduler step (s).
    pub step_dt: f64,
    pub ticks_per_step: usize,
    /// States applied just before the horizon starts.
    pub initial: Vec<ChainState>,
    /// Step-major states for every chain; entries of free chains are ignored.
    pub fixed: Vec<ChainState>,
    /// Per step: inventory forecast at the start of the step assuming no
    /// consumption, and its standard deviation (bits).
    pub forecast: Vec<(f64, f64)>,
    /// Per step: consumption (bits/s) claimed outside the listed chains.
    pub reserved: Vec<f64>,
    /// Chains whose draw is covered by `reserved` instead of their state.
    pub budget_exempt: Vec<bool>,
    pub risk: RiskConfig,
    pub weights: LossWeights,
    pub lambda_freq: f64,
    /// Chains and areas whose losses enter the objective.
    pub loss_chains: Vec<bool>,
    pub loss_areas: Vec<bool>,
    pub grid: GridContext,
    /// Whether the current link latency is within each chain's τ_ℓ.
    pub latency_ok: Vec<bool>,
    pub proximal: Option<Proximal>,
    pub enumeration_cap: u64,
    pub node_budget: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Certificate {
    Optimal,
    BestFound,
    Infeasible,
}

/// Cost of one horizon step, split by source.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepCost {
    pub grid: f64,
    pub freq: f64,
    pub task: f64,
    pub switching: f64,
    pub proximal: f64,
}

impl StepCost {
    pub fn total(&self) -> f64 {
        self.grid + self.freq + self.task + self.switching + self.proximal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub objective: f64,
    pub feasible: bool,
    pub steps: Vec<StepCost>,
    /// Per step `(budget − consumption)·step_dt` (bits).
    pub margins: Vec<f64>,
    /// Per step counted consumption (bits/s).
    pub consumption: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDecision {
    /// Step-major states for every chain.
    pub states: Vec<ChainState>,
    pub objective: f64,
    pub margins: Vec<f64>,
    pub certificate: Certificate,
    pub nodes: u64,
    pub leaves: u64,
}

impl ScheduleDecision {
    pub fn step(&self, t: usize, n_chains: usize) -> &[ChainState] {
        &self.states[t * n_chains..(t + 1) * n_chains]
    }
}

impl ScheduleProblem {
    pub fn n(&self) -> usize {
        self.chains.len()
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let n = self.n();
        let h = self.horizon;
        let bad = |m: &str| Err(ScheduleError::Malformed(m.to_string()));
        if h == 0 {
            return bad("horizon must be >= 1");
        }
        if !(self.risk.epsilon > 0.0 && self.risk.epsilon < 0.5) || !(self.risk.eta_buf >= 0.0) {
            return bad("risk requires 0 < epsilon < 0.5 and eta_buf >= 0");
        }
        if !(self.step_dt > 0.0) || self.ticks_per_step == 0 {
            return bad("step length must be positive");
        }
        if self.initial.len() != n
            || self.fixed.len() != n * h
            || self.forecast.len() != h
            || self.reserved.len() != h
            || self.budget_exempt.len() != n
            || self.loss_chains.len() != n
            || self.latency_ok.len() != n
            || self.loss_areas.len() != self.grid.model.layout.areas
        {
            return bad("per-chain or per-step vectors have the wrong length");
        }
        if self.free.iter().any(|&i| i >= n) {
            return bad("free index out of range");
        }
        let mut sorted = self.free.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.free.len() {
            return bad("duplicate free index");
        }
        if let Some(p) = &self.proximal {
            if p.reference.len() != n * h || !(p.rho >= 0.0) {
                return bad("proximal reference must cover the horizon and rho >= 0");
            }
        }
        Ok(())
    }

    /// Admissible state range of a chain: mandatory chains stay on, chains
    /// whose latency bound is violated must be off. `lo > hi` means empty.
    pub fn domain(&self, chain: usize) -> (ChainState, ChainState) {
        let lo = if self.chains[chain].mandatory {
            ChainState::Degraded
        } else {
            ChainState::Off
        };
        let hi = if self.latency_ok[chain] {
            ChainState::Full
        } else {
            ChainState::Off
        };
        (lo, hi)
    }

    fn z(&self) -> f64 {
        self.risk.z()
    }

    fn budget_at(&self, t: usize, spent_bits: f64, z: f64) -> f64 {
        let (k, sigma) = self.forecast[t];
        deterministic_budget_with(k - spent_bits, sigma, self.risk.eta_buf, self.step_dt, z)
    }

    fn counted_rate(&self, chain: usize, s: ChainState) -> f64 {
        if self.budget_exempt[chain] {
            0.0
        } else {
            self.chains[chain].rate(s)
        }
    }

    fn actuations(&self, states: &[ChainState]) -> Vec<ChainActuation> {
        states
            .iter()
            .zip(&self.chains)
            .map(|(&s, c)| ChainActuation {
                law: c.law,
                state: s as u8,
                degraded_lag: c.degraded_lag,
            })
            .collect()
    }

    /// Advance the grid over one step under `states` and return the grid
    /// and frequency cost terms at the end of the step.
    fn roll_step(&self, states: &[ChainState], hist: &mut GridHistory) -> (f64, f64) {
        let model = &self.grid.model;
        let acts = self.actuations(states);
        let mut x = hist.lagged(0).clone();
        for _ in 0..self.ticks_per_step {
            let u = control_input_map(&acts, hist, &model.layout);
            let mut next = &model.a * &x;
            next.gemv(1.0, &model.b, &u, 1.0);
            next += &self.grid.disturbance;
            x = next;
            hist.push_vec(&x);
        }
        let layout = &model.layout;
        let mut abs_f = 0.0;
        let mut sq_f = 0.0;
        for a in 0..layout.areas {
            if self.loss_areas[a] {
                let v = x[layout.df_index(a)];
                abs_f += v.abs();
                sq_f += v * v;
            }
        }
        let abs_v: f64 = (0..layout.nodes).map(|m| x[layout.dv_index(m)].abs()).sum();
        (
            self.weights.w_f * abs_f + self.weights.w_v * abs_v,
            self.lambda_freq * sq_f,
        )
    }

    fn chain_terms(&self, t: usize, chain: usize, now: ChainState, prev: ChainState) -> (f64, f64, f64) {
        let (task, sw) = if self.loss_chains[chain] {
            chain_loss(now, prev, &self.chains[chain], &self.weights)
        } else {
            (0.0, 0.0)
        };
        let prox = match &self.proximal {
            Some(p) if self.free.contains(&chain) && p.reference[t * self.n() + chain] != now => p.rho,
            _ => 0.0,
        };
        (task, sw, prox)
    }

    /// Merge free-chain choices into the fixed schedule.
    pub fn compose(&self, free_states: &[ChainState]) -> Vec<ChainState> {
        let n = self.n();
        let f = self.free.len();
        let mut out = self.fixed.clone();
        for t in 0..self.horizon {
            for (j, &c) in self.free.iter().enumerate() {
                out[t * n + c] = free_states[t * f + j];
            }
        }
        out
    }
}

/// Roll the grid forward under a full step-major schedule, accumulating the
/// objective and checking the budget at every step.
pub fn evaluate_schedule(problem: &ScheduleProblem, states: &[ChainState]) -> Evaluation {
    let n = problem.n();
    let h = problem.horizon;
    assert_eq!(states.len(), n * h, "schedule has the wrong size");
    let z = problem.z();
    let mut hist = problem.grid.history.clone();
    let mut steps = Vec::with_capacity(h);
    let mut margins = Vec::with_capacity(h);
    let mut consumption = Vec::with_capacity(h);
    let mut feasible = true;
    let mut spent = 0.0;
    let mut objective = 0.0;
    for t in 0..h {
        let now = &states[t * n..(t + 1) * n];
        let prev = if t == 0 {
            &problem.initial[..]
        } else {
            &states[(t - 1) * n..t * n]
        };
        let mut cost = StepCost::default();
        let mut cons = problem.reserved[t];
        for c in 0..n {
            let (lo, hi) = problem.domain(c);
            if problem.free.contains(&c) && (now[c] < lo || now[c] > hi) {
                feasible = false;
            }
            cons += problem.counted_rate(c, now[c]);
            let (task, sw, prox) = problem.chain_terms(t, c, now[c], prev[c]);
            cost.task += task;
            cost.switching += sw;
            cost.proximal += prox;
        }
        let (g, f) = problem.roll_step(now, &mut hist);
        cost.grid = g;
        cost.freq = f;
        let budget = problem.budget_at(t, spent, z);
        if cons > budget {
            feasible = false;
        }
        margins.push((budget - cons) * problem.step_dt);
        consumption.push(cons);
        spent += cons * problem.step_dt;
        objective += cost.total();
        steps.push(cost);
    }
    Evaluation {
        objective,
        feasible,
        steps,
        margins,
        consumption,
    }
}

fn cap_check(problem: &ScheduleProblem) -> Result<(), ScheduleError> {
    let count = 3f64.powi((problem.free.len() * problem.horizon) as i32);
    if count > problem.enumeration_cap as f64 {
        return Err(ScheduleError::CapExceeded {
            count,
            cap: problem.enumeration_cap,
        });
    }
    Ok(())
}

/// Global optimum by complete enumeration. Among equal objectives the
/// lexicographically larger free-state vector (step-major) wins.
pub fn solve_exhaustive(problem: &ScheduleProblem) -> Result<ScheduleDecision, ScheduleError> {
    problem.validate()?;
    cap_check(problem)?;
    let vars = problem.free.len() * problem.horizon;
    let f = problem.free.len();
    let mut digits = vec![ChainState::Off; vars];
    let mut best: Option<(f64, Vec<ChainState>, Evaluation)> = None;
    let mut leaves = 0u64;
    loop {
        let in_domain = digits.iter().enumerate().all(|(v, &s)| {
            let (lo, hi) = problem.domain(problem.free[v % f.max(1)]);
            lo <= s && s <= hi
        });
        if in_domain {
            leaves += 1;
            let full = problem.compose(&digits);
            let ev = evaluate_schedule(problem, &full);
            if ev.feasible {
                let better = match &best {
                    None => true,
                    Some((obj, sched, _)) => {
                        ev.objective < *obj || (ev.objective == *obj && digits > *sched)
                    }
                };
                if better {
                    best = Some((ev.objective, digits.clone(), ev));
                }
            }
        }
        // odometer increment, last variable fastest
        let mut v = vars;
        loop {
            if v == 0 {
                return Ok(finish(problem, best, Certificate::Optimal, leaves, leaves));
            }
            v -= 1;
            match digits[v] {
                ChainState::Off => {
                    digits[v] = ChainState::Degraded;
                    break;
                }
                ChainState::Degraded => {
                    digits[v] = ChainState::Full;
                    break;
                }
                ChainState::Full => digits[v] = ChainState::Off,
            }
        }
    }
}

fn finish(
    problem: &ScheduleProblem,
    best: Option<(f64, Vec<ChainState>, Evaluation)>,
    complete: Certificate,
    nodes: u64,
    leaves: u64,
) -> ScheduleDecision {
    match best {
        Some((objective, free_states, ev)) => ScheduleDecision {
            states: problem.compose(&free_states),
            objective,
            margins: ev.margins,
            certificate: complete,
            nodes,
            leaves,
        },
        None => {
            let fallback: Vec<ChainState> = problem
                .free
                .iter()
                .map(|&c| problem.domain(c).0)
                .collect::<Vec<_>>()
                .repeat(problem.horizon);
            let ev = evaluate_schedule(problem, &problem.compose(&fallback));
            ScheduleDecision {
                states: problem.compose(&fallback),
                objective: f64::INFINITY,
                margins: ev.margins,
                certificate: Certificate::Infeasible,
                nodes,
                leaves,
            }
        }
    }
}

/// Depth-first branch-and-bound over step-major (step, free chain)
/// assignments. Values are tried from most to least secure, so the first
/// minimizer reached is the lexicographically largest one.
pub fn solve_bnb(problem: &ScheduleProblem) -> Result<ScheduleDecision, ScheduleError> {
    problem.validate()?;
    let mut search = Search::new(problem);
    search.seed_greedy();
    if search.nodes < problem.node_budget {
        let hist = problem.grid.history.clone();
        let mut cur = vec![ChainState::Off; problem.free.len() * problem.horizon];
        search.dfs(0, &mut cur, 0.0, 0.0, 0.0, hist);
    } else {
        search.exhausted = true;
    }
    let cert = if search.exhausted {
        Certificate::BestFound
    } else {
        Certificate::Optimal
    };
    let (nodes, leaves) = (search.nodes, search.leaves);
    Ok(finish(problem, search.best, cert, nodes, leaves))
}

struct Search<'a> {
    p: &'a ScheduleProblem,
    z: f64,
    best: Option<(f64, Vec<ChainState>, Evaluation)>,
    nodes: u64,
    leaves: u64,
    exhausted: bool,
    domains: Vec<(ChainState, ChainState)>,
    /// Per step: counted draw of non-free chains plus reservations.
    base: Vec<f64>,
    /// Draw of every free chain at its domain minimum.
    min_free: f64,
}

impl<'a> Search<'a> {
    fn new(p: &'a ScheduleProblem) -> Self {
        let n = p.n();
        let domains: Vec<_> = p.free.iter().map(|&c| p.domain(c)).collect();
        let base = (0..p.horizon)
            .map(|t| {
                p.reserved[t]
                    + (0..n)
                        .filter(|c| !p.free.contains(c))
                        .map(|c| p.counted_rate(c, p.fixed[t * n + c]))
                        .sum::<f64>()
            })
            .collect();
        let min_free = p
            .free
            .iter()
            .zip(&domains)
            .map(|(&c, d)| p.counted_rate(c, d.0))
            .sum();
        Self {
            p,
            z: p.z(),
            best: None,
            nodes: 0,
            leaves: 0,
            exhausted: false,
            domains,
            base,
            min_free,
        }
    }

    fn tol(x: f64) -> f64 {
        1e-9 * (1.0 + x.abs())
    }

    fn offer(&mut self, free_states: &[ChainState]) {
        self.leaves += 1;
        let ev = evaluate_schedule(self.p, &self.p.compose(free_states));
        if !ev.feasible {
            return;
        }
        let better = match &self.best {
            None => true,
            Some((obj, sched, _)) => {
                ev.objective < *obj || (ev.objective == *obj && free_states > sched.as_slice())
            }
        };
        if better {
            self.best = Some((ev.objective, free_states.to_vec(), ev));
        }
    }

    /// Step by step, each chain takes the most secure state that still
    /// leaves room for the others at their minimum.
    fn seed_greedy(&mut self) {
        let p = self.p;
        let f = p.free.len();
        if self.domains.iter().any(|(lo, hi)| lo > hi) {
            return;
        }
        let mut cur = vec![ChainState::Off; f * p.horizon];
        let mut spent = 0.0;
        for t in 0..p.horizon {
            let budget = p.budget_at(t, spent, self.z);
            let mut partial = self.base[t] + self.min_free;
            for (j, &c) in p.free.iter().enumerate() {
                let (lo, hi) = self.domains[j];
                let floor = p.counted_rate(c, lo);
                let mut pick = lo;
                for s in ChainState::ALL.iter().rev().copied() {
                    if s < lo || s > hi {
                        continue;
                    }
                    if partial - floor + p.counted_rate(c, s) <= budget || s == lo {
                        pick = s;
                        break;
                    }
                }
                partial += p.counted_rate(c, pick) - floor;
                cur[t * f + j] = pick;
            }
            spent += partial * p.step_dt;
        }
        self.nodes += 1;
        self.offer(&cur);
    }

    fn incumbent(&self) -> f64 {
        self.best.as_ref().map_or(f64::INFINITY, |b| b.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        &mut self,
        v: usize,
        cur: &mut Vec<ChainState>,
        cost: f64,
        partial: f64,
        spent: f64,
        hist: GridHistory,
    ) {
        let p = self.p;
        let f = p.free.len();
        let n = p.n();
        if v == f * p.horizon {
            if f == 0 {
                self.nodes += 1;
            }
            self.offer(cur);
            return;
        }
        let t = v / f;
        let j = v % f;
        let chain = p.free[j];
        let (lo, hi) = self.domains[j];
        if lo > hi {
            return;
        }
        let partial = if j == 0 { self.base[t] + self.min_free } else { partial };
        let budget = p.budget_at(t, spent, self.z);
        let prev = if t == 0 {
            p.initial[chain]
        } else {
            cur[(t - 1) * f + j]
        };
        for s in ChainState::ALL.iter().rev().copied() {
            if s < lo || s > hi {
                continue;
            }
            if self.nodes >= p.node_budget {
                self.exhausted = true;
                return;
            }
            self.nodes += 1;
            let part = partial - p.counted_rate(chain, lo) + p.counted_rate(chain, s);
            if part > budget + Self::tol(budget) {
                continue;
            }
            let (task, sw, prox) = p.chain_terms(t, chain, s, prev);
            let mut c = cost + task + sw + prox;
            if c > self.incumbent() + Self::tol(self.incumbent()) {
                continue;
            }
            cur[v] = s;
            if j + 1 == f {
                // step complete: fixed chains' terms and the grid response
                let mut step_states = p.fixed[t * n..(t + 1) * n].to_vec();
                for (jj, &cc) in p.free.iter().enumerate() {
                    step_states[cc] = cur[t * f + jj];
                }
                for cc in (0..n).filter(|cc| !p.free.contains(cc)) {
                    let prev_cc = if t == 0 {
                        p.initial[cc]
                    } else {
                        p.fixed[(t - 1) * n + cc]
                    };
                    let (task, sw, prox) = p.chain_terms(t, cc, step_states[cc], prev_cc);
                    c += task + sw + prox;
                }
                let mut h2 = hist.clone();
                let (g, fr) = p.roll_step(&step_states, &mut h2);
                c += g + fr;
                if c > self.incumbent() + Self::tol(self.incumbent()) {
                    continue;
                }
                self.dfs(v + 1, cur, c, 0.0, spent + part * p.step_dt, h2);
            } else {
                self.dfs(v + 1, cur, c, part, spent, hist.clone());
            }
            if self.exhausted {
                return;
            }
        }
    }
}
