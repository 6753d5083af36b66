//! One simulation run: world state and the fixed-order tick.

use std::sync::Arc;

use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chains::{ChainState, ControlChain, Owner};
use crate::forecast::{KeyForecaster, MeanReversion, ObservationVector, StateEstimate};
use crate::game::{ld_cp_solve, BiLevelProblem, GameError};
use crate::grid::{
    control_input_map, finalize_metrics, step_grid, ChainActuation, DisturbanceProfile,
    GridHistory, GridModel, GridState, MetricsAccumulator,
};
use crate::keypool::{classify_zone, poisson_count, CryptoMode, Debit, KeyPool, PoolConfig};
use crate::protocol::asdu::{type_id, AsduMessage, COT_ACTIVATION, MIN_ASDU_LEN};
use crate::protocol::frame::{key_bytes_needed, KeyLookup};
use crate::protocol::keyserver::{KeyServerCore, KEY_BLOCK_BYTES};
use crate::protocol::transport::{self, Datagram};
use crate::protocol::{decode_frame, encode_frame, inject_latency, KeyRing, Latency, Q3pMode};
use crate::qlink::{LinkState, QkdLink};
use crate::scheduler::{solve_bnb, Certificate, GridContext, ScheduleError, ScheduleProblem};

use super::scenario::{Policy, Scenario, SchedulerConfig};
use super::trace::{realized_fairness, Trace, TraceHeader, TraceMetrics, TraceRow};
use super::EngineError;

const TASK_STREAM: u64 = 3;
const LATENCY_STREAM: u64 = 4;
/// Offset separating synthesized key material from the simulation streams.
const KEY_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
/// Time bins of the per-run forecast-uncertainty profile.
pub const SIGMA_BINS: usize = 20;

/// One LD-CP solve inside a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub tick: u64,
    pub iterations: usize,
    pub converged: bool,
    pub planned_fairness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: TraceMetrics,
    pub decisions: u64,
    /// Decisions where no schedule met the budget and the fallback applied.
    pub infeasible_decisions: u64,
    pub refusals: u64,
    pub outages: u64,
    /// Mean forecast σ_K per time bin.
    pub sigma_profile: Vec<f64>,
    pub game: Vec<GameRecord>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub summary: RunSummary,
}

/// A key pool with its key server view and forecaster.
struct Side {
    server: KeyServerCore,
    forecaster: KeyForecaster,
    /// Fraction of link generation routed to this pool.
    share: f64,
    consumed_last: u64,
}

pub struct World<'a> {
    sc: &'a Scenario,
    chains: Vec<ControlChain>,
    model: Arc<GridModel>,
    link: QkdLink,
    sides: Vec<Side>,
    /// Pool index of each chain.
    chain_side: Vec<usize>,
    disturbance: DisturbanceProfile,
    grid: GridState,
    history: GridHistory,
    states: Vec<ChainState>,
    /// Whether each chain's latest message reached the actuator in time.
    delivered: Vec<bool>,
    task_rng: ChaCha8Rng,
    latency_rng: ChaCha8Rng,
    ring: KeyRing,
    channel: Box<dyn Datagram + Send>,
    acc: MetricsAccumulator,
    tick: u64,
    was_broken: bool,
    seq: u32,
    consumed_tso: u64,
    consumed_dso: u64,
    summary: RunSummary,
    sigma_sum: Vec<f64>,
    sigma_n: Vec<u64>,
    pending_events: Vec<String>,
    trace: Trace,
}

fn chain_asdu(chain_index: usize, seq: u32, value: f32, bytes: usize) -> AsduMessage {
    let m = if bytes >= MIN_ASDU_LEN + 8 {
        AsduMessage::setpoint(chain_index as u16, seq & 0x00FF_FFFF, value, bytes)
    } else {
        AsduMessage {
            type_id: type_id::SINGLE_COMMAND,
            cause_of_transmission: COT_ACTIVATION,
            common_address: chain_index as u16,
            info_object: vec![0; bytes - MIN_ASDU_LEN],
        }
    };
    debug_assert_eq!(m.encoded_len(), bytes);
    m
}

fn q3p_mode(mode: CryptoMode) -> Q3pMode {
    match mode {
        CryptoMode::Full => Q3pMode::Otp,
        CryptoMode::Degraded => Q3pMode::Aes,
    }
}

impl<'a> World<'a> {
    pub fn new(sc: &'a Scenario, seed: u64) -> Result<Self, EngineError> {
        sc.validate()?;
        let chains = sc.chains();
        let model = Arc::new(sc.model()?);
        let horizon = sc.ticks() as f64 * sc.dt;
        let link = QkdLink::new(sc.link.clone(), seed, horizon)
            .map_err(|e| EngineError::Validation(format!("link: {e}")))?;
        let disturbance = DisturbanceProfile::generate(&sc.disturbance, &model.layout, horizon, seed)
            .map_err(|e| EngineError::Validation(format!("disturbance: {e}")))?;

        let shares: Vec<f64> = match sc.policy {
            Policy::S4 => {
                let q = sc.game.as_ref().expect("validated").quota;
                vec![q, 1.0 - q]
            }
            _ => vec![1.0],
        };
        let chain_side: Vec<usize> = chains
            .iter()
            .map(|c| match (sc.policy, c.owner) {
                (Policy::S4, Owner::Dso) => 1,
                _ => 0,
            })
            .collect();
        let replenished = sc.policy != Policy::S1;
        let mut sides = Vec::with_capacity(shares.len());
        let mut remaining = sc.pool.initial;
        for (i, &share) in shares.iter().enumerate() {
            let scale = |v: u64| (v as f64 * share).round() as u64;
            let initial = if i + 1 == shares.len() {
                remaining
            } else {
                scale(sc.pool.initial)
            };
            remaining -= initial;
            let cfg = if shares.len() == 1 {
                sc.pool
            } else {
                PoolConfig {
                    initial,
                    k_safe: scale(sc.pool.k_safe),
                    k_th: scale(sc.pool.k_th),
                    k_cap: scale(sc.pool.k_cap),
                }
            };
            let pool =
                KeyPool::new(cfg).map_err(|e| EngineError::Validation(format!("pool: {e}")))?;
            let mean = if replenished {
                sc.link.mean_rate * share
            } else {
                0.0
            };
            let q = sc.filter.q();
            let p0 = Matrix2::new(
                q[(0, 0)].max(1.0) * 10.0,
                0.0,
                0.0,
                sc.filter.inventory_noise,
            );
            let forecaster = KeyForecaster::new(
                sc.filter.clone(),
                Box::new(MeanReversion {
                    mean_rate: mean,
                    reversion_rate: sc.link.reversion_rate,
                }),
                StateEstimate::new(mean, cfg.initial as f64, p0),
            )
            .map_err(|e| EngineError::Validation(format!("filter: {e}")))?;
            sides.push(Side {
                server: KeyServerCore::new(pool, seed.wrapping_add(KEY_SEED_SALT).wrapping_add(i as u64)),
                forecaster,
                share,
                consumed_last: 0,
            });
        }

        let max_lag = chains.iter().map(|c| c.degraded_lag).max().unwrap_or(0);
        let grid = model.zero_state();
        let history = GridHistory::new(&grid, max_lag);
        let mut task_rng = ChaCha8Rng::seed_from_u64(seed);
        task_rng.set_stream(TASK_STREAM);
        let mut latency_rng = ChaCha8Rng::seed_from_u64(seed);
        latency_rng.set_stream(LATENCY_STREAM);
        let channel = transport::open(sc.transport)
            .map_err(|e| EngineError::Runtime(format!("transport: {e}")))?;
        let states: Vec<ChainState> = sc.chains.iter().map(|c| c.state).collect();
        let was_broken = link.state().broken;
        let initial_bits = sc.pool.initial;

        let demand = |o: Owner| -> f64 {
            chains.iter().filter(|c| c.owner == o).map(|c| c.demand()).sum::<f64>() + 0.0
        };
        let header = TraceHeader {
            name: sc.name.clone(),
            policy: sc.policy.as_str().to_string(),
            seed,
            dt: sc.dt,
            ticks: sc.ticks(),
            df_safe: sc.df_safe,
            initial_bits,
            demand_tso: demand(Owner::Tso),
            demand_dso: demand(Owner::Dso),
            areas: model.layout.areas,
            chains: chains.iter().map(|c| c.id.clone()).collect(),
        };
        Ok(Self {
            sc,
            delivered: vec![true; chains.len()],
            chains,
            model,
            link,
            sides,
            chain_side,
            disturbance,
            grid,
            history,
            states,
            task_rng,
            latency_rng,
            ring: KeyRing::new(),
            channel,
            acc: MetricsAccumulator::new(sc.dt, sc.df_safe, initial_bits),
            tick: 0,
            was_broken,
            seq: 0,
            consumed_tso: 0,
            consumed_dso: 0,
            summary: RunSummary {
                seed,
                metrics: TraceMetrics {
                    metrics: finalize_metrics(&MetricsAccumulator::new(sc.dt, sc.df_safe, initial_bits)),
                    fairness: None,
                },
                decisions: 0,
                infeasible_decisions: 0,
                refusals: 0,
                outages: 0,
                sigma_profile: Vec::new(),
                game: Vec::new(),
            },
            sigma_sum: vec![0.0; SIGMA_BINS],
            sigma_n: vec![0; SIGMA_BINS],
            pending_events: Vec::new(),
            trace: Trace {
                header: Some(header),
                rows: Vec::new(),
            },
        })
    }

    pub fn states(&self) -> &[ChainState] {
        &self.states
    }

    pub fn pool_levels(&self) -> Vec<u64> {
        self.sides.iter().map(|s| s.server.pool().level()).collect()
    }

    pub fn grid(&self) -> &GridState {
        &self.grid
    }

    fn level(&self) -> u64 {
        self.sides.iter().map(|s| s.server.pool().level()).sum()
    }

    fn zone(&self) -> crate::keypool::Zone {
        let p = &self.sc.pool;
        classify_zone(self.level(), p.k_safe, p.k_th)
    }

    /// Advance one tick through the seven sub-steps.
    pub fn step(&mut self) -> Result<(), EngineError> {
        let dt = self.sc.dt;
        let t0 = self.tick as f64 * dt;
        let t1 = (self.tick + 1) as f64 * dt;
        let mut events = std::mem::take(&mut self.pending_events);

        // (1) link
        let link: LinkState = *self.link.advance(dt);
        if link.broken && !self.was_broken {
            events.push("outage".into());
            self.summary.outages += 1;
        } else if !link.broken && self.was_broken {
            events.push("restore".into());
        }
        self.was_broken = link.broken;

        // (2) generation
        let replenished = self.sc.policy != Policy::S1;
        let mut generated = 0u64;
        for side in &mut self.sides {
            let rate = link.rate * side.share;
            let pool = side.server.pool_mut();
            generated += if replenished {
                pool.step_inventory(rate, dt)
            } else {
                pool.discard_generation(rate, dt)
            };
        }

        // (3) forecast
        for side in &mut self.sides {
            let g = if replenished { link.rate * side.share } else { 0.0 };
            side.forecaster
                .predict(side.consumed_last as f64 / dt, dt);
            side.forecaster
                .observe_rate(&ObservationVector {
                    g,
                    consumption: Vec::new(),
                })
                .map_err(|e| EngineError::Runtime(format!("forecast: {e}")))?;
            side.forecaster
                .observe_inventory(side.server.pool().level() as f64)
                .map_err(|e| EngineError::Runtime(format!("forecast: {e}")))?;
        }

        // (4) policy
        let before = self.states.clone();
        self.decide(&link, t0, &mut events)?;
        for (c, (a, b)) in before.iter().zip(&self.states).enumerate() {
            if a != b {
                events.push(format!("switch:{}:{}>{}", self.chains[c].id, *a as u8, *b as u8));
            }
        }

        // (5) tasks and messages
        let mut triggers = 0u32;
        let mut successes = 0u32;
        let mut refusals = 0u32;
        let mut consumed = 0u64;
        let mut tick_tso = 0u64;
        let mut tick_dso = 0u64;
        for side in &mut self.sides {
            side.consumed_last = 0;
        }
        for c in 0..self.chains.len() {
            let n = poisson_count(self.chains[c].trigger_rate * dt, &mut self.task_rng);
            for _ in 0..n {
                triggers += 1;
                let Some(mode) = self.states[c].mode() else {
                    continue;
                };
                let chain = &self.chains[c];
                let bits = chain.cost(mode);
                let side = &mut self.sides[self.chain_side[c]];
                match side.server.pool_mut().debit(bits).expect("costs are positive") {
                    Debit::Refused { .. } => {
                        refusals += 1;
                        self.delivered[c] = false;
                        events.push(format!("refuse:{}", chain.id));
                        continue;
                    }
                    Debit::Granted { bits } => {
                        consumed += bits;
                        side.consumed_last += bits;
                        match chain.owner {
                            Owner::Tso => tick_tso += bits,
                            Owner::Dso => tick_dso += bits,
                        }
                    }
                }
                let bytes = (chain.message_length / 8) as usize;
                let qmode = q3p_mode(mode);
                let (index, block) = side
                    .server
                    .allocate(key_bytes_needed(qmode, bytes).max(KEY_BLOCK_BYTES));
                self.seq = self.seq.wrapping_add(1);
                let value = chain.law.output(&self.model.layout, self.history.lagged(0)) as f32;
                let asdu = chain_asdu(c, self.seq, value, bytes);
                let frame = encode_frame(&asdu, qmode, &block, index)
                    .map_err(|e| EngineError::Runtime(format!("frame: {e}")))?;
                self.ring.insert(index, block);
                let latency = inject_latency(&self.sc.latency, &link, &mut self.latency_rng);
                let ok = match latency {
                    Latency::Dropped => {
                        self.ring.consume(index);
                        false
                    }
                    Latency::Delivered(_) => {
                        self.channel
                            .send(&frame)
                            .map_err(|e| EngineError::Runtime(format!("transport: {e}")))?;
                        let rx = self
                            .channel
                            .recv()
                            .map_err(|e| EngineError::Runtime(format!("transport: {e}")))?;
                        let decoded = rx.map(|bytes| decode_frame(&bytes, &mut self.ring));
                        if !matches!(decoded, Some(Ok(ref m)) if *m == asdu) {
                            self.ring.consume(index);
                            events.push(format!("reject:{}", chain.id));
                            false
                        } else {
                            latency.within(chain.latency_tolerance)
                        }
                    }
                };
                self.delivered[c] = ok;
                if ok && mode >= chain.required_mode {
                    successes += 1;
                }
            }
        }

        // (6) grid
        let acts: Vec<ChainActuation> = self
            .chains
            .iter()
            .enumerate()
            .map(|(c, ch)| ChainActuation {
                law: ch.law,
                state: if self.delivered[c] {
                    self.states[c] as u8
                } else {
                    0
                },
                degraded_lag: ch.degraded_lag,
            })
            .collect();
        let u = control_input_map(&acts, &self.history, &self.model.layout);
        let d = self
            .model
            .disturbance_to_state(&self.disturbance.load_at(t0));
        self.grid = step_grid(&self.model, &self.grid, &u, &d)
            .map_err(|e| EngineError::Runtime(format!("grid: {e}")))?;
        self.history.push(&self.grid);

        // (7) metrics and trace
        for side in &self.sides {
            let r = side.server.pool().ledger_residual();
            if r != 0 {
                return Err(EngineError::Runtime(format!("ledger residual {r} at tick {}", self.tick)));
            }
        }
        let max_df = self.grid.max_abs_df();
        self.acc.n_trigger += triggers as u64;
        self.acc.n_success += successes as u64;
        self.acc.generated_bits += generated;
        self.acc.consumed_bits += consumed;
        self.acc.record_frequency(max_df);
        self.summary.refusals += refusals as u64;
        self.consumed_tso += tick_tso;
        self.consumed_dso += tick_dso;

        let (k_hat, var_k) = self.sides.iter().fold((0.0, 0.0), |(k, v), s| {
            let e = s.forecaster.estimate();
            (k + e.k, v + e.p[(1, 1)].max(0.0))
        });
        let (ci_lo, ci_hi) = if self.sides.len() == 1 {
            self.sides[0].forecaster.interval()
        } else {
            let z = crate::forecast::z_for_level(self.sc.filter.ci_level);
            ((k_hat - z * var_k.sqrt()).max(0.0), k_hat + z * var_k.sqrt())
        };
        let bin = ((self.tick as usize * SIGMA_BINS) / self.sc.ticks().max(1) as usize).min(SIGMA_BINS - 1);
        self.sigma_sum[bin] += var_k.sqrt();
        self.sigma_n[bin] += 1;

        let row = TraceRow {
            tick: self.tick,
            t: t1,
            k: self.level(),
            k_hat,
            ci_lo,
            ci_hi,
            g: link.rate,
            generated,
            consumed,
            consumed_tso: tick_tso,
            consumed_dso: tick_dso,
            zone: self.zone(),
            states: self.states.iter().map(|s| char::from(b'0' + *s as u8)).collect(),
            triggers,
            successes,
            refusals,
            max_abs_df: max_df,
            df: self.grid.df().to_vec(),
            events,
        };
        self.trace.rows.push(row);
        self.tick += 1;
        Ok(())
    }
}

impl<'a> World<'a> {
    fn sched_cfg(&self) -> &'a SchedulerConfig {
        self.sc.scheduler.as_ref().expect("validated")
    }

    fn decide(&mut self, link: &LinkState, t0: f64, events: &mut Vec<String>) -> Result<(), EngineError> {
        match self.sc.policy {
            Policy::S1 => Ok(()),
            Policy::S2 => {
                let zone = self.zone();
                let keep = self.sc.zones.keep_priority;
                for (c, spec) in self.sc.chains.iter().enumerate() {
                    use crate::keypool::Zone;
                    self.states[c] = match (zone, spec.state) {
                        (Zone::Normal, s) => s,
                        (Zone::Reconfigure, ChainState::Full) if spec.priority >= keep => {
                            ChainState::Full
                        }
                        (_, ChainState::Full) => ChainState::Degraded,
                        (_, s) => s,
                    };
                }
                Ok(())
            }
            Policy::S3 | Policy::S4 | Policy::S5 => {
                let stride = self.sched_cfg().stride as u64;
                // No fresh decision can be distributed while the link is down.
                if self.tick % stride != 0 || link.broken {
                    return Ok(());
                }
                self.summary.decisions += 1;
                match self.sc.policy {
                    Policy::S3 => {
                        let p = self.problem(0, t0);
                        self.solve_and_apply(&p, events)
                    }
                    Policy::S4 => {
                        for side in 0..self.sides.len() {
                            let mut p = self.problem(side, t0);
                            let own: Vec<bool> =
                                self.chain_side.iter().map(|&s| s == side).collect();
                            p.free = (0..own.len()).filter(|&c| own[c]).collect();
                            p.budget_exempt = own.iter().map(|o| !o).collect();
                            p.loss_chains = own;
                            p.loss_areas = self.area_mask(side == 0);
                            self.solve_and_apply(&p, events)?;
                        }
                        Ok(())
                    }
                    _ => self.play_game(t0, events),
                }
            }
        }
    }

    fn area_mask(&self, tso: bool) -> Vec<bool> {
        let g = self.sc.game.as_ref().expect("validated");
        (0..self.model.layout.areas)
            .map(|a| g.tso_areas.contains(&a) == tso)
            .collect()
    }

    /// Scheduling problem over every chain against pool `side`.
    fn problem(&self, side: usize, t0: f64) -> ScheduleProblem {
        let cfg = self.sched_cfg();
        let n = self.chains.len();
        let h = cfg.horizon;
        let step_dt = cfg.stride as f64 * self.sc.dt;
        let f = &self.sides[side].forecaster;
        let est = f.estimate();
        let mut forecast = vec![(est.k, est.std_k())];
        forecast.extend(f.lookahead(0.0, step_dt, h - 1));
        ScheduleProblem {
            chains: self.chains.clone(),
            free: (0..n).collect(),
            horizon: h,
            step_dt,
            ticks_per_step: cfg.stride,
            initial: self.states.clone(),
            fixed: self.states.repeat(h),
            forecast,
            reserved: vec![0.0; h],
            budget_exempt: vec![false; n],
            risk: cfg.risk(),
            weights: cfg.weights,
            lambda_freq: cfg.lambda_freq,
            loss_chains: vec![true; n],
            loss_areas: vec![true; self.model.layout.areas],
            grid: GridContext {
                model: Arc::clone(&self.model),
                history: self.history.clone(),
                disturbance: self
                    .model
                    .disturbance_to_state(&self.disturbance.load_at(t0)),
            },
            latency_ok: self
                .chains
                .iter()
                .map(|c| self.sc.latency.base_latency <= c.latency_tolerance)
                .collect(),
            proximal: None,
            enumeration_cap: cfg.enumeration_cap,
            node_budget: cfg.node_budget,
        }
    }

    /// Lowest admissible state for every free chain.
    fn fallback(&mut self, p: &ScheduleProblem, events: &mut Vec<String>) {
        self.summary.infeasible_decisions += 1;
        events.push("infeasible".into());
        for &c in &p.free {
            let (lo, hi) = p.domain(c);
            self.states[c] = if lo <= hi { lo } else { ChainState::Off };
        }
    }

    fn solve_and_apply(&mut self, p: &ScheduleProblem, events: &mut Vec<String>) -> Result<(), EngineError> {
        let d = solve_bnb(p).map_err(|e: ScheduleError| EngineError::Infeasible(e.to_string()))?;
        if d.certificate == Certificate::Infeasible {
            self.fallback(p, events);
        } else {
            let first = d.step(0, p.n());
            for &c in &p.free {
                self.states[c] = first[c];
            }
        }
        Ok(())
    }

    fn play_game(&mut self, t0: f64, events: &mut Vec<String>) -> Result<(), EngineError> {
        let g = self.sc.game.as_ref().expect("validated");
        let cfg = self.sched_cfg();
        let base = self.problem(0, t0);
        let game = BiLevelProblem {
            leader: self.sc.tso_chains(),
            follower: self.sc.dso_chains(),
            leader_areas: self.area_mask(true),
            follower_areas: self.area_mask(false),
            leader_loss: g.leader_loss,
            follower_loss: g.follower_loss,
            rho: g.rho,
            delta: g.delta,
            max_iterations: g.max_iterations,
            slack_tol: g.slack_tol,
            shadow_step: g.shadow_step,
            enumeration_cap: cfg.enumeration_cap,
            base,
        };
        match ld_cp_solve(&game) {
            Ok(sol) => {
                let n = self.chains.len();
                self.states.copy_from_slice(&sol.schedule[..n]);
                self.summary.game.push(GameRecord {
                    tick: self.tick,
                    iterations: sol.iterations,
                    converged: sol.converged,
                    planned_fairness: sol.fairness,
                });
                Ok(())
            }
            Err(GameError::InfeasibleResidual) => {
                let p = game.base;
                self.fallback(&p, events);
                Ok(())
            }
            Err(e) => Err(EngineError::Infeasible(e.to_string())),
        }
    }

    pub fn run(mut self) -> Result<RunOutput, EngineError> {
        for _ in 0..self.sc.ticks() {
            self.step()?;
        }
        Ok(self.finish())
    }

    fn finish(mut self) -> RunOutput {
        let h = self.trace.header.as_ref().expect("header set");
        let elapsed = self.trace.rows.len() as f64 * self.sc.dt;
        self.summary.metrics = TraceMetrics {
            metrics: finalize_metrics(&self.acc),
            fairness: realized_fairness(
                self.consumed_tso,
                self.consumed_dso,
                h.demand_tso,
                h.demand_dso,
                elapsed,
            ),
        };
        self.summary.sigma_profile = self
            .sigma_sum
            .iter()
            .zip(&self.sigma_n)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect();
        RunOutput {
            trace: self.trace,
            summary: self.summary,
        }
    }
}

/// Validate, build and run one seeded simulation.
pub fn run_scenario(sc: &Scenario, seed: u64) -> Result<RunOutput, EngineError> {
    World::new(sc, seed)?.run()
}
