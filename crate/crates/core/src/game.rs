//! TSO–DSO Stackelberg coordination over a shared key budget: follower best
//! response with shadow prices, active-set extraction and pruning, the
//! level-decomposition outer loop, a brute-force bilevel oracle and the
//! two-player Jain index.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chains::{ChainState, LossWeights};
use crate::scheduler::{
    evaluate_schedule, solve_bnb, Certificate, Proximal, ScheduleError, ScheduleProblem,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("the leader schedule leaves no feasible follower schedule")]
    InfeasibleResidual,
    #[error("leader enumeration of {count} schedules exceeds the cap of {cap}")]
    CapExceeded { count: f64, cap: u64 },
    #[error("malformed game: {0}")]
    Malformed(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Loss configuration of one player.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlayerLoss {
    pub weights: LossWeights,
    pub lambda_freq: f64,
}

#[derive(Debug, Clone)]
pub struct BiLevelProblem {
    /// Shared data: chains, forecast, grid, risk. Its `free`, `fixed`,
    /// scopes, weights and proximal fields are overwritten per subproblem.
    pub base: ScheduleProblem,
    pub leader: Vec<usize>,
    pub follower: Vec<usize>,
    pub leader_areas: Vec<bool>,
    pub follower_areas: Vec<bool>,
    pub leader_loss: PlayerLoss,
    pub follower_loss: PlayerLoss,
    pub rho: f64,
    /// Stop once the leader iterate moves by fewer than `delta` states.
    pub delta: usize,
    pub max_iterations: usize,
    /// A budget step is tight when its margin is at most this many bits.
    pub slack_tol: f64,
    /// Budget perturbation (bits) for finite-difference shadow prices.
    pub shadow_step: f64,
    pub enumeration_cap: u64,
}

/// Tight shared-budget steps paired with a positive multiplier.
pub type ComplementaritySet = BTreeSet<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    /// Step-major states for all chains.
    pub schedule: Vec<ChainState>,
    pub objective: f64,
    /// Shadow price per budget step (loss units per bit); zero when slack.
    pub multipliers: Vec<f64>,
    pub margins: Vec<f64>,
    pub active: ComplementaritySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub leader_objective: f64,
    pub follower_objective: f64,
    pub active_size: usize,
    pub hamming: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSolution {
    /// Step-major states for all chains (leader and follower entries set).
    pub schedule: Vec<ChainState>,
    pub leader_objective: f64,
    pub follower_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Jain index of the planned demand-normalized allocations.
    pub fairness: f64,
    pub trace: Vec<IterationRecord>,
}

impl BiLevelProblem {
    pub fn validate(&self) -> Result<(), GameError> {
        let n = self.base.n();
        let mut seen = vec![false; n];
        for &c in self.leader.iter().chain(&self.follower) {
            if c >= n || seen[c] {
                return Err(GameError::Malformed(
                    "leader and follower chains must partition the chain set".into(),
                ));
            }
            seen[c] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(GameError::Malformed(
                "every chain must belong to a player".into(),
            ));
        }
        if !(self.rho >= 0.0) || self.delta == 0 {
            return Err(GameError::Malformed("rho >= 0 and delta > 0 required".into()));
        }
        if !(self.shadow_step > 0.0) {
            return Err(GameError::Malformed("shadow_step must be positive".into()));
        }
        Ok(())
    }

    fn n(&self) -> usize {
        self.base.n()
    }

    fn scoped(&self, free: &[usize], areas: &[bool], loss: &PlayerLoss) -> ScheduleProblem {
        let mut p = self.base.clone();
        p.free = free.to_vec();
        p.loss_chains = (0..self.n()).map(|c| free.contains(&c)).collect();
        p.loss_areas = areas.to_vec();
        p.weights = loss.weights;
        p.lambda_freq = loss.lambda_freq;
        p.proximal = None;
        p.reserved = vec![0.0; p.horizon];
        p.budget_exempt = vec![false; self.n()];
        p
    }

    /// The follower's own problem with the leader schedule held fixed.
    pub fn follower_problem(&self, leader_schedule: &[ChainState]) -> ScheduleProblem {
        let mut p = self.scoped(&self.follower, &self.follower_areas, &self.follower_loss);
        p.fixed = leader_schedule.to_vec();
        p
    }

    fn leader_view(&self) -> ScheduleProblem {
        self.scoped(&self.leader, &self.leader_areas, &self.leader_loss)
    }

    /// `J^T` of a joint schedule.
    pub fn leader_objective(&self, schedule: &[ChainState]) -> f64 {
        evaluate_schedule(&self.leader_view(), schedule).objective
    }

    /// `J^D` of a joint schedule.
    pub fn follower_objective(&self, schedule: &[ChainState]) -> f64 {
        let p = self.scoped(&self.follower, &self.follower_areas, &self.follower_loss);
        evaluate_schedule(&p, schedule).objective
    }

    /// Follower draw (bits/s) per step with every follower chain at its
    /// lowest admissible state.
    fn follower_floor(&self) -> Vec<f64> {
        let floor: f64 = self
            .follower
            .iter()
            .map(|&c| self.base.chains[c].rate(self.base.domain(c).0))
            .sum();
        vec![floor; self.base.horizon]
    }

    fn follower_draw(&self, schedule: &[ChainState]) -> Vec<f64> {
        let n = self.n();
        (0..self.base.horizon)
            .map(|t| {
                self.follower
                    .iter()
                    .map(|&c| self.base.chains[c].rate(schedule[t * n + c]))
                    .sum()
            })
            .collect()
    }

    /// Planned allocation relative to full-mode demand for each side.
    pub fn planned_fairness(&self, schedule: &[ChainState]) -> f64 {
        let n = self.n();
        let share = |side: &[usize]| {
            let mut got = 0.0;
            let mut want = 0.0;
            for t in 0..self.base.horizon {
                for &c in side {
                    got += self.base.chains[c].rate(schedule[t * n + c]);
                    want += self.base.chains[c].demand();
                }
            }
            if want > 0.0 {
                got / want
            } else {
                1.0
            }
        };
        fairness_index(share(&self.leader), share(&self.follower)).unwrap_or(1.0)
    }
}

/// Optimal follower schedule against a fixed leader schedule, with
/// finite-difference shadow prices of the tight budget steps.
pub fn follower_best_response(
    game: &BiLevelProblem,
    leader_schedule: &[ChainState],
) -> Result<BestResponse, GameError> {
    let p = game.follower_problem(leader_schedule);
    let d = solve_bnb(&p)?;
    if d.certificate == Certificate::Infeasible {
        return Err(GameError::InfeasibleResidual);
    }
    let tight: Vec<usize> = (0..p.horizon)
        .filter(|&t| d.margins[t] <= game.slack_tol)
        .collect();
    let mut multipliers = vec![0.0; p.horizon];
    for &t in &tight {
        let mut relaxed = p.clone();
        relaxed.forecast[t].0 += game.shadow_step;
        let r = solve_bnb(&relaxed)?;
        multipliers[t] = ((d.objective - r.objective) / game.shadow_step).max(0.0);
    }
    Ok(BestResponse {
        schedule: d.states,
        objective: d.objective,
        multipliers,
        margins: d.margins,
        active: tight.into_iter().collect(),
    })
}

/// Keep only pairs that are still tight with a positive multiplier.
pub fn prune_active_set(
    active: &ComplementaritySet,
    response: &BestResponse,
    slack_tol: f64,
) -> ComplementaritySet {
    active
        .iter()
        .copied()
        .filter(|&t| {
            t < response.margins.len()
                && response.margins[t] <= slack_tol
                && response.multipliers[t] > 0.0
        })
        .collect()
}

/// Leader step: on steps in the active set the follower keeps its current
/// draw; elsewhere the follower is assumed to yield down to its floor. The
/// objective carries `ρ` per leader state that differs from `leader_prev`.
pub fn leader_update(
    game: &BiLevelProblem,
    leader_prev: &[ChainState],
    active: &ComplementaritySet,
    response: &BestResponse,
) -> Result<Vec<ChainState>, GameError> {
    let mut p = game.leader_view();
    p.fixed = response.schedule.clone();
    for &c in &game.follower {
        p.budget_exempt[c] = true;
    }
    let draw = game.follower_draw(&response.schedule);
    let floor = game.follower_floor();
    p.reserved = (0..p.horizon)
        .map(|t| if active.contains(&t) { draw[t] } else { floor[t] })
        .collect();
    if game.rho > 0.0 {
        p.proximal = Some(Proximal {
            reference: leader_prev.to_vec(),
            rho: game.rho,
        });
    }
    let d = solve_bnb(&p)?;
    let n = game.n();
    let mut out = leader_prev.to_vec();
    if d.certificate != Certificate::Infeasible {
        for t in 0..p.horizon {
            for &c in &game.leader {
                out[t * n + c] = d.states[t * n + c];
            }
        }
    }
    Ok(out)
}

fn hamming(a: &[ChainState], b: &[ChainState], idx: &[usize], n: usize) -> usize {
    (0..a.len() / n.max(1))
        .map(|t| idx.iter().filter(|&&c| a[t * n + c] != b[t * n + c]).count())
        .sum()
}

fn leader_key(s: &[ChainState], leader: &[usize], n: usize) -> Vec<ChainState> {
    (0..s.len() / n.max(1))
        .flat_map(|t| leader.iter().map(move |&c| s[t * n + c]))
        .collect()
}

/// Level decomposition with complementarity pruning. Returns the best
/// leader iterate seen (by true leader objective) paired with the follower's
/// best response to it.
pub fn ld_cp_solve(game: &BiLevelProblem) -> Result<GameSolution, GameError> {
    game.validate()?;
    game.base.validate()?;
    let n = game.n();

    // Opening move: leader optimum assuming the follower sits at its floor.
    let floor_states: Vec<ChainState> = {
        let mut s = game.base.fixed.clone();
        for t in 0..game.base.horizon {
            for &c in &game.follower {
                s[t * n + c] = game.base.domain(c).0;
            }
        }
        s
    };
    let opening = BestResponse {
        margins: vec![f64::INFINITY; game.base.horizon],
        multipliers: vec![0.0; game.base.horizon],
        active: ComplementaritySet::new(),
        objective: 0.0,
        schedule: floor_states.clone(),
    };
    let unregularized = BiLevelProblem {
        rho: 0.0,
        ..game.clone()
    };
    let mut leader = leader_update(&unregularized, &floor_states, &opening.active, &opening)?;

    let mut active = ComplementaritySet::new();
    let mut best: Option<(f64, Vec<ChainState>, BestResponse)> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let consider = |leader: &[ChainState], br: &BestResponse, best: &mut Option<(f64, Vec<ChainState>, BestResponse)>| {
        let jt = game.leader_objective(&br.schedule);
        let better = match best {
            None => true,
            Some((obj, sched, _)) => {
                jt < *obj
                    || (jt == *obj
                        && leader_key(leader, &game.leader, n) > leader_key(sched, &game.leader, n))
            }
        };
        if better {
            *best = Some((jt, leader.to_vec(), br.clone()));
        }
        jt
    };

    while iterations < game.max_iterations {
        let br = follower_best_response(game, &leader)?;
        let jt = consider(&leader, &br, &mut best);
        let extracted: ComplementaritySet = br.active.clone();
        let candidates: ComplementaritySet = active.union(&extracted).copied().collect();
        active = prune_active_set(&candidates, &br, game.slack_tol);
        let next = leader_update(game, &leader, &active, &br)?;
        let step = hamming(&next, &leader, &game.leader, n);
        iterations += 1;
        trace.push(IterationRecord {
            iteration: iterations,
            leader_objective: jt,
            follower_objective: br.objective,
            active_size: active.len(),
            hamming: step,
        });
        leader = next;
        if step < game.delta {
            converged = true;
            break;
        }
    }
    if !converged {
        if let Ok(br) = follower_best_response(game, &leader) {
            consider(&leader, &br, &mut best);
        }
    }
    let (leader_objective, _, br) = best.ok_or(GameError::InfeasibleResidual)?;

    // best-response certificate
    let check = solve_bnb(&game.follower_problem(&br.schedule))?;
    debug_assert!((check.objective - br.objective).abs() <= 1e-9 * (1.0 + br.objective.abs()));

    Ok(GameSolution {
        fairness: game.planned_fairness(&br.schedule),
        follower_objective: br.objective,
        schedule: br.schedule,
        leader_objective,
        iterations,
        converged,
        trace,
    })
}

/// Enumerates every leader schedule against the follower's exact best
/// response. Follower ties go against the leader, then to the
/// lexicographically larger follower schedule; leader ties to the
/// lexicographically larger leader schedule.
pub fn bilevel_oracle(game: &BiLevelProblem) -> Result<GameSolution, GameError> {
    game.validate()?;
    game.base.validate()?;
    let n = game.n();
    let h = game.base.horizon;
    let lv = game.leader.len() * h;
    let fv = game.follower.len() * h;
    let count = 3f64.powi(lv as i32);
    if count > game.enumeration_cap as f64 || 3f64.powi(fv as i32) > game.enumeration_cap as f64 {
        return Err(GameError::CapExceeded {
            count,
            cap: game.enumeration_cap,
        });
    }
    let leader_view = game.leader_view();
    let mut best: Option<(f64, Vec<ChainState>, Vec<ChainState>, f64)> = None;
    for lcode in 0..3usize.pow(lv as u32) {
        let lstates = decode(lcode, lv);
        if !in_domain(&game.base, &game.leader, &lstates) {
            continue;
        }
        let mut joint = game.base.fixed.clone();
        scatter(&mut joint, &game.leader, &lstates, n);
        let fp = game.follower_problem(&joint);
        // follower: minimum objective, then worst for the leader, then lexicographic
        let mut resp: Option<(f64, f64, Vec<ChainState>, Vec<ChainState>)> = None;
        for fcode in 0..3usize.pow(fv as u32) {
            let fstates = decode(fcode, fv);
            if !in_domain(&game.base, &game.follower, &fstates) {
                continue;
            }
            let mut cand = joint.clone();
            scatter(&mut cand, &game.follower, &fstates, n);
            let ev = evaluate_schedule(&fp, &cand);
            if !ev.feasible {
                continue;
            }
            let jt = evaluate_schedule(&leader_view, &cand).objective;
            let better = match &resp {
                None => true,
                Some((fo, lo, fs, _)) => {
                    ev.objective < *fo
                        || (ev.objective == *fo && (jt > *lo || (jt == *lo && fstates > *fs)))
                }
            };
            if better {
                resp = Some((ev.objective, jt, fstates, cand));
            }
        }
        let Some((fo, jt, _, cand)) = resp else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((bo, bl, _, _)) => jt < *bo || (jt == *bo && lstates > *bl),
        };
        if better {
            best = Some((jt, lstates, cand, fo));
        }
    }
    let (leader_objective, _, schedule, follower_objective) =
        best.ok_or(GameError::InfeasibleResidual)?;
    Ok(GameSolution {
        fairness: game.planned_fairness(&schedule),
        schedule,
        leader_objective,
        follower_objective,
        iterations: 0,
        converged: true,
        trace: Vec::new(),
    })
}

/// Step-major digits, most significant first, so ascending codes are
/// ascending in lexicographic order.
fn decode(mut code: usize, len: usize) -> Vec<ChainState> {
    let mut out = vec![ChainState::Off; len];
    for v in (0..len).rev() {
        out[v] = ChainState::from_u8((code % 3) as u8).expect("digit < 3");
        code /= 3;
    }
    out
}

fn in_domain(p: &ScheduleProblem, side: &[usize], states: &[ChainState]) -> bool {
    let k = side.len().max(1);
    states.iter().enumerate().all(|(v, &s)| {
        let (lo, hi) = p.domain(side[v % k]);
        lo <= s && s <= hi
    })
}

fn scatter(joint: &mut [ChainState], side: &[usize], states: &[ChainState], n: usize) {
    let k = side.len();
    for (v, &s) in states.iter().enumerate() {
        joint[(v / k) * n + side[v % k]] = s;
    }
}

/// Two-player Jain index `(a + b)² / (2(a² + b²))`.
pub fn fairness_index(a: f64, b: f64) -> Option<f64> {
    if !(a >= 0.0 && b >= 0.0) || (a == 0.0 && b == 0.0) {
        return None;
    }
    Some((a + b).powi(2) / (2.0 * (a * a + b * b)))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::chains::Owner;
    use crate::scheduler::tests::{problem, test_chain};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_game(rng: &mut ChaCha8Rng) -> BiLevelProblem {
        let nl = rng.gen_range(1..=2);
        let nf = rng.gen_range(1..=2);
        let h = rng.gen_range(1..=2);
        let mut chains = Vec::new();
        for i in 0..nl + nf {
            let owner = if i < nl { Owner::Tso } else { Owner::Dso };
            let mut c = test_chain(i, owner, if i < nl { 0 } else { 1 });
            c.message_length = rng.gen_range(200..1000);
            c.cost_full = c.message_length;
            c.trigger_rate = rng.gen_range(0.3..2.5);
            c.priority_weight = rng.gen_range(0.3..2.0);
            c.reconfig_cost = rng.gen_range(0.0..0.4);
            chains.push(c);
        }
        let mut base = problem(chains, h, 0.0);
        for t in 0..h {
            base.forecast[t] = (rng.gen_range(200.0..2500.0), rng.gen_range(0.0..100.0));
        }
        base.grid.disturbance[0] = rng.gen_range(-0.01..0.01);
        base.grid.disturbance[1] = rng.gen_range(-0.01..0.01);
        let loss = |w: f64| PlayerLoss {
            weights: LossWeights {
                w_f: w,
                w_v: 0.0,
                xi_drop: 1.0,
                xi_deg: 0.4,
            },
            lambda_freq: 20.0,
        };
        BiLevelProblem {
            leader: (0..nl).collect(),
            follower: (nl..nl + nf).collect(),
            leader_areas: vec![true, false],
            follower_areas: vec![false, true],
            leader_loss: loss(10.0),
            follower_loss: loss(8.0),
            rho: 0.05,
            delta: 1,
            max_iterations: 20,
            slack_tol: 1e-6,
            shadow_step: 64.0,
            enumeration_cap: 1_000_000,
            base,
        }
    }

    #[test]
    fn jain_examples() {
        assert_eq!(fairness_index(0.7, 0.7), Some(1.0));
        assert_eq!(fairness_index(1.0, 0.0), Some(0.5));
        assert!((fairness_index(0.9, 0.6).unwrap() - 0.961_538_461_538_461_5).abs() < 1e-12);
        assert_eq!(fairness_index(0.0, 0.0), None);
        assert_eq!(fairness_index(0.3, 0.8), fairness_index(0.8, 0.3));
    }

    #[test]
    fn idle_leader_decouples_follower() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = tiny_game(&mut rng);
        let n = g.n();
        let idle = vec![ChainState::Off; n * g.base.horizon];
        let br = follower_best_response(&g, &idle).unwrap();
        let mut single = g.follower_problem(&idle);
        single.fixed = idle.clone();
        let alone = solve_bnb(&single).unwrap();
        assert_eq!(br.schedule, alone.states);
    }

    #[test]
    fn slack_budget_has_no_active_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = tiny_game(&mut rng);
        for f in &mut g.base.forecast {
            f.0 = 1e9;
        }
        let leader = vec![ChainState::Full; g.n() * g.base.horizon];
        let br = follower_best_response(&g, &leader).unwrap();
        assert!(br.active.is_empty());
        assert!(prune_active_set(&br.active, &br, g.slack_tol).is_empty());
    }

    #[test]
    fn shadow_prices_are_non_negative_and_pruning_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let g = tiny_game(&mut rng);
            let leader = vec![ChainState::Degraded; g.n() * g.base.horizon];
            let Ok(br) = follower_best_response(&g, &leader) else {
                continue;
            };
            assert!(br.multipliers.iter().all(|m| *m >= 0.0));
            let all: ComplementaritySet = (0..g.base.horizon).collect();
            let once = prune_active_set(&all, &br, g.slack_tol);
            assert!(once.is_subset(&all));
            assert_eq!(prune_active_set(&once, &br, g.slack_tol), once);
        }
    }

    #[test]
    fn infinite_rho_freezes_leader() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = tiny_game(&mut rng);
        for f in &mut g.base.forecast {
            f.0 = 1e9;
        }
        g.rho = 1e12;
        let prev = vec![ChainState::Degraded; g.n() * g.base.horizon];
        let br = follower_best_response(&g, &prev).unwrap();
        let next = leader_update(&g, &prev, &ComplementaritySet::new(), &br).unwrap();
        for t in 0..g.base.horizon {
            for &c in &g.leader {
                assert_eq!(next[t * g.n() + c], prev[t * g.n() + c]);
            }
        }
    }

    #[test]
    fn zero_rho_single_step_matches_leader_subproblem() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = tiny_game(&mut rng);
        g.base.horizon = 1;
        g.base.forecast.truncate(1);
        g.base.reserved.truncate(1);
        let n = g.n();
        g.base.fixed.truncate(n);
        g.rho = 0.0;
        // trivial follower: everything off, no budget claim
        let off = vec![ChainState::Off; n];
        let br = BestResponse {
            schedule: off.clone(),
            objective: 0.0,
            multipliers: vec![0.0],
            margins: vec![f64::INFINITY],
            active: ComplementaritySet::new(),
        };
        let next = leader_update(&g, &off, &ComplementaritySet::new(), &br).unwrap();
        let mut sub = g.leader_view();
        sub.fixed = off;
        let oracle = crate::scheduler::solve_exhaustive(&sub).unwrap();
        for &c in &g.leader {
            assert_eq!(next[c], oracle.states[c]);
        }
    }

    #[test]
    fn decoupled_budgets_converge_fast() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = tiny_game(&mut rng);
        for f in &mut g.base.forecast {
            f.0 = 1e9;
        }
        let sol = ld_cp_solve(&g).unwrap();
        assert!(sol.converged && sol.iterations <= 2);
        let oracle = bilevel_oracle(&g).unwrap();
        assert!((sol.leader_objective - oracle.leader_objective).abs() <= 1e-9);
    }

    #[test]
    fn ld_cp_respects_iteration_cap_and_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let mut g = tiny_game(&mut rng);
            g.max_iterations = 3;
            let Ok(sol) = ld_cp_solve(&g) else { continue };
            assert!(sol.iterations <= 3);
            let p = g.follower_problem(&sol.schedule);
            assert!(evaluate_schedule(&p, &sol.schedule).feasible);
            assert!((0.5..=1.0).contains(&sol.fairness));
            let again = ld_cp_solve(&g).unwrap();
            assert_eq!(again, sol);
        }
    }

    #[test]
    fn oracle_is_leader_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = tiny_game(&mut rng);
        let Ok(o) = bilevel_oracle(&g) else { return };
        let n = g.n();
        for code in 0..3usize.pow((g.leader.len() * g.base.horizon) as u32) {
            let l = decode(code, g.leader.len() * g.base.horizon);
            let mut joint = g.base.fixed.clone();
            scatter(&mut joint, &g.leader, &l, n);
            if let Ok(br) = follower_best_response(&g, &joint) {
                assert!(o.leader_objective <= g.leader_objective(&br.schedule) + 1e-9);
            }
        }
    }
}
