//! Scenario files (TOML, `schema_version = 1`) and suites.
//!
//! A scenario may name a base file with `extends = "base.toml"`; tables are
//! merged recursively and keys in the extending file win. Arrays, including
//! `chains`, are replaced whole.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chains::{validate_chain, ChainState, ControlChain, GraphNode, LossWeights, MultilayerGraph, Owner};
use crate::forecast::FilterConfig;
use crate::game::PlayerLoss;
use crate::grid::{ControlLaw, DisturbanceConfig, GridModel};
use crate::keypool::{CryptoMode, KeyPool, ModeCosts, PoolConfig};
use crate::protocol::asdu::{MAX_ASDU_LEN, MIN_ASDU_LEN};
use crate::protocol::frame::message_key_cost;
use crate::protocol::transport::TransportKind;
use crate::protocol::LatencyModel;
use crate::qlink::LinkParams;
use crate::scheduler::{RiskConfig, RiskModel};

use super::EngineError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Static chain states, pre-loaded pool without replenishment.
    S1,
    /// Static chains, live generation, zone-triggered mode switching.
    S2,
    /// Rolling-horizon chain scheduler on one shared pool.
    S3,
    /// Independent TSO and DSO schedulers on a fixed split of the supply.
    S4,
    /// TSO–DSO Stackelberg game solved by LD-CP.
    S5,
}

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::S1 => "s1",
            Policy::S2 => "s2",
            Policy::S3 => "s3",
            Policy::S4 => "s4",
            Policy::S5 => "s5",
        }
    }

    pub fn needs_scheduler(&self) -> bool {
        matches!(self, Policy::S3 | Policy::S4 | Policy::S5)
    }

    pub fn needs_game(&self) -> bool {
        matches!(self, Policy::S4 | Policy::S5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub id: String,
    pub task_type: String,
    pub owner: Owner,
    pub path: Vec<String>,
    /// Bits; a whole number of bytes that fits one ASDU.
    pub message_length: u64,
    pub trigger_rate: f64,
    pub latency_tolerance: f64,
    #[serde(default = "unit")]
    pub priority_weight: f64,
    #[serde(default)]
    pub reconfig_cost: f64,
    #[serde(default)]
    pub priority: u32,
    #[serde(default = "full_mode")]
    pub required_mode: CryptoMode,
    #[serde(default)]
    pub mandatory: bool,
    pub law: ControlLaw,
    #[serde(default)]
    pub degraded_lag: usize,
    /// State at t = 0, and the configured state of static policies.
    #[serde(default = "full_state")]
    pub state: ChainState,
}

fn unit() -> f64 {
    1.0
}

fn full_mode() -> CryptoMode {
    CryptoMode::Full
}

fn full_state() -> ChainState {
    ChainState::Full
}

impl ChainSpec {
    pub fn to_chain(&self, costs: &ModeCosts) -> ControlChain {
        let mut c = ControlChain {
            id: self.id.clone(),
            task_type: self.task_type.clone(),
            owner: self.owner,
            path: self.path.clone(),
            message_length: self.message_length,
            trigger_rate: self.trigger_rate,
            cost_full: 0,
            cost_degraded: 0,
            latency_tolerance: self.latency_tolerance,
            priority_weight: self.priority_weight,
            reconfig_cost: self.reconfig_cost,
            priority: self.priority,
            required_mode: self.required_mode,
            mandatory: self.mandatory,
            law: self.law,
            degraded_lag: self.degraded_lag,
        };
        c.set_costs(costs);
        c
    }

    pub fn payload_bytes(&self) -> usize {
        (self.message_length / 8) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default = "one_usize")]
    pub horizon: usize,
    /// Ticks between decisions; one scheduler step spans this many ticks.
    #[serde(default = "one_usize")]
    pub stride: usize,
    pub epsilon: f64,
    pub eta_buf: f64,
    #[serde(default)]
    pub risk_model: RiskModel,
    #[serde(default)]
    pub lambda_freq: f64,
    pub weights: LossWeights,
    #[serde(default = "default_cap")]
    pub enumeration_cap: u64,
    #[serde(default = "default_nodes")]
    pub node_budget: u64,
}

fn one_usize() -> usize {
    1
}

fn default_cap() -> u64 {
    531_441
}

fn default_nodes() -> u64 {
    200_000
}

impl SchedulerConfig {
    pub fn risk(&self) -> RiskConfig {
        RiskConfig {
            epsilon: self.epsilon,
            eta_buf: self.eta_buf,
            model: self.risk_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "one_usize")]
    pub delta: usize,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_slack")]
    pub slack_tol: f64,
    #[serde(default = "default_shadow")]
    pub shadow_step: f64,
    pub leader_loss: PlayerLoss,
    pub follower_loss: PlayerLoss,
    /// Areas whose frequency enters the TSO loss; the rest are DSO areas.
    #[serde(default = "default_tso_areas")]
    pub tso_areas: Vec<usize>,
    /// TSO share of generation and initial inventory under the split policy.
    #[serde(default = "half")]
    pub quota: f64,
}

fn default_iterations() -> usize {
    20
}

fn default_slack() -> f64 {
    1.0
}

fn default_shadow() -> f64 {
    64.0
}

fn default_tso_areas() -> Vec<usize> {
    vec![0]
}

fn half() -> f64 {
    0.5
}

/// Mode switching of the zone-triggered policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZonePolicy {
    /// In the reconfigure zone, chains at or above this priority keep their
    /// configured mode; all others drop to degraded. In the protect zone
    /// every active chain is degraded.
    #[serde(default = "never")]
    pub keep_priority: u32,
}

fn never() -> u32 {
    u32::MAX
}

impl Default for ZonePolicy {
    fn default() -> Self {
        Self {
            keep_priority: never(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub policy: Policy,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub duration: f64,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub grid_preset: String,
    /// Safe frequency band for the recovery-time metric.
    pub df_safe: f64,
    pub link: LinkParams,
    pub pool: PoolConfig,
    #[serde(default)]
    pub costs: ModeCosts,
    #[serde(default)]
    pub latency: LatencyModel,
    pub filter: FilterConfig,
    #[serde(default)]
    pub disturbance: DisturbanceConfig,
    #[serde(default)]
    pub scheduler: Option<SchedulerConfig>,
    #[serde(default)]
    pub game: Option<GameConfig>,
    #[serde(default)]
    pub zones: ZonePolicy,
    #[serde(default)]
    pub transport: TransportKind,
    pub graph: GraphSpec,
    pub chains: Vec<ChainSpec>,
}

fn default_dt() -> f64 {
    0.1
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, EngineError> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| EngineError::Validation(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(mut value: toml::Value) -> Result<Self, EngineError> {
        if let Some(t) = value.as_table_mut() {
            t.remove("extends");
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| EngineError::Validation(e.to_string()))
    }

    /// Load a scenario file, resolving `extends` chains relative to each file.
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let value = load_value(path, &mut BTreeSet::new())?;
        Self::from_value(value)
    }

    pub fn ticks(&self) -> u64 {
        (self.duration / self.dt + 1e-9).floor() as u64
    }

    pub fn seeds_for(&self, runs: usize) -> Vec<u64> {
        if self.seeds.len() >= runs {
            self.seeds[..runs].to_vec()
        } else {
            let mut s = self.seeds.clone();
            let mut next = s.iter().max().map_or(1, |m| m + 1);
            while s.len() < runs {
                s.push(next);
                next += 1;
            }
            s
        }
    }

    pub fn chains(&self) -> Vec<ControlChain> {
        self.chains.iter().map(|c| c.to_chain(&self.costs)).collect()
    }

    pub fn model(&self) -> Result<GridModel, EngineError> {
        GridModel::preset(&self.grid_preset, self.dt)
            .map_err(|e| EngineError::Validation(format!("grid: {e}")))
    }

    /// SHA-256 over the canonical JSON form of the resolved scenario.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn tso_chains(&self) -> Vec<usize> {
        self.owned(Owner::Tso)
    }

    pub fn dso_chains(&self) -> Vec<usize> {
        self.owned(Owner::Dso)
    }

    fn owned(&self, o: Owner) -> Vec<usize> {
        (0..self.chains.len()).filter(|&i| self.chains[i].owner == o).collect()
    }

    /// Every check that must pass before the first tick.
    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |m: String| Err(EngineError::Validation(m));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.dt > 0.0) {
            return fail(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.duration >= self.dt) {
            return fail(format!("duration {} is shorter than dt {}", self.duration, self.dt));
        }
        if !(self.df_safe > 0.0) {
            return fail("df_safe must be > 0".into());
        }
        self.link
            .validate()
            .map_err(|e| EngineError::Validation(format!("link: {e}")))?;
        KeyPool::new(self.pool).map_err(|e| EngineError::Validation(format!("pool: {e}")))?;
        self.filter
            .validate()
            .map_err(|e| EngineError::Validation(format!("filter: {e}")))?;
        if !(self.filter.inventory_noise > 0.0) {
            return fail("filter: inventory_noise must be > 0".into());
        }
        self.latency
            .validate()
            .map_err(|e| EngineError::Validation(format!("latency: {e}")))?;
        let model = self.model()?;
        if self.chains.is_empty() {
            return fail("at least one chain is required".into());
        }
        let edges: Vec<(String, String)> = self
            .graph
            .edges
            .iter()
            .map(|[a, b]| (a.clone(), b.clone()))
            .collect();
        let graph = MultilayerGraph::new(&self.graph.nodes, &edges)
            .map_err(|e| EngineError::Validation(format!("graph: {e}")))?;
        let mut ids = BTreeSet::new();
        for (spec, chain) in self.chains.iter().zip(self.chains()) {
            let ctx = |m: String| EngineError::Validation(format!("chain `{}`: {m}", spec.id));
            if !ids.insert(spec.id.clone()) {
                return Err(ctx("duplicate id".into()));
            }
            validate_chain(&graph, &chain).map_err(|e| ctx(e.to_string()))?;
            spec.law
                .validate(&model.layout)
                .map_err(|e| ctx(e.to_string()))?;
            if spec.message_length % 8 != 0 {
                return Err(ctx("message_length must be a whole number of bytes".into()));
            }
            let bytes = spec.payload_bytes();
            if !(MIN_ASDU_LEN..=MAX_ASDU_LEN).contains(&bytes) {
                return Err(ctx(format!(
                    "message of {bytes} bytes does not fit an ASDU ({MIN_ASDU_LEN}..={MAX_ASDU_LEN})"
                )));
            }
            if !(spec.trigger_rate >= 0.0) || !(spec.latency_tolerance > 0.0) {
                return Err(ctx("trigger_rate >= 0 and latency_tolerance > 0 required".into()));
            }
            if !(spec.priority_weight >= 0.0) || !(spec.reconfig_cost >= 0.0) {
                return Err(ctx("priority_weight and reconfig_cost must be >= 0".into()));
            }
            for (mode, byte) in [(CryptoMode::Full, 0x02u8), (CryptoMode::Degraded, 0x01)] {
                let wire = message_key_cost(byte, bytes).expect("known mode");
                if chain.cost(mode) != wire {
                    return Err(ctx(format!(
                        "{mode:?} accounting cost {} differs from the frame's key cost {wire}",
                        chain.cost(mode)
                    )));
                }
            }
            if spec.mandatory && spec.state == ChainState::Off {
                return Err(ctx("mandatory chain cannot start off".into()));
            }
        }
        if self.policy.needs_scheduler() {
            let Some(s) = &self.scheduler else {
                return fail(format!("policy {} requires a [scheduler] section", self.policy.as_str()));
            };
            if s.horizon == 0 || s.stride == 0 {
                return fail("scheduler: horizon and stride must be >= 1".into());
            }
            if !(s.epsilon > 0.0 && s.epsilon < 0.5) || !(s.eta_buf >= 0.0) {
                return fail("scheduler: 0 < epsilon < 0.5 and eta_buf >= 0 required".into());
            }
            if !s.weights.validate() || !(s.lambda_freq >= 0.0) {
                return fail("scheduler: weights must be non-negative".into());
            }
        }
        match (&self.game, self.policy.needs_game()) {
            (None, true) => {
                return fail(format!("policy {} requires a [game] section", self.policy.as_str()))
            }
            (Some(_), false) => {
                return fail(format!(
                    "[game] is only meaningful for policies s4 and s5, not {}",
                    self.policy.as_str()
                ))
            }
            (Some(g), true) => {
                if g.tso_areas.iter().any(|&a| a >= model.layout.areas) {
                    return fail("game: tso_areas index out of range".into());
                }
                if !(g.quota > 0.0 && g.quota < 1.0) {
                    return fail("game: quota must lie in (0, 1)".into());
                }
                if !(g.rho >= 0.0) || g.delta == 0 || !(g.shadow_step > 0.0) {
                    return fail("game: rho >= 0, delta >= 1, shadow_step > 0 required".into());
                }
                if self.tso_chains().is_empty() || self.dso_chains().is_empty() {
                    return fail("game: both TSO and DSO chains are required".into());
                }
            }
            (None, false) => {}
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn load_value(path: &Path, seen: &mut BTreeSet<PathBuf>) -> Result<toml::Value, EngineError> {
    let canon = path
        .canonicalize()
        .map_err(|e| EngineError::Validation(format!("{}: {e}", path.display())))?;
    if !seen.insert(canon.clone()) {
        return Err(EngineError::Validation(format!(
            "{}: circular extends",
            path.display()
        )));
    }
    let text = fs::read_to_string(&canon)
        .map_err(|e| EngineError::Validation(format!("{}: {e}", path.display())))?;
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| EngineError::Validation(format!("{}: {e}", path.display())))?;
    let parent = value
        .get("extends")
        .and_then(|v| v.as_str())
        .map(|p| canon.parent().unwrap_or(Path::new(".")).join(p));
    if let Some(parent) = parent {
        let mut base = load_value(&parent, seen)?;
        if let Some(t) = value.as_table_mut() {
            t.remove("extends");
        }
        merge(&mut base, value);
        value = base;
    }
    Ok(value)
}

/// A named list of scenario files, resolved relative to the suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteFile {
    pub name: String,
    pub scenarios: Vec<String>,
    #[serde(default)]
    pub runs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub name: String,
    pub runs: Option<usize>,
    pub scenarios: Vec<Scenario>,
}

impl Suite {
    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| EngineError::Validation(format!("{}: {e}", path.display())))?;
        let file: SuiteFile = toml::from_str(&text)
            .map_err(|e| EngineError::Validation(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let scenarios = file
            .scenarios
            .iter()
            .map(|p| Scenario::load(&dir.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        for s in &scenarios {
            s.validate()?;
        }
        Ok(Self {
            name: file.name,
            runs: file.runs,
            scenarios,
        })
    }
}
