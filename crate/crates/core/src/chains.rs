//! Control chains over the communication/control/physical graph, their key
//! consumption and the per-step loss.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{ControlLaw, GridState};
use crate::keypool::{CryptoMode, ModeCosts};

/// Tri-state chain activation. The derived order `Off < Degraded < Full`
/// is the security order used by tie-breaking.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum ChainState {
    #[default]
    Off = 0,
    Degraded = 1,
    Full = 2,
}

impl ChainState {
    pub const ALL: [ChainState; 3] = [ChainState::Off, ChainState::Degraded, ChainState::Full];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ChainState::Off),
            1 => Some(ChainState::Degraded),
            2 => Some(ChainState::Full),
            _ => None,
        }
    }

    pub fn mode(self) -> Option<CryptoMode> {
        match self {
            ChainState::Off => None,
            ChainState::Degraded => Some(CryptoMode::Degraded),
            ChainState::Full => Some(CryptoMode::Full),
        }
    }

    pub fn from_mode(mode: CryptoMode) -> Self {
        match mode {
            CryptoMode::Degraded => ChainState::Degraded,
            CryptoMode::Full => ChainState::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Com,
    Ctr,
    Phy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub id: String,
    pub layer: Layer,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultilayerGraph {
    layers: HashMap<String, Layer>,
    edges: HashSet<(String, String)>,
}

impl MultilayerGraph {
    pub fn new(nodes: &[GraphNode], edges: &[(String, String)]) -> Result<Self, PathDiagnostic> {
        let mut layers = HashMap::new();
        for n in nodes {
            if layers.insert(n.id.clone(), n.layer).is_some() {
                return Err(PathDiagnostic::DuplicateNode(n.id.clone()));
            }
        }
        for (a, b) in edges {
            for id in [a, b] {
                if !layers.contains_key(id) {
                    return Err(PathDiagnostic::UnknownNode(id.clone()));
                }
            }
        }
        Ok(Self {
            layers,
            edges: edges.iter().cloned().collect(),
        })
    }

    pub fn layer(&self, id: &str) -> Option<Layer> {
        self.layers.get(id).copied()
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        self.edges.contains(&(a.to_string(), b.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathDiagnostic {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("path is empty")]
    EmptyPath,
    #[error("path must start at a control-center node, starts at `{0}`")]
    NotFromControlCenter(String),
    #[error("missing communication hop")]
    MissingCommunicationHop,
    #[error("path must end at a physical node, ends at `{0}`")]
    NotEndingAtPhysical(String),
    #[error("intermediate node `{0}` is not a communication node")]
    LayerOrder(String),
    #[error("no edge `{0}` -> `{1}`")]
    MissingEdge(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Owner {
    Tso,
    Dso,
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Owner::Tso => "tso",
            Owner::Dso => "dso",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlChain {
    pub id: String,
    pub task_type: String,
    pub owner: Owner,
    pub path: Vec<String>,
    /// Message length (bits).
    pub message_length: u64,
    /// Mean command rate (messages/s).
    pub trigger_rate: f64,
    /// Key cost per message in each mode (bits).
    pub cost_full: u64,
    pub cost_degraded: u64,
    /// τ_ℓ (s).
    pub latency_tolerance: f64,
    /// β_ℓ.
    pub priority_weight: f64,
    /// γ_ℓ.
    pub reconfig_cost: f64,
    /// Ordinal priority; protect-zone debits are restricted to high values.
    pub priority: u32,
    /// Weakest mode that still counts as a successful delivery.
    pub required_mode: CryptoMode,
    /// Mandatory chains may never be switched off by the scheduler.
    pub mandatory: bool,
    pub law: ControlLaw,
    pub degraded_lag: usize,
}

impl ControlChain {
    pub fn cost(&self, mode: CryptoMode) -> u64 {
        match mode {
            CryptoMode::Full => self.cost_full,
            CryptoMode::Degraded => self.cost_degraded,
        }
    }

    /// Expected key draw (bits/s) in `state`.
    pub fn rate(&self, state: ChainState) -> f64 {
        state
            .mode()
            .map_or(0.0, |m| self.trigger_rate * self.cost(m) as f64)
    }

    /// d_ℓ: key demand at full protection (bits/s).
    pub fn demand(&self) -> f64 {
        self.rate(ChainState::Full)
    }

    pub fn set_costs(&mut self, costs: &ModeCosts) {
        self.cost_full = costs.message_cost(CryptoMode::Full, self.message_length);
        self.cost_degraded = costs.message_cost(CryptoMode::Degraded, self.message_length);
    }
}

/// Checks existence, layer ordering (ctr → com+ → phy) and edges, returning
/// the first violation.
pub fn validate_chain(graph: &MultilayerGraph, chain: &ControlChain) -> Result<(), PathDiagnostic> {
    let path = &chain.path;
    let Some(first) = path.first() else {
        return Err(PathDiagnostic::EmptyPath);
    };
    let mut layers = Vec::with_capacity(path.len());
    for id in path {
        layers.push(
            graph
                .layer(id)
                .ok_or_else(|| PathDiagnostic::UnknownNode(id.clone()))?,
        );
    }
    if layers[0] != Layer::Ctr {
        return Err(PathDiagnostic::NotFromControlCenter(first.clone()));
    }
    let last = path.len() - 1;
    if layers[last] != Layer::Phy {
        return Err(PathDiagnostic::NotEndingAtPhysical(path[last].clone()));
    }
    if last < 2 {
        return Err(PathDiagnostic::MissingCommunicationHop);
    }
    if let Some(i) = (1..last).find(|&i| layers[i] != Layer::Com) {
        return Err(PathDiagnostic::LayerOrder(path[i].clone()));
    }
    for w in path.windows(2) {
        if !graph.has_edge(&w[0], &w[1]) {
            return Err(PathDiagnostic::MissingEdge(w[0].clone(), w[1].clone()));
        }
    }
    Ok(())
}

/// Total expected key draw (bits/s) of a state assignment.
pub fn chain_consumption(states: &[ChainState], chains: &[ControlChain]) -> f64 {
    debug_assert_eq!(states.len(), chains.len());
    states.iter().zip(chains).map(|(&s, c)| c.rate(s)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_f: f64,
    #[serde(default)]
    pub w_v: f64,
    pub xi_drop: f64,
    pub xi_deg: f64,
}

impl LossWeights {
    pub fn validate(&self) -> bool {
        [self.w_f, self.w_v, self.xi_drop, self.xi_deg]
            .iter()
            .all(|w| *w >= 0.0)
    }
}

/// Loss split into its three groups; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub grid: f64,
    pub task: f64,
    pub switching: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.grid + self.task + self.switching
    }
}

/// Grid deviation term `w_f·Σ|Δf| + w_v·Σ|ΔV|`.
pub fn grid_loss(grid: &GridState, weights: &LossWeights) -> f64 {
    let f: f64 = grid.df().iter().map(|v| v.abs()).sum();
    let v: f64 = grid.dv().iter().map(|v| v.abs()).sum();
    weights.w_f * f + weights.w_v * v
}

/// Per-chain task and switching cost, `β_ℓ`-weighted drop/degrade
/// penalties plus `γ_ℓ` per state change.
pub fn chain_loss(
    now: ChainState,
    prev: ChainState,
    chain: &ControlChain,
    weights: &LossWeights,
) -> (f64, f64) {
    let task = chain.priority_weight
        * match now {
            ChainState::Off => weights.xi_drop,
            ChainState::Degraded => weights.xi_deg,
            ChainState::Full => 0.0,
        };
    let switching = if now != prev { chain.reconfig_cost } else { 0.0 };
    (task, switching)
}

pub fn step_loss(
    now: &[ChainState],
    prev: &[ChainState],
    grid: &GridState,
    weights: &LossWeights,
    chains: &[ControlChain],
) -> LossBreakdown {
    assert_eq!(now.len(), prev.len(), "state vectors differ in length");
    let mut out = LossBreakdown {
        grid: grid_loss(grid, weights),
        ..Default::default()
    };
    for ((&n, &p), c) in now.iter().zip(prev).zip(chains) {
        let (task, sw) = chain_loss(n, p, c, weights);
        out.task += task;
        out.switching += sw;
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grid::Layout;
    use nalgebra::DVector;

    pub(crate) fn chain(id: &str, owner: Owner, len: u64, rate: f64) -> ControlChain {
        ControlChain {
            id: id.into(),
            task_type: "agc".into(),
            owner,
            path: vec!["cc".into(), "r1".into(), "g1".into()],
            message_length: len,
            trigger_rate: rate,
            cost_full: len,
            cost_degraded: 128,
            latency_tolerance: 0.1,
            priority_weight: 1.0,
            reconfig_cost: 0.5,
            priority: 1,
            required_mode: CryptoMode::Full,
            mandatory: false,
            law: ControlLaw::Monitor,
            degraded_lag: 0,
        }
    }

    fn graph() -> MultilayerGraph {
        let nodes = [
            ("cc", Layer::Ctr),
            ("r1", Layer::Com),
            ("r2", Layer::Com),
            ("g1", Layer::Phy),
        ]
        .map(|(id, layer)| GraphNode {
            id: id.into(),
            layer,
        });
        let e = |a: &str, b: &str| (a.to_string(), b.to_string());
        MultilayerGraph::new(&nodes, &[e("cc", "r1"), e("r1", "g1"), e("r1", "r2"), e("cc", "g1")])
            .unwrap()
    }

    fn flat_grid(df: &[f64]) -> GridState {
        GridState {
            x: DVector::from_row_slice(df),
            layout: Layout {
                areas: df.len(),
                integrators: false,
                nodes: 0,
            },
        }
    }

    #[test]
    fn consumption_examples() {
        let c = chain("a", Owner::Tso, 512, 2.0);
        assert_eq!(chain_consumption(&[ChainState::Off], &[c.clone()]), 0.0);
        assert_eq!(chain_consumption(&[ChainState::Full], &[c.clone()]), 1024.0);
        assert!(c.rate(ChainState::Full) >= c.rate(ChainState::Degraded));
    }

    #[test]
    fn loss_examples() {
        let chains = vec![chain("a", Owner::Tso, 512, 1.0), chain("b", Owner::Dso, 256, 1.0)];
        let w = LossWeights {
            w_f: 10.0,
            w_v: 1.0,
            xi_drop: 3.0,
            xi_deg: 1.0,
        };
        let full = [ChainState::Full, ChainState::Full];
        let g0 = flat_grid(&[0.0]);
        assert_eq!(step_loss(&full, &full, &g0, &w, &chains).total(), 0.0);

        let now = [ChainState::Degraded, ChainState::Full];
        let l = step_loss(&now, &full, &g0, &w, &chains);
        assert_eq!(l.total(), chains[0].reconfig_cost + w.xi_deg);
        assert_eq!(l.grid + l.task + l.switching, l.total());

        let swapped: Vec<_> = chains.iter().rev().cloned().collect();
        let now_rev = [ChainState::Full, ChainState::Degraded];
        let g = flat_grid(&[0.1]);
        assert_eq!(
            step_loss(&now, &full, &g, &w, &chains).total(),
            step_loss(&now_rev, &full, &g, &w, &swapped).total()
        );
    }

    #[test]
    fn path_validation() {
        let g = graph();
        let mut c = chain("a", Owner::Tso, 512, 1.0);
        assert_eq!(validate_chain(&g, &c), Ok(()));
        c.path = vec!["cc".into(), "g1".into()];
        assert_eq!(validate_chain(&g, &c), Err(PathDiagnostic::MissingCommunicationHop));
        c.path = vec!["cc".into(), "r9".into(), "g1".into()];
        assert_eq!(validate_chain(&g, &c), Err(PathDiagnostic::UnknownNode("r9".into())));
        c.path = vec!["cc".into(), "r2".into(), "g1".into()];
        assert_eq!(
            validate_chain(&g, &c),
            Err(PathDiagnostic::MissingEdge("cc".into(), "r2".into()))
        );
        c.path = vec!["r1".into(), "g1".into()];
        assert!(matches!(validate_chain(&g, &c), Err(PathDiagnostic::NotFromControlCenter(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn state() -> impl Strategy<Value = ChainState> {
            (0u8..3).prop_map(|v| ChainState::from_u8(v).unwrap())
        }

        proptest! {
            #[test]
            fn loss_non_negative_and_zero_only_when_perfect(
                now in prop::collection::vec(state(), 3),
                prev in prop::collection::vec(state(), 3),
                df in prop::collection::vec(-0.5f64..0.5, 2),
            ) {
                let chains: Vec<_> = (0..3).map(|i| chain(&i.to_string(), Owner::Tso, 512, 1.0)).collect();
                let w = LossWeights { w_f: 5.0, w_v: 0.0, xi_drop: 2.0, xi_deg: 1.0 };
                let g = flat_grid(&df);
                let l = step_loss(&now, &prev, &g, &w, &chains);
                prop_assert!(l.total() >= 0.0);
                let perfect = df.iter().all(|v| *v == 0.0)
                    && now.iter().all(|s| *s == ChainState::Full)
                    && now == prev;
                prop_assert_eq!(l.total() == 0.0, perfect);
            }

            #[test]
            fn consumption_monotone(a in prop::collection::vec(state(), 4),
                                    b in prop::collection::vec(state(), 4)) {
                let chains: Vec<_> = (0..4).map(|i| chain(&i.to_string(), Owner::Dso, 300 + i as u64 * 100, 1.5)).collect();
                let hi: Vec<_> = a.iter().zip(&b).map(|(x, y)| (*x).max(*y)).collect();
                prop_assert!(chain_consumption(&a, &chains) <= chain_consumption(&hi, &chains));
            }
        }
    }
}
