//! Monte Carlo harness: independent seeded runs in parallel, reduced into a
//! report sorted by seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use super::world::{run_scenario, RunSummary};
use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self {
            n,
            mean,
            std,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub policy: String,
    pub digest: String,
    pub runs: Vec<RunRecord>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub suite: String,
    pub scenarios: Vec<ScenarioReport>,
}

impl ScenarioReport {
    pub fn ok_runs(&self) -> impl Iterator<Item = &RunSummary> {
        self.runs.iter().filter_map(|r| r.summary.as_ref())
    }

    /// Per-run values of one metric, skipping runs where it is undefined.
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.ok_runs().filter_map(|s| metric_value(s, metric)).collect()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.aggregates.get(metric).map(|a| a.mean)
    }

    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.status == RunStatus::Error).count()
    }
}

pub const METRICS: [&str; 5] = ["p_succ", "df_max", "eta_util", "trr", "fairness"];

pub fn metric_value(s: &RunSummary, metric: &str) -> Option<f64> {
    let m = &s.metrics.metrics;
    match metric {
        "p_succ" => m.p_succ,
        "df_max" => Some(m.df_max),
        "eta_util" => m.eta_util,
        "trr" => Some(m.trr),
        "fairness" => s.metrics.fairness,
        _ => None,
    }
}

/// Aggregates recomputed from per-run values.
pub fn aggregate_runs(runs: &[RunRecord]) -> BTreeMap<String, Aggregate> {
    let mut out = BTreeMap::new();
    for metric in METRICS {
        let vals: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.summary.as_ref())
            .filter_map(|s| metric_value(s, metric))
            .collect();
        if let Some(a) = Aggregate::of(&vals) {
            out.insert(metric.to_string(), a);
        }
    }
    out
}

/// Run `runs` seeds of every scenario. Runs are independent and execute in
/// parallel; a failing run is reported with its error instead of aborting.
/// When `trace_dir` is given each trace is written there.
pub fn run_experiment(
    suite: &str,
    scenarios: &[Scenario],
    runs: usize,
    trace_dir: Option<&Path>,
) -> Result<ExperimentReport, EngineError> {
    if runs == 0 {
        return Err(EngineError::Validation("runs must be >= 1".into()));
    }
    for s in scenarios {
        s.validate()?;
    }
    if let Some(dir) = trace_dir {
        fs::create_dir_all(dir).map_err(|e| EngineError::Io(e.to_string()))?;
    }
    let jobs: Vec<(usize, u64)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.seeds_for(runs).into_iter().map(move |seed| (i, seed)))
        .collect();
    let records: Vec<(usize, RunRecord)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let sc = &scenarios[i];
            let rec = match run_scenario(sc, seed) {
                Ok(out) => {
                    let written = trace_dir.map_or(Ok(()), |dir| {
                        fs::write(dir.join(trace_file_name(&sc.name, seed)), out.trace.to_csv())
                    });
                    match written {
                        Ok(()) => RunRecord {
                            seed,
                            status: RunStatus::Ok,
                            error: None,
                            summary: Some(out.summary),
                        },
                        Err(e) => RunRecord {
                            seed,
                            status: RunStatus::Error,
                            error: Some(format!("writing trace: {e}")),
                            summary: None,
                        },
                    }
                }
                Err(e) => RunRecord {
                    seed,
                    status: RunStatus::Error,
                    error: Some(e.to_string()),
                    summary: None,
                },
            };
            (i, rec)
        })
        .collect();
    let mut reports: Vec<ScenarioReport> = scenarios
        .iter()
        .map(|s| ScenarioReport {
            name: s.name.clone(),
            policy: s.policy.as_str().to_string(),
            digest: s.digest(),
            runs: Vec::new(),
            aggregates: BTreeMap::new(),
        })
        .collect();
    for (i, rec) in records {
        reports[i].runs.push(rec);
    }
    for r in &mut reports {
        r.runs.sort_by_key(|x| x.seed);
        r.aggregates = aggregate_runs(&r.runs);
    }
    Ok(ExperimentReport {
        suite: suite.to_string(),
        scenarios: reports,
    })
}

pub fn trace_file_name(name: &str, seed: u64) -> String {
    format!("trace_{name}_{seed}.csv")
}

impl ExperimentReport {
    pub fn scenario(&self, name: &str) -> Option<&ScenarioReport> {
        self.scenarios.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        serde_json::from_str(text).map_err(|e| EngineError::Validation(format!("report: {e}")))
    }
}
