//! Per-tick run trace: fixed-column CSV with a `#` header line carrying the
//! run constants, and metric replay from a persisted trace.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::game::fairness_index;
use crate::grid::{finalize_metrics, Metrics, MetricsAccumulator};
use crate::keypool::Zone;

use super::EngineError;

pub const TRACE_MAGIC: &str = "qkdsim-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub name: String,
    pub policy: String,
    pub seed: u64,
    pub dt: f64,
    pub ticks: u64,
    pub df_safe: f64,
    pub initial_bits: u64,
    /// Full-mode key demand of each side (bits/s).
    pub demand_tso: f64,
    pub demand_dso: f64,
    pub areas: usize,
    pub chains: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: u64,
    pub t: f64,
    /// Pool level after the tick (bits), summed over pools.
    pub k: u64,
    pub k_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Delivered link rate (bits/s).
    pub g: f64,
    pub generated: u64,
    pub consumed: u64,
    pub consumed_tso: u64,
    pub consumed_dso: u64,
    pub zone: Zone,
    /// One digit per chain: 0 off, 1 degraded, 2 full.
    pub states: String,
    pub triggers: u32,
    pub successes: u32,
    pub refusals: u32,
    pub max_abs_df: f64,
    pub df: Vec<f64>,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub header: Option<TraceHeader>,
    pub rows: Vec<TraceRow>,
}

const FIXED_COLUMNS: [&str; 17] = [
    "tick",
    "t",
    "K",
    "K_hat",
    "ci_lo",
    "ci_hi",
    "G",
    "generated",
    "consumed",
    "consumed_tso",
    "consumed_dso",
    "zone",
    "states",
    "triggers",
    "successes",
    "refusals",
    "max_abs_df",
];

impl TraceHeader {
    fn line(&self) -> String {
        format!(
            "# {TRACE_MAGIC} v{TRACE_VERSION} name={} policy={} seed={} dt={} ticks={} df_safe={} \
             initial_bits={} demand_tso={} demand_dso={} areas={} chains={}",
            self.name,
            self.policy,
            self.seed,
            self.dt,
            self.ticks,
            self.df_safe,
            self.initial_bits,
            self.demand_tso,
            self.demand_dso,
            self.areas,
            self.chains.join(";"),
        )
    }

    fn parse(line: &str) -> Result<Self, EngineError> {
        let bad = |m: &str| EngineError::Trace(format!("header: {m}"));
        let rest = line
            .strip_prefix("# ")
            .and_then(|l| l.strip_prefix(TRACE_MAGIC))
            .ok_or_else(|| bad("missing magic"))?;
        let mut parts = rest.split_whitespace();
        if parts.next() != Some(&format!("v{TRACE_VERSION}")) {
            return Err(bad("unsupported version"));
        }
        let mut kv = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| bad("malformed field"))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        fn num<T: std::str::FromStr>(s: &str, k: &str) -> Result<T, EngineError> {
            s.parse()
                .map_err(|_| EngineError::Trace(format!("header: bad {k}")))
        }
        Ok(Self {
            name: get("name")?.to_string(),
            policy: get("policy")?.to_string(),
            seed: num(get("seed")?, "seed")?,
            dt: num(get("dt")?, "dt")?,
            ticks: num(get("ticks")?, "ticks")?,
            df_safe: num(get("df_safe")?, "df_safe")?,
            initial_bits: num(get("initial_bits")?, "initial_bits")?,
            demand_tso: num(get("demand_tso")?, "demand_tso")?,
            demand_dso: num(get("demand_dso")?, "demand_dso")?,
            areas: num(get("areas")?, "areas")?,
            chains: get("chains")?
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
        })
    }

    fn column_line(&self) -> String {
        let mut cols: Vec<String> = FIXED_COLUMNS.iter().map(|c| c.to_string()).collect();
        cols.extend((0..self.areas).map(|a| format!("df_{a}")));
        cols.push("events".into());
        cols.join(",")
    }
}

impl Trace {
    /// CSV text. Floats use the shortest representation that parses back
    /// to the same value, so replay is exact.
    pub fn to_csv(&self) -> String {
        let header = self.header.as_ref().expect("trace header set");
        let mut out = String::with_capacity(self.rows.len() * 160);
        out.push_str(&header.line());
        out.push('\n');
        out.push_str(&header.column_line());
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.tick,
                r.t,
                r.k,
                r.k_hat,
                r.ci_lo,
                r.ci_hi,
                r.g,
                r.generated,
                r.consumed,
                r.consumed_tso,
                r.consumed_dso,
                r.zone.as_str(),
                r.states,
                r.triggers,
                r.successes,
                r.refusals,
                r.max_abs_df,
            );
            for v in &r.df {
                let _ = write!(out, ",{v}");
            }
            out.push(',');
            out.push_str(&r.events.join(";"));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EngineError> {
        let mut lines = text.lines();
        let header = TraceHeader::parse(lines.next().ok_or_else(|| EngineError::Trace("empty trace".into()))?)?;
        let cols = lines
            .next()
            .ok_or_else(|| EngineError::Trace("missing column line".into()))?;
        if cols != header.column_line() {
            return Err(EngineError::Trace("unexpected column layout".into()));
        }
        let width = FIXED_COLUMNS.len() + header.areas + 1;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = |m: &str| EngineError::Trace(format!("row {}: {m}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != width {
                return Err(bad("wrong column count"));
            }
            fn p<T: std::str::FromStr>(s: &str) -> Option<T> {
                s.parse().ok()
            }
            let zone = match f[11] {
                "protect" => Zone::Protect,
                "reconfigure" => Zone::Reconfigure,
                "normal" => Zone::Normal,
                _ => return Err(bad("unknown zone")),
            };
            let parse_row = || -> Option<TraceRow> {
                Some(TraceRow {
                    tick: p(f[0])?,
                    t: p(f[1])?,
                    k: p(f[2])?,
                    k_hat: p(f[3])?,
                    ci_lo: p(f[4])?,
                    ci_hi: p(f[5])?,
                    g: p(f[6])?,
                    generated: p(f[7])?,
                    consumed: p(f[8])?,
                    consumed_tso: p(f[9])?,
                    consumed_dso: p(f[10])?,
                    zone,
                    states: f[12].to_string(),
                    triggers: p(f[13])?,
                    successes: p(f[14])?,
                    refusals: p(f[15])?,
                    max_abs_df: p(f[16])?,
                    df: f[17..17 + header.areas]
                        .iter()
                        .map(|s| p(s))
                        .collect::<Option<Vec<f64>>>()?,
                    events: f[width - 1]
                        .split(';')
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect(),
                })
            };
            let row = parse_row().ok_or_else(|| bad("unparsable field"))?;
            if let Some(prev) = rows.last() {
                let prev: &TraceRow = prev;
                if row.tick != prev.tick + 1 || !(row.t > prev.t) {
                    return Err(bad("ticks must be consecutive and time increasing"));
                }
            }
            rows.push(row);
        }
        Ok(Self {
            header: Some(header),
            rows,
        })
    }
}

/// Everything a run reports, recomputable from its trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Jain index of the demand-normalized key each side actually spent.
    pub fairness: Option<f64>,
}

pub fn realized_fairness(
    consumed_tso: u64,
    consumed_dso: u64,
    demand_tso: f64,
    demand_dso: f64,
    elapsed: f64,
) -> Option<f64> {
    if !(demand_tso > 0.0 && demand_dso > 0.0 && elapsed > 0.0) {
        return None;
    }
    fairness_index(
        consumed_tso as f64 / (demand_tso * elapsed),
        consumed_dso as f64 / (demand_dso * elapsed),
    )
}

/// Recompute the run metrics from a persisted trace.
pub fn replay_metrics(trace: &Trace) -> Result<TraceMetrics, EngineError> {
    let h = trace
        .header
        .as_ref()
        .ok_or_else(|| EngineError::Trace("trace has no header".into()))?;
    let mut acc = MetricsAccumulator::new(h.dt, h.df_safe, h.initial_bits);
    let (mut tso, mut dso) = (0u64, 0u64);
    for r in &trace.rows {
        acc.n_trigger += r.triggers as u64;
        acc.n_success += r.successes as u64;
        acc.generated_bits += r.generated;
        acc.consumed_bits += r.consumed;
        acc.record_frequency(r.max_abs_df);
        tso += r.consumed_tso;
        dso += r.consumed_dso;
    }
    let elapsed = trace.rows.len() as f64 * h.dt;
    Ok(TraceMetrics {
        metrics: finalize_metrics(&acc),
        fairness: realized_fairness(tso, dso, h.demand_tso, h.demand_dso, elapsed),
    })
}
