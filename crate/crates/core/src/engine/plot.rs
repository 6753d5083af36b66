//! Plot-ready CSV series derived from an experiment report.

use std::fmt::Write as _;

use super::experiment::ExperimentReport;

/// File name and contents of each emitted series.
pub fn plot_data(report: &ExperimentReport, trr_bins: usize) -> Vec<(String, String)> {
    vec![
        ("trr_hist.csv".into(), trr_histogram(report, trr_bins.max(1))),
        ("fairness.csv".into(), fairness(report)),
        ("iterations_fairness.csv".into(), iterations_fairness(report)),
        ("sigma_heatmap.csv".into(), sigma_heatmap(report)),
        ("metrics.csv".into(), metrics(report)),
    ]
}

fn trr_histogram(report: &ExperimentReport, bins: usize) -> String {
    let all: Vec<f64> = report
        .scenarios
        .iter()
        .flat_map(|s| s.values("trr"))
        .collect();
    let mut out = String::from("scenario,bin_lo,bin_hi,count\n");
    if all.is_empty() {
        return out;
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    for s in &report.scenarios {
        let mut counts = vec![0usize; bins];
        for v in s.values("trr") {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let a = lo + b as f64 * width;
            let _ = writeln!(out, "{},{},{},{}", s.name, a, a + width, c);
        }
    }
    out
}

fn fairness(report: &ExperimentReport) -> String {
    let mut out = String::from("scenario,seed,fairness\n");
    for s in &report.scenarios {
        for r in s.ok_runs() {
            if let Some(f) = r.metrics.fairness {
                let _ = writeln!(out, "{},{},{}", s.name, r.seed, f);
            }
        }
    }
    out
}

fn iterations_fairness(report: &ExperimentReport) -> String {
    let mut out = String::from("scenario,seed,tick,iterations,converged,planned_fairness\n");
    for s in &report.scenarios {
        for r in s.ok_runs() {
            for g in &r.game {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    s.name, r.seed, g.tick, g.iterations, g.converged, g.planned_fairness
                );
            }
        }
    }
    out
}

fn sigma_heatmap(report: &ExperimentReport) -> String {
    let mut out = String::from("scenario,seed,bin,sigma_k\n");
    for s in &report.scenarios {
        for r in s.ok_runs() {
            for (b, v) in r.sigma_profile.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", s.name, r.seed, b, v);
            }
        }
    }
    out
}

fn metrics(report: &ExperimentReport) -> String {
    let mut out = String::from("scenario,seed,p_succ,df_max,eta_util,trr,fairness\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for s in &report.scenarios {
        for r in s.ok_runs() {
            let m = &r.metrics.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.name,
                r.seed,
                opt(m.p_succ),
                m.df_max,
                opt(m.eta_util),
                m.trr,
                opt(r.metrics.fairness)
            );
        }
    }
    out
}
