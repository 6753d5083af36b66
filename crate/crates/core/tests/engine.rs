use std::fs;
use std::path::{Path, PathBuf};

use qkd_scada::engine::experiment::{aggregate_runs, run_experiment, RunStatus};
use qkd_scada::engine::{replay_metrics, run_scenario, EngineError, Policy, Scenario, Suite, Trace};
use qkd_scada::protocol::transport::TransportKind;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> Scenario {
    Scenario::load(&scenarios().join(name)).unwrap()
}

fn short(name: &str, duration: f64) -> Scenario {
    let mut sc = load(name);
    sc.duration = duration;
    sc
}

#[test]
fn shipped_scenarios_validate() {
    for f in ["s1.toml", "s2.toml", "s3.toml", "s4.toml", "s5.toml"] {
        load(f).validate().unwrap();
    }
    assert_eq!(Suite::load(&scenarios().join("suite39.toml")).unwrap().scenarios.len(), 3);
    assert_eq!(Suite::load(&scenarios().join("suite118.toml")).unwrap().scenarios.len(), 2);
}

#[test]
fn one_tick_run() {
    let mut sc = load("s3.toml");
    sc.duration = sc.dt;
    let out = run_scenario(&sc, 1).unwrap();
    assert_eq!(out.trace.rows.len(), 1);
}

#[test]
fn same_seed_same_trace_bytes() {
    let sc = short("s5.toml", 60.0);
    let a = run_scenario(&sc, 9).unwrap();
    let b = run_scenario(&sc, 9).unwrap();
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    assert_eq!(a.summary, b.summary);
    let c = run_scenario(&sc, 10).unwrap();
    assert_ne!(a.trace.to_csv(), c.trace.to_csv());
}

#[test]
fn replayed_metrics_match_exactly() {
    for f in ["s1.toml", "s2.toml", "s3.toml", "s4.toml", "s5.toml"] {
        let out = run_scenario(&short(f, 120.0), 3).unwrap();
        let text = out.trace.to_csv();
        let parsed = Trace::from_csv(&text).unwrap();
        assert_eq!(parsed.to_csv(), text, "{f}");
        assert_eq!(replay_metrics(&parsed).unwrap(), out.summary.metrics, "{f}");
    }
}

#[test]
fn paired_seed_generation_beats_static_pool() {
    for seed in 1..=5 {
        let s1 = run_scenario(&short("s1.toml", 300.0), seed).unwrap();
        let s2 = run_scenario(&short("s2.toml", 300.0), seed).unwrap();
        assert!(
            s2.summary.metrics.metrics.eta_util >= s1.summary.metrics.metrics.eta_util,
            "seed {seed}"
        );
    }
}

#[test]
fn unstressed_s3_is_perfect() {
    let mut sc = short("s3.toml", 120.0);
    sc.disturbance.rate = 0.0;
    sc.link.break_rate = 0.0;
    sc.pool.initial = 3_000_000;
    sc.pool.k_cap = 10_000_000;
    let m = run_scenario(&sc, 2).unwrap().summary.metrics.metrics;
    assert_eq!(m.df_max, 0.0);
    assert_eq!(m.p_succ, Some(1.0));
    assert_eq!(m.trr, 0.0);
}

#[test]
fn static_pool_drains_on_schedule() {
    let mut sc = short("s1.toml", 300.0);
    sc.link.break_rate = 0.0;
    let demand: f64 = sc.chains().iter().map(|c| c.demand()).sum();
    let expected = sc.pool.initial as f64 / demand;
    let mut onsets = Vec::new();
    for seed in 1..=10 {
        let out = run_scenario(&sc, seed).unwrap();
        let first = out
            .trace
            .rows
            .iter()
            .find(|r| r.refusals > 0)
            .map(|r| r.t)
            .expect("pool drains within the run");
        onsets.push(first);
    }
    let mean = onsets.iter().sum::<f64>() / onsets.len() as f64;
    assert!((mean - expected).abs() < 0.1 * expected, "onset {mean} vs {expected}");
}

#[test]
fn policy_containment() {
    let s1 = run_scenario(&short("s1.toml", 200.0), 4).unwrap();
    let first = &s1.trace.rows[0].states;
    assert!(s1.trace.rows.iter().all(|r| &r.states == first));

    let s2 = run_scenario(&short("s2.toml", 200.0), 4).unwrap();
    let initial: Vec<u8> = load("s2.toml").chains.iter().map(|c| c.state as u8).collect();
    for r in &s2.trace.rows {
        for (s, i) in r.states.bytes().zip(&initial) {
            let s = s - b'0';
            // only the encryption mode may move, never to off
            assert!(s == *i || (*i == 2 && s == 1), "tick {}: {}", r.tick, r.states);
        }
    }
}

#[test]
fn refusals_are_failed_tasks() {
    for f in ["s1.toml", "s2.toml", "s4.toml"] {
        let out = run_scenario(&short(f, 200.0), 6).unwrap();
        for r in &out.trace.rows {
            assert!(r.refusals <= r.triggers - r.successes, "{f} tick {}", r.tick);
            let logged = r.events.iter().filter(|e| e.starts_with("refuse:")).count() as u32;
            assert_eq!(logged, r.refusals);
        }
    }
}

#[test]
fn game_runs_every_decision_interval() {
    let sc = short("s5.toml", 30.0);
    let out = run_scenario(&sc, 2).unwrap();
    assert!(!out.summary.game.is_empty());
    assert_eq!(
        out.summary.game.len() as u64 + out.summary.infeasible_decisions,
        out.summary.decisions
    );
    assert!(out.summary.metrics.fairness.is_some());
}

#[test]
fn single_run_experiment_aggregates_equal_the_run() {
    let sc = short("s3.toml", 60.0);
    let r = run_experiment("one", &[sc.clone()], 1, None).unwrap();
    let s = &r.scenarios[0];
    let run = run_scenario(&sc, s.runs[0].seed).unwrap();
    let a = s.aggregates["p_succ"];
    assert_eq!(a.n, 1);
    assert_eq!(a.mean, run.summary.metrics.metrics.p_succ.unwrap());
    assert_eq!(a.min, a.max);
    assert_eq!(a.std, 0.0);
}

#[test]
fn report_aggregates_recompute_and_roundtrip() {
    let scs = [short("s4.toml", 60.0), short("s5.toml", 60.0)];
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment("pair", &scs, 4, Some(dir.path())).unwrap();
    for s in &r.scenarios {
        assert_eq!(s.runs.len(), 4);
        assert!(s.runs.windows(2).all(|w| w[0].seed < w[1].seed));
        assert!(s.runs.iter().all(|x| x.status == RunStatus::Ok));
        assert_eq!(aggregate_runs(&s.runs), s.aggregates);
    }
    let back = qkd_scada::engine::ExperimentReport::from_json(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 8);
}

#[test]
fn udp_transport_matches_simulated_channel() {
    let sim = short("s3.toml", 20.0);
    let mut udp = sim.clone();
    udp.transport = TransportKind::Udp;
    let a = run_scenario(&sim, 8).unwrap();
    match run_scenario(&udp, 8) {
        Ok(b) => assert_eq!(a.trace.to_csv(), b.trace.to_csv()),
        // sandboxes without loopback sockets
        Err(EngineError::Runtime(msg)) if msg.starts_with("transport") => {}
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn validation_rejects_before_running() {
    let mut sc = load("s5.toml");
    sc.game = None;
    let e = run_scenario(&sc, 1).unwrap_err();
    assert!(matches!(e, EngineError::Validation(_)));
    assert_eq!(e.exit_code(), 2);

    let mut sc = load("s3.toml");
    sc.dt = 0.0;
    assert!(matches!(sc.validate(), Err(EngineError::Validation(_))));

    let mut sc = load("s3.toml");
    sc.chains[0].path = vec!["cc".into(), "gen1".into()];
    assert!(matches!(sc.validate(), Err(EngineError::Validation(_))));

    let mut sc = load("s3.toml");
    sc.scheduler = None;
    assert!(sc.validate().is_err());
    assert_eq!(load("s3.toml").policy, Policy::S3);
}

#[test]
fn extends_merges_tables_and_detects_cycles() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(scenarios().join("base39.toml")).unwrap();
    fs::write(dir.path().join("base.toml"), base).unwrap();
    fs::write(
        dir.path().join("child.toml"),
        "extends = \"base.toml\"\nname = \"child\"\npolicy = \"s2\"\n[link]\nmean_rate = 1234.0\n",
    )
    .unwrap();
    let sc = Scenario::load(&dir.path().join("child.toml")).unwrap();
    assert_eq!(sc.name, "child");
    assert_eq!(sc.policy, Policy::S2);
    assert_eq!(sc.link.mean_rate, 1234.0);
    assert_eq!(sc.link.photon_rate, 1.0e6);

    fs::write(dir.path().join("a.toml"), "extends = \"b.toml\"\n").unwrap();
    fs::write(dir.path().join("b.toml"), "extends = \"a.toml\"\n").unwrap();
    assert!(Scenario::load(&dir.path().join("a.toml")).is_err());
}

#[test]
fn ledger_and_trace_columns_are_consistent() {
    let out = run_scenario(&short("s2.toml", 200.0), 5).unwrap();
    let h = out.trace.header.as_ref().unwrap();
    let mut level = h.initial_bits;
    for r in &out.trace.rows {
        assert_eq!(r.consumed, r.consumed_tso + r.consumed_dso);
        level = level + r.generated.min(u64::MAX - level) - r.consumed;
        assert!(r.k <= level, "tick {}", r.tick);
        level = r.k;
        assert!(r.ci_lo <= r.k_hat && r.k_hat <= r.ci_hi);
    }
}
