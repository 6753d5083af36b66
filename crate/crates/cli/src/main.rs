//! `qkdsim`: run scenarios and experiments, replay traces, and poke at Q3P
//! frames from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qkd_scada::engine::experiment::{run_experiment, trace_file_name, ExperimentReport};
use qkd_scada::engine::plot::plot_data;
use qkd_scada::engine::{replay_metrics, run_scenario, EngineError, Scenario, Suite, Trace};
use qkd_scada::protocol::{decode_frame, encode_frame, AsduMessage, KeyRing, Q3pMode};

#[derive(Parser)]
#[command(name = "qkdsim", version, about = "QKD-secured SCADA co-simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario for one seed and write its trace and summary.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a suite file (or a single scenario) over several seeds.
    Experiment {
        scenarios: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write every run's trace.
        #[arg(long)]
        traces: bool,
    },
    /// Recompute metrics from a persisted trace.
    ReplayMetrics { trace: PathBuf },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Emit plot-ready CSV series from an experiment report.
    PlotData {
        report: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Encode or decode a single Q3P frame.
    Frame {
        #[command(subcommand)]
        op: FrameOp,
    },
}

#[derive(Subcommand)]
enum FrameOp {
    Encode {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Key block, hex.
        #[arg(long)]
        key: String,
        #[arg(long)]
        index: u64,
        /// ASDU bytes, hex.
        asdu: String,
    },
    Decode {
        #[arg(long)]
        key: String,
        #[arg(long)]
        index: u64,
        /// Frame bytes, hex.
        frame: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Aes,
    Otp,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> EngineError {
    EngineError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<(), EngineError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn hex_arg(what: &str, s: &str) -> Result<Vec<u8>, EngineError> {
    hex::decode(s.trim()).map_err(|e| EngineError::Validation(format!("{what}: {e}")))
}

fn dispatch(cmd: Cmd) -> Result<(), EngineError> {
    match cmd {
        Cmd::Simulate { scenario, seed, out } => {
            let sc = Scenario::load(&scenario)?;
            sc.validate()?;
            let seed = seed.unwrap_or_else(|| sc.seeds_for(1)[0]);
            let run = run_scenario(&sc, seed)?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            write(&out.join(trace_file_name(&sc.name, seed)), &run.trace.to_csv())?;
            let summary = serde_json::to_string_pretty(&run.summary).expect("summary serializes");
            write(&out.join(format!("summary_{}_{seed}.json", sc.name)), &summary)?;
            println!("{summary}");
        }
        Cmd::Experiment {
            scenarios,
            runs,
            out,
            traces,
        } => {
            // A suite file lists scenarios; anything else is one scenario.
            let (name, list, default_runs) = match Suite::load(&scenarios) {
                Ok(s) => (s.name, s.scenarios, s.runs),
                Err(_) => {
                    let sc = Scenario::load(&scenarios)?;
                    (sc.name.clone(), vec![sc], None)
                }
            };
            let runs = runs.or(default_runs).unwrap_or(30);
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let trace_dir = traces.then(|| out.join("traces"));
            let report = run_experiment(&name, &list, runs, trace_dir.as_deref())?;
            write(&out.join("report.json"), &report.to_json())?;
            print_report(&report);
            if report.scenarios.iter().any(|s| s.failed() > 0) {
                return Err(EngineError::Runtime("some runs failed; see report.json".into()));
            }
        }
        Cmd::ReplayMetrics { trace } => {
            let text = fs::read_to_string(&trace).map_err(|e| io_err(&trace, e))?;
            let m = replay_metrics(&Trace::from_csv(&text)?)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        }
        Cmd::Validate { scenario } => {
            let sc = Scenario::load(&scenario)?;
            sc.validate()?;
            println!("ok {} ({}, {} ticks, digest {})", sc.name, sc.policy.as_str(), sc.ticks(), sc.digest());
        }
        Cmd::PlotData { report, out, bins } => {
            let text = fs::read_to_string(&report).map_err(|e| io_err(&report, e))?;
            let report = ExperimentReport::from_json(&text)?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            for (file, csv) in plot_data(&report, bins) {
                write(&out.join(&file), &csv)?;
                println!("{}", out.join(file).display());
            }
        }
        Cmd::Frame { op } => frame(op)?,
    }
    Ok(())
}

fn frame(op: FrameOp) -> Result<(), EngineError> {
    let bad = |e: qkd_scada::protocol::FrameError| EngineError::Validation(e.to_string());
    match op {
        FrameOp::Encode {
            mode,
            key,
            index,
            asdu,
        } => {
            let asdu = AsduMessage::from_bytes(&hex_arg("asdu", &asdu)?).map_err(bad)?;
            let mode = match mode {
                ModeArg::Aes => Q3pMode::Aes,
                ModeArg::Otp => Q3pMode::Otp,
            };
            let bytes = encode_frame(&asdu, mode, &hex_arg("key", &key)?, index).map_err(bad)?;
            println!("{}", hex::encode(bytes));
        }
        FrameOp::Decode { key, index, frame } => {
            let mut ring = KeyRing::new();
            ring.insert(index, hex_arg("key", &key)?);
            let asdu = decode_frame(&hex_arg("frame", &frame)?, &mut ring).map_err(bad)?;
            println!("{}", hex::encode(asdu.to_bytes().map_err(bad)?));
        }
    }
    Ok(())
}

fn print_report(report: &ExperimentReport) {
    println!("suite {}", report.suite);
    for s in &report.scenarios {
        let fmt = |m: &str| {
            s.aggregates
                .get(m)
                .map_or("-".to_string(), |a| format!("{:.4}±{:.4}", a.mean, a.std))
        };
        println!(
            "  {:<16} {} runs={} failed={} p_succ={} df_max={} eta_util={} trr={} fairness={}",
            s.name,
            s.policy,
            s.runs.len(),
            s.failed(),
            fmt("p_succ"),
            fmt("df_max"),
            fmt("eta_util"),
            fmt("trr"),
            fmt("fairness")
        );
    }
}
