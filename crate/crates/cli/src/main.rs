//! Command line driver for marketplace experiments.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 when a method
//! cannot handle the number of clients, 4 for internal failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modelmarket::experiment::{self, ExperimentConfig, ExperimentError, ExperimentReport};
use modelmarket::shapley::{self, Method};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "modelmarket", version, about = "Federated model marketplace simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Comma-separated subset of sfsv (or exact), single-cal, multi-cal, afs.
        #[arg(long, env = "MODELMARKET_METHODS", value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long, env = "MODELMARKET_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "MODELMARKET_OUT_DIR", default_value = "out")]
        out_dir: PathBuf,
        /// Leading zero bits required of block hashes.
        #[arg(long, env = "MODELMARKET_DIFFICULTY")]
        difficulty: Option<u32>,
    },
    /// Rank the methods of a finished run by D_max, then time.
    Rank {
        /// Output directory of a previous `run`.
        dir: PathBuf,
    },
    /// Permutations needed for error at most epsilon with probability
    /// 1 - alpha when marginals span `range`.
    Bound {
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        range: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::Run {
            config,
            methods,
            seed,
            out_dir,
            difficulty,
        } => run(&config, methods, seed, &out_dir, difficulty),
        Command::Rank { dir } => rank(&dir),
        Command::Bound {
            epsilon,
            alpha,
            range,
        } => {
            let k = shapley::min_permutations(epsilon, alpha, range)
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            println!("{k}");
            Ok(())
        }
    }
}

fn run(
    path: &Path,
    methods: Option<Vec<Method>>,
    seed: Option<u64>,
    out_dir: &Path,
    difficulty: Option<u32>,
) -> Result<(), ExperimentError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(m) = methods {
        cfg = cfg.with_methods(m);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = difficulty {
        cfg.market.difficulty = d;
    }
    let outcome = experiment::run_experiment(&cfg)?;
    outcome.write_to(out_dir)?;

    let r = &outcome.report;
    println!(
        "{}: {:?} clients={} accuracy={:.4} deal={:?} height={} gas={}",
        r.name, r.scenario, r.num_clients, r.final_accuracy, r.deal_state, r.chain_height, r.gas.gas
    );
    for m in &r.methods {
        let d = m.d_max.map_or("-".to_string(), |d| format!("{d:.4}"));
        println!(
            "  {:<10} {:>10.1} ms  d_max {d:>7}  {:?}",
            m.method.name(),
            m.wall_time_ms,
            m.phi_normalized.as_ref().unwrap_or(&m.phi)
        );
    }
    if let Some(s) = &r.settlement {
        for (seller, amount) in &s.payouts {
            println!("  pay {seller} {amount}");
        }
        println!("  refund {}", s.refund);
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn rank(dir: &Path) -> Result<(), ExperimentError> {
    let io = |p: &Path, e: &dyn std::fmt::Display| ExperimentError::Io {
        path: p.to_path_buf(),
        message: e.to_string(),
    };
    let summary = dir.join("summary.json");
    let text = std::fs::read_to_string(&summary).map_err(|e| io(&summary, &e))?;
    let mut report: ExperimentReport =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", summary.display())))?;
    // summaries carry no timings; pick them up from the side file if present
    let timings = dir.join("timings.jsonl");
    if let Ok(t) = std::fs::read_to_string(&timings) {
        for line in t.lines().filter(|l| !l.trim().is_empty()) {
            let t: Timing = serde_json::from_str(line).map_err(|e| io(&timings, &e))?;
            if let Some(m) = report.methods.iter_mut().find(|m| m.method == t.method) {
                m.wall_time_ms = t.wall_time_ms;
            }
        }
    }
    println!("{:<10} {:>12} {:>8}", "method", "time_ms", "d_max");
    for row in experiment::compare_methods(&report)? {
        println!("{:<10} {:>12.1} {:>8.4}", row.method.name(), row.wall_time_ms, row.d_max);
    }
    Ok(())
}

#[derive(Deserialize)]
struct Timing {
    method: Method,
    wall_time_ms: f64,
}
