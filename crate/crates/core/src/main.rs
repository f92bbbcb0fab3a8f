use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ensvbll::benchmarks::Sense;
use ensvbll::runner::config::{bench_suite, RunConfig, BENCH_SUITES};
use ensvbll::runner::replay::replay;
use ensvbll::runner::run;
use ensvbll::Error;

/// Bayesian optimization with ensembles of variational last-layer surrogates.
#[derive(Debug, Parser)]
#[command(name = "ensvbll", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the optimizer from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record failed evaluations and resample instead of aborting.
        #[arg(long)]
        skip_failures: bool,
    },
    /// Run a canned benchmark configuration.
    Bench {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a trace's running best and trigger decisions.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum)]
        sense: Option<SenseArg>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SenseArg {
    Min,
    Max,
}

const CONFIG_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => CONFIG_ERROR,
        _ => RUNTIME_ERROR,
    }
}

fn execute(cfg: RunConfig, out: Option<PathBuf>) -> ExitCode {
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let result = match run(&cfg) {
        Ok(r) => r,
        Err(e) => return fail(error_code(&e), e),
    };
    if let Err(e) = result.persist(&dir) {
        return fail(RUNTIME_ERROR, e);
    }
    let s = &result.summary;
    println!("best value: {}", s.best_value);
    println!("best point: {}", s.best_point);
    println!("evaluations: {}, fine-tunes: {}", s.evaluations, s.finetunes);
    if s.stopped_early {
        println!("candidate pool exhausted before the budget");
    }
    if !s.failures.is_empty() {
        println!("failed evaluations skipped: {}", s.failures.len());
    }
    println!("outputs in {}", dir.display());
    ExitCode::SUCCESS
}

fn replay_command(trace: &Path, sense: Option<SenseArg>) -> ExitCode {
    let sense = sense.map(|s| match s {
        SenseArg::Min => Sense::Minimize,
        SenseArg::Max => Sense::Maximize,
    });
    match replay(trace, sense) {
        Ok(report) => {
            println!(
                "rows: {}, trigger rows checked: {}, best: {}",
                report.rows,
                report.trigger_rows_checked,
                report.best.map_or("none".to_string(), |b| b.to_string())
            );
            if report.ok() {
                println!("trace ok");
                ExitCode::SUCCESS
            } else {
                for issue in &report.issues {
                    eprintln!("{issue}");
                }
                fail(RUNTIME_ERROR, format!("{} problem(s) found", report.issues.len()))
            }
        }
        Err(e) => fail(RUNTIME_ERROR, e),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            skip_failures,
        } => {
            let mut cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(CONFIG_ERROR, e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.skip_failures |= skip_failures;
            execute(cfg, out)
        }
        Command::Bench {
            suite,
            seed,
            budget,
            out,
        } => {
            let Some(mut cfg) = bench_suite(&suite) else {
                return fail(
                    CONFIG_ERROR,
                    format!("unknown suite {suite:?}; available: {}", BENCH_SUITES.join(", ")),
                );
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = budget {
                if b == 0 {
                    return fail(CONFIG_ERROR, "budget must be >= 1");
                }
                cfg.budget = b;
            }
            execute(cfg, out)
        }
        Command::Replay { trace, sense } => replay_command(&trace, sense),
    }
}
