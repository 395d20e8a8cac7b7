use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use asyncmc::experiments::{canned, find_canned, run, ExperimentConfig};
use asyncmc::{Error, Schedule};
use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_LIVENESS: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(name = "asyncmc", version, about = "Asynchronous MCMC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config (a JSON file or the name of a canned config).
    Run {
        config: String,
        /// Output directory; defaults to the config's `output_dir`, then `runs/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the canned experiments.
    List {
        /// Also write each canned config as `<name>.json` into this directory.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Check a JSONL trace against the bounded-staleness invariants.
    Validate {
        trace: PathBuf,
        /// Worker count; inferred from the largest worker id when omitted.
        #[arg(long)]
        workers: Option<usize>,
        /// Staleness bound; the tightest bound the trace satisfies when omitted.
        #[arg(long)]
        bound: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run { config, out } => cmd_run(&config, out),
        Command::List { write } => cmd_list(write.as_deref()),
        Command::Validate {
            trace,
            workers,
            bound,
        } => cmd_validate(&trace, workers, bound),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Liveness(_)) => EXIT_LIVENESS,
        Some(Error::Schedule(_)) => EXIT_VIOLATION,
        _ => EXIT_USAGE,
    }
}

fn load_config(arg: &str) -> anyhow::Result<ExperimentConfig> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(cfg) = find_canned(arg) {
            return Ok(cfg);
        }
    }
    ExperimentConfig::from_path(path).with_context(|| format!("loading {arg}"))
}

fn cmd_run(config: &str, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let cfg = load_config(config)?;
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    let outcome = run(&cfg)?;
    outcome.write_to(&dir)?;
    fs_write_config(&dir, &cfg)?;
    println!(
        "{} [{}] {}: {}",
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.criterion,
        outcome.name,
        outcome.headline
    );
    println!("artifacts in {}", dir.display());
    Ok(if outcome.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VIOLATION)
    })
}

fn fs_write_config(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    std::fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    Ok(())
}

fn cmd_list(write: Option<&Path>) -> anyhow::Result<ExitCode> {
    let all = canned();
    let width = all.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &all {
        let tag = if c.smoke {
            format!("{} smoke", c.criterion)
        } else {
            c.criterion.clone()
        };
        println!("{:<width$}  {:<10}  {}", c.name, tag, c.description);
    }
    if let Some(dir) = write {
        std::fs::create_dir_all(dir)?;
        for c in &all {
            std::fs::write(dir.join(format!("{}.json", c.name)), c.to_json() + "\n")?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(
    trace: &Path,
    workers: Option<usize>,
    bound: Option<u64>,
) -> anyhow::Result<ExitCode> {
    let file = File::open(trace).with_context(|| format!("opening {}", trace.display()))?;
    let events = asyncmc::schedules::read_jsonl(BufReader::new(file))?;
    let workers = workers.unwrap_or_else(|| events.iter().map(|e| e.worker + 1).max().unwrap_or(1));
    let mut schedule = Schedule::new(events, workers, 1);
    schedule.staleness_bound = bound.unwrap_or_else(|| schedule.tightest_bound());
    match schedule.validate() {
        Ok(()) => {
            println!(
                "valid: {} events, {} workers, bound {}, max staleness {}",
                schedule.events.len(),
                schedule.workers,
                schedule.staleness_bound,
                schedule.max_staleness()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(v) => Err(Error::Schedule(v).into()),
    }
}
