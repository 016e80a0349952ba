//! `toolforge`: solve tasks, run curricula and benchmarks, tidy toolsets
//! and score runs.
//!
//! Exit codes: 0 success, 1 error, 2 iteration budget exhausted.

mod bench;
mod commands;
mod config;
mod runtime;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{FlagValues, Settings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success,
    Error,
    Budget,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(match e {
            Exit::Success => 0,
            Exit::Error => 1,
            Exit::Budget => 2,
        })
    }
}

#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        Self(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "toolforge", version, about = "Task-driven tool forging with a persistent toolset")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Each also reads `TOOLFORGE_<NAME>`
/// from the environment and the matching key of the config file.
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config file (also TOOLFORGE_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Operating mode: zs, tr or eo.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Agent backend id: `mock` or one defined in the config file.
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    max_iterations: Option<u32>,
    /// Toolset directory: the seed for tool reuse, or the curriculum's
    /// persistent toolset.
    #[arg(long, global = true)]
    toolset: Option<PathBuf>,
    /// Merge near-duplicate tools during optimization.
    #[arg(long, global = true)]
    merge: bool,
    /// Parallel benchmark cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Pricing table (JSON array of entries).
    #[arg(long, global = true)]
    pricing: Option<PathBuf>,
    /// Pricing model name used to cost sessions.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Playbook for the mock backend.
    #[arg(long, global = true)]
    playbook: Option<PathBuf>,
    /// Where workspaces are created.
    #[arg(long, global = true)]
    runs_dir: Option<PathBuf>,
    /// Command that runs a tool from its manifest path, e.g. `python3 shim.py`.
    #[arg(long, global = true)]
    shim: Option<String>,
    /// Largest directory the optimizer leaves alone.
    #[arg(long, global = true)]
    threshold: Option<usize>,
    /// Job executor: local or slurm.
    #[arg(long, global = true)]
    executor: Option<String>,
    /// Replace existing workspaces.
    #[arg(long, global = true)]
    overwrite: bool,
}

impl Common {
    fn flags(&self) -> FlagValues {
        FlagValues {
            config: self.config.clone(),
            mode: self.mode.clone(),
            backend: self.backend.clone(),
            max_iterations: self.max_iterations,
            toolset: self.toolset.clone(),
            merge: self.merge,
            jobs: self.jobs,
            pricing: self.pricing.clone(),
            playbook: self.playbook.clone(),
            model: self.model.clone(),
            runs_dir: self.runs_dir.clone(),
            shim: self.shim.clone(),
            threshold: self.threshold,
            executor: self.executor.clone(),
            overwrite: self.overwrite,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve one task.
    Solve {
        task: PathBuf,
        /// Print the resolved settings and stage plan without running.
        #[arg(long)]
        dry_run: bool,
    },
    /// Solve an ordered list of tasks against one persistent toolset.
    Curriculum {
        tasks: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
    /// Run a (backend × mode × repetition) matrix and emit tables.
    Bench {
        matrix: PathBuf,
        /// Output directory; defaults to <runs-dir>/bench.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Submit jobs to the configured scheduler instead of running them
        /// as local subprocesses.
        #[arg(long)]
        submit: bool,
    },
    /// Split oversized toolset directories and optionally merge duplicates.
    Optimize { toolset: PathBuf },
    /// Score one run's results against a rubric.
    Score { results: PathBuf, rubric: PathBuf },
}

fn run(cli: Cli) -> Result<Exit, CliError> {
    if let Command::Score { results, rubric } = &cli.command {
        return commands::score(results, rubric);
    }
    let settings = Settings::resolve(&cli.common.flags(), &|k| std::env::var(k).ok())?;
    match &cli.command {
        Command::Solve { task, dry_run } => commands::solve(&settings, task, *dry_run),
        Command::Curriculum { tasks, dry_run } => commands::curriculum(&settings, tasks, *dry_run),
        Command::Bench { matrix, out, submit } => bench::bench(&settings, matrix, out.as_deref(), *submit),
        Command::Optimize { toolset } => commands::optimize(&settings, toolset),
        Command::Score { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code.into(),
        Err(e) => {
            eprintln!("error: {e}");
            Exit::Error.into()
        }
    }
}
