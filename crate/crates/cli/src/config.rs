//! Settings resolution: flags, then environment, then config file, then
//! built-in defaults. Every resolved value remembers where it came from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use toolforge_core::backend::cli::CliAdapterConfig;
use toolforge_core::executor::{ExecutorBackend, ExecutorConfig};
use toolforge_core::workflow::{RunMode, DEFAULT_MAX_ITERATIONS};

use crate::CliError;

pub const ENV_CONFIG: &str = "TOOLFORGE_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::Env => "env",
            Source::File => "file",
            Source::Default => "default",
        })
    }
}

/// The JSON config file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<String>,
    pub backend: Option<String>,
    pub max_iterations: Option<u32>,
    pub toolset: Option<PathBuf>,
    pub merge: Option<bool>,
    pub jobs: Option<usize>,
    pub pricing: Option<PathBuf>,
    pub playbook: Option<PathBuf>,
    pub model: Option<String>,
    pub runs_dir: Option<PathBuf>,
    pub shim: Option<Vec<String>>,
    pub threshold: Option<usize>,
    pub overwrite: Option<bool>,
    #[serde(default)]
    pub executor: Option<ExecutorConfig>,
    /// External agent CLIs by backend id.
    #[serde(default)]
    pub backends: BTreeMap<String, CliAdapterConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::new(format!("config {}: {e}", path.display())))?;
        // Relative paths inside the file are relative to the file.
        let mut cfg: FileConfig =
            serde_json::from_str(&text).map_err(|e| CliError::new(format!("config {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.toolset, &mut cfg.pricing, &mut cfg.playbook, &mut cfg.runs_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct FlagValues {
    pub config: Option<PathBuf>,
    pub mode: Option<String>,
    pub backend: Option<String>,
    pub max_iterations: Option<u32>,
    pub toolset: Option<PathBuf>,
    pub merge: bool,
    pub jobs: Option<usize>,
    pub pricing: Option<PathBuf>,
    pub playbook: Option<PathBuf>,
    pub model: Option<String>,
    pub runs_dir: Option<PathBuf>,
    pub shim: Option<String>,
    pub threshold: Option<usize>,
    pub executor: Option<String>,
    pub overwrite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolved<T> {
    pub value: T,
    pub source: Source,
}

#[derive(Debug)]
pub struct Settings {
    pub mode: Resolved<RunMode>,
    pub backend: Resolved<String>,
    pub max_iterations: Resolved<u32>,
    pub toolset: Resolved<Option<PathBuf>>,
    pub merge: Resolved<bool>,
    pub jobs: Resolved<usize>,
    pub pricing: Resolved<Option<PathBuf>>,
    pub playbook: Resolved<Option<PathBuf>>,
    pub model: Resolved<Option<String>>,
    pub runs_dir: Resolved<PathBuf>,
    pub shim: Resolved<Option<Vec<String>>>,
    pub threshold: Resolved<usize>,
    pub executor_backend: Resolved<ExecutorBackend>,
    pub overwrite: Resolved<bool>,
    pub executor: ExecutorConfig,
    pub backends: BTreeMap<String, CliAdapterConfig>,
}

fn pick<T>(flag: Option<T>, env: Option<T>, file: Option<T>, default: T) -> Resolved<T> {
    match (flag, env, file) {
        (Some(v), _, _) => Resolved { value: v, source: Source::Flag },
        (None, Some(v), _) => Resolved { value: v, source: Source::Env },
        (None, None, Some(v)) => Resolved { value: v, source: Source::File },
        _ => Resolved { value: default, source: Source::Default },
    }
}

fn pick_opt<T>(flag: Option<T>, env: Option<T>, file: Option<T>) -> Resolved<Option<T>> {
    pick(flag.map(Some), env.map(Some), file.map(Some), None)
}

fn parsed<T: std::str::FromStr>(name: &str, raw: Option<String>) -> Result<Option<T>, CliError>
where
    T::Err: fmt::Display,
{
    raw.map(|s| s.parse::<T>().map_err(|e| CliError::new(format!("{name}={s}: {e}")))).transpose()
}

fn truthy(name: &str, raw: Option<String>) -> Result<Option<bool>, CliError> {
    raw.map(|s| match s.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        _ => Err(CliError::new(format!("{name}={s}: expected a boolean"))),
    })
    .transpose()
}

fn split_command(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

impl Settings {
    /// Resolves settings; `env` looks up environment variables.
    pub fn resolve(flags: &FlagValues, env: &dyn Fn(&str) -> Option<String>) -> Result<Self, CliError> {
        let config_path = flags.config.clone().or_else(|| env(ENV_CONFIG).map(PathBuf::from));
        let file = match config_path {
            Some(p) => FileConfig::load(&p)?,
            None => FileConfig::default(),
        };
        let e = |k: &str| env(k).filter(|v| !v.is_empty());

        let mode_flag = parsed::<RunMode>("--mode", flags.mode.clone())?;
        let mode_env = parsed::<RunMode>("TOOLFORGE_MODE", e("TOOLFORGE_MODE"))?;
        let mode_file = parsed::<RunMode>("mode", file.mode.clone())?;
        let exec_flag = parsed::<ExecutorBackend>("--executor", flags.executor.clone())?;
        let exec_env = parsed::<ExecutorBackend>("TOOLFORGE_EXECUTOR", e("TOOLFORGE_EXECUTOR"))?;
        let mut executor = file.executor.clone().unwrap_or_default();
        let executor_backend = pick(exec_flag, exec_env, file.executor.as_ref().map(|x| x.backend), ExecutorBackend::Local);
        executor.backend = executor_backend.value;

        let settings = Settings {
            mode: pick(mode_flag, mode_env, mode_file, RunMode::ZeroShot),
            backend: pick(flags.backend.clone(), e("TOOLFORGE_BACKEND"), file.backend.clone(), "mock".into()),
            max_iterations: pick(
                flags.max_iterations,
                parsed("TOOLFORGE_MAX_ITERATIONS", e("TOOLFORGE_MAX_ITERATIONS"))?,
                file.max_iterations,
                DEFAULT_MAX_ITERATIONS,
            ),
            toolset: pick_opt(flags.toolset.clone(), e("TOOLFORGE_TOOLSET").map(PathBuf::from), file.toolset.clone()),
            merge: pick(flags.merge.then_some(true), truthy("TOOLFORGE_MERGE", e("TOOLFORGE_MERGE"))?, file.merge, false),
            jobs: pick(flags.jobs, parsed("TOOLFORGE_JOBS", e("TOOLFORGE_JOBS"))?, file.jobs, 1),
            pricing: pick_opt(flags.pricing.clone(), e("TOOLFORGE_PRICING").map(PathBuf::from), file.pricing.clone()),
            playbook: pick_opt(flags.playbook.clone(), e("TOOLFORGE_PLAYBOOK").map(PathBuf::from), file.playbook.clone()),
            model: pick_opt(flags.model.clone(), e("TOOLFORGE_MODEL"), file.model.clone()),
            runs_dir: pick(
                flags.runs_dir.clone(),
                e("TOOLFORGE_RUNS_DIR").map(PathBuf::from),
                file.runs_dir.clone(),
                PathBuf::from("runs"),
            ),
            shim: pick_opt(
                flags.shim.as_deref().map(split_command),
                e("TOOLFORGE_SHIM").as_deref().map(split_command),
                file.shim.clone(),
            ),
            threshold: pick(
                flags.threshold,
                parsed("TOOLFORGE_THRESHOLD", e("TOOLFORGE_THRESHOLD"))?,
                file.threshold,
                toolforge_core::optimizer::DEFAULT_THRESHOLD,
            ),
            executor_backend,
            overwrite: pick(flags.overwrite.then_some(true), truthy("TOOLFORGE_OVERWRITE", e("TOOLFORGE_OVERWRITE"))?, file.overwrite, false),
            executor,
            backends: file.backends,
        };
        if settings.max_iterations.value == 0 {
            return Err(CliError::new("max iterations must be at least 1"));
        }
        if settings.jobs.value == 0 {
            return Err(CliError::new("jobs must be at least 1"));
        }
        Ok(settings)
    }

    /// `name = value (source)` lines for display.
    pub fn describe(&self) -> Vec<String> {
        fn line<T: fmt::Debug>(name: &str, r: &Resolved<T>) -> String {
            format!("{name} = {:?} ({})", r.value, r.source)
        }
        vec![
            format!("mode = {} ({})", self.mode.value, self.mode.source),
            line("backend", &self.backend),
            line("max_iterations", &self.max_iterations),
            line("toolset", &self.toolset),
            line("merge", &self.merge),
            line("jobs", &self.jobs),
            line("pricing", &self.pricing),
            line("playbook", &self.playbook),
            line("model", &self.model),
            line("runs_dir", &self.runs_dir),
            line("shim", &self.shim),
            line("threshold", &self.threshold),
            line("executor", &self.executor_backend),
            line("overwrite", &self.overwrite),
        ]
    }
}
