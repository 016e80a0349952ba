//! Command execution for agent scripts and tools.
//!
//! Jobs run either as local subprocesses or through a batch scheduler. Both
//! paths write `logs/<YYYYMMDD_HHMMSS>_<label>.out` / `.err` and produce exactly
//! one [`JobResult`] per submitted [`JobRequest`].

mod local;
mod slurm;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeDelta, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use local::LocalExecutor;
pub use slurm::{render_slurm_script, SchedulerConfig, SlurmExecutor};

/// Exit code reported for jobs killed by the executor's timeout.
pub const TIMEOUT_EXIT_CODE: i32 = 124;

/// Environment variable selecting the executor backend (`local` or `slurm`).
pub const BACKEND_ENV_VAR: &str = "TOOLFORGE_EXECUTOR";

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid job request: {0}")]
    InvalidRequest(String),
    #[error("failed to spawn `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("scheduler rejected submission: {0}")]
    Submit(String),
    #[error("job {job_id} did not reach a terminal state within {waited:?}")]
    PollTimeout { job_id: String, waited: Duration },
    #[error("log file not found: {0}")]
    NotFound(PathBuf),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Resource request used by the batch scheduler. Ignored by local execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    pub cpus: u32,
    pub mem_mb: u64,
    #[serde(with = "duration_secs")]
    pub time_limit: Duration,
}

impl Default for Resources {
    fn default() -> Self {
        Self {
            cpus: 1,
            mem_mb: 4096,
            time_limit: Duration::from_secs(3600),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JobRequest {
    pub command: Vec<String>,
    pub working_dir: PathBuf,
    pub env_overrides: BTreeMap<String, String>,
    pub timeout: Duration,
    pub resources: Option<Resources>,
    /// Stem used in log file names.
    pub label: String,
    /// Bytes written to the process's standard input, if any.
    pub stdin: Option<Vec<u8>>,
}

impl JobRequest {
    pub fn new(command: Vec<String>, working_dir: impl Into<PathBuf>, label: impl Into<String>) -> Self {
        Self {
            command,
            working_dir: working_dir.into(),
            env_overrides: BTreeMap::new(),
            timeout: Duration::from_secs(600),
            resources: None,
            label: label.into(),
            stdin: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_stdin(mut self, bytes: Vec<u8>) -> Self {
        self.stdin = Some(bytes);
        self
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env_overrides.insert(key.into(), value.into());
        self
    }

    pub fn with_resources(mut self, resources: Resources) -> Self {
        self.resources = Some(resources);
        self
    }

    pub(crate) fn validate(&self) -> Result<(), ExecError> {
        if self.command.is_empty() || self.command[0].is_empty() {
            return Err(ExecError::InvalidRequest("command is empty".into()));
        }
        if self.timeout.is_zero() {
            return Err(ExecError::InvalidRequest("timeout must be positive".into()));
        }
        if !is_valid_label(&self.label) {
            return Err(ExecError::InvalidRequest(format!(
                "label `{}` must match [A-Za-z0-9_.-]+",
                self.label
            )));
        }
        if !self.working_dir.is_dir() {
            return Err(ExecError::InvalidRequest(format!(
                "working directory {} does not exist",
                self.working_dir.display()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub exit_code: i32,
    pub stdout_log: PathBuf,
    pub stderr_log: PathBuf,
    #[serde(with = "duration_millis")]
    pub wall_time: Duration,
    pub timed_out: bool,
}

impl JobResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0 && !self.timed_out
    }

    pub fn read_stdout(&self) -> io::Result<Vec<u8>> {
        fs::read(&self.stdout_log)
    }

    pub fn read_stderr(&self) -> io::Result<Vec<u8>> {
        fs::read(&self.stderr_log)
    }
}

/// Something that can run a [`JobRequest`] to completion.
///
/// `submit` blocks until the job is terminal. Retries are the caller's
/// business.
pub trait JobExecutor: Send + Sync {
    fn submit(&self, job: &JobRequest, logs_dir: &Path) -> Result<JobResult, ExecError>;
}

impl<T: JobExecutor + ?Sized> JobExecutor for Arc<T> {
    fn submit(&self, job: &JobRequest, logs_dir: &Path) -> Result<JobResult, ExecError> {
        (**self).submit(job, logs_dir)
    }
}

impl<T: JobExecutor + ?Sized> JobExecutor for &T {
    fn submit(&self, job: &JobRequest, logs_dir: &Path) -> Result<JobResult, ExecError> {
        (**self).submit(job, logs_dir)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExecutorBackend {
    #[default]
    Local,
    Slurm,
}

impl std::str::FromStr for ExecutorBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Ok(Self::Local),
            "slurm" => Ok(Self::Slurm),
            other => Err(format!("unknown executor backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub backend: ExecutorBackend,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    /// Benchmark runs simulate scheduler submission with local subprocesses
    /// unless this is cleared.
    #[serde(default = "default_true")]
    pub force_local: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            backend: ExecutorBackend::Local,
            scheduler: SchedulerConfig::default(),
            force_local: true,
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        if self.backend == ExecutorBackend::Slurm && self.scheduler.poll_interval.is_zero() {
            return Err(ExecError::InvalidRequest(
                "poll_interval must be positive for the slurm backend".into(),
            ));
        }
        Ok(())
    }

    /// The backend that will actually run jobs.
    pub fn effective_backend(&self) -> ExecutorBackend {
        if self.force_local {
            ExecutorBackend::Local
        } else {
            self.backend
        }
    }

    pub fn build(&self) -> Result<Arc<dyn JobExecutor>, ExecError> {
        self.validate()?;
        Ok(match self.effective_backend() {
            ExecutorBackend::Local => Arc::new(LocalExecutor::new()),
            ExecutorBackend::Slurm => Arc::new(SlurmExecutor::new(self.scheduler.clone())),
        })
    }
}

/// Paths of the two log files belonging to one job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogPaths {
    pub stdout: PathBuf,
    pub stderr: PathBuf,
}

pub fn is_valid_label(label: &str) -> bool {
    !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

pub fn log_stem(at: DateTime<Utc>, label: &str) -> String {
    format!("{}_{label}", at.format("%Y%m%d_%H%M%S"))
}

/// Claims a fresh pair of log files for `label`.
///
/// The `.out` file is created with `create_new`, so concurrent jobs never share
/// a log. When the current second is taken the timestamp is advanced one second
/// at a time, which keeps names ordered and inside the
/// `YYYYMMDD_HHMMSS_<label>` pattern.
pub fn allocate_logs(logs_dir: &Path, label: &str, now: DateTime<Utc>) -> io::Result<LogPaths> {
    fs::create_dir_all(logs_dir)?;
    let mut at = now;
    loop {
        let stem = log_stem(at, label);
        let stdout = logs_dir.join(format!("{stem}.out"));
        let stderr = logs_dir.join(format!("{stem}.err"));
        match OpenOptions::new().write(true).create_new(true).open(&stdout) {
            Ok(_) => {
                OpenOptions::new()
                    .write(true)
                    .create(true)
                    .truncate(true)
                    .open(&stderr)?;
                return Ok(LogPaths { stdout, stderr });
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                at += TimeDelta::seconds(1);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Returns the last `n` lines of a log file, in order.
pub fn tail_log(path: &Path, n: usize) -> Result<String, ExecError> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ExecError::NotFound(path.to_path_buf()),
        _ => ExecError::Io(e),
    })?;
    let mut window = std::collections::VecDeque::with_capacity(n.min(4096));
    for line in BufReader::new(file).lines() {
        let line = line?;
        if window.len() == n {
            window.pop_front();
        }
        if n > 0 {
            window.push_back(line);
        }
    }
    let mut out = window.into_iter().collect::<Vec<_>>().join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    Ok(out)
}

pub(crate) mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}

pub(crate) mod duration_millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}
