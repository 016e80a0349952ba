use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use chrono::Utc;

use super::{allocate_logs, ExecError, JobExecutor, JobRequest, JobResult, TIMEOUT_EXIT_CODE};

const POLL_STEP: Duration = Duration::from_millis(5);

/// Runs jobs as child processes of the engine.
///
/// Both output streams go straight to their log files, so a chatty process
/// can never block on a full pipe.
#[derive(Debug, Default, Clone)]
pub struct LocalExecutor;

impl LocalExecutor {
    pub fn new() -> Self {
        Self
    }
}

impl JobExecutor for LocalExecutor {
    fn submit(&self, job: &JobRequest, logs_dir: &Path) -> Result<JobResult, ExecError> {
        job.validate()?;
        let logs = allocate_logs(logs_dir, &job.label, Utc::now())?;
        let stdout = OpenOptions::new().append(true).open(&logs.stdout)?;
        let stderr = OpenOptions::new().append(true).open(&logs.stderr)?;

        let mut cmd = Command::new(&job.command[0]);
        cmd.args(&job.command[1..])
            .current_dir(&job.working_dir)
            .envs(&job.env_overrides)
            .stdout(Stdio::from(stdout))
            .stderr(Stdio::from(stderr))
            .stdin(if job.stdin.is_some() {
                Stdio::piped()
            } else {
                Stdio::null()
            });

        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|source| ExecError::Spawn {
            program: job.command[0].clone(),
            source,
        })?;

        let feeder = match (job.stdin.clone(), child.stdin.take()) {
            (Some(bytes), Some(mut pipe)) => Some(thread::spawn(move || {
                // a tool that exits without reading stdin closes the pipe early
                let _ = pipe.write_all(&bytes);
            })),
            _ => None,
        };

        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() >= job.timeout {
                timed_out = true;
                let _ = child.kill();
                break child.wait()?;
            }
            thread::sleep(POLL_STEP);
        };
        if let Some(feeder) = feeder {
            let _ = feeder.join();
        }

        let exit_code = if timed_out {
            TIMEOUT_EXIT_CODE
        } else {
            exit_code_of(status)
        };
        Ok(JobResult {
            exit_code,
            stdout_log: logs.stdout,
            stderr_log: logs.stderr,
            wall_time: started.elapsed(),
            timed_out,
        })
    }
}

#[cfg(unix)]
fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

#[cfg(not(unix))]
fn exit_code_of(status: std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}
