use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::thread;
use std::time::{Duration, Instant};

use chrono::Utc;
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{
    allocate_logs, duration_millis, ExecError, JobExecutor, JobRequest, JobResult, LogPaths,
    Resources, TIMEOUT_EXIT_CODE,
};

/// How the engine talks to the batch scheduler.
///
/// The submit command receives the rendered script path as its final
/// argument. The poll command may contain `{job_id}`, and must print either
/// nothing (job not yet known) or `STATE[|EXIT[:SIGNAL]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    #[serde(default)]
    pub defaults: Resources,
    pub submit_command: Vec<String>,
    pub poll_command: Vec<String>,
    #[serde(with = "duration_millis")]
    pub poll_interval: Duration,
    #[serde(with = "duration_millis")]
    pub poll_timeout: Duration,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            defaults: Resources::default(),
            submit_command: vec!["sbatch".into(), "--parsable".into()],
            poll_command: [
                "sacct", "-n", "-P", "-X", "-j", "{job_id}", "-o", "State,ExitCode",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            poll_interval: Duration::from_secs(10),
            poll_timeout: Duration::from_secs(48 * 3600),
        }
    }
}

/// Renders a batch script for `job`.
///
/// Output is a pure function of the inputs: job resources (or `defaults`
/// when the job has none), the log paths, sorted environment exports, and
/// the shell-quoted command.
pub fn render_slurm_script(job: &JobRequest, defaults: &Resources, logs: &LogPaths) -> String {
    let res = job.resources.as_ref().unwrap_or(defaults);
    let mut s = String::new();
    s.push_str("#!/bin/bash\n");
    let _ = writeln!(s, "#SBATCH --job-name={}", job.label);
    let _ = writeln!(s, "#SBATCH --cpus-per-task={}", res.cpus);
    let _ = writeln!(s, "#SBATCH --mem={}M", res.mem_mb);
    let _ = writeln!(s, "#SBATCH --time={}", format_time_limit(res.time_limit));
    let _ = writeln!(s, "#SBATCH --output={}", logs.stdout.display());
    let _ = writeln!(s, "#SBATCH --error={}", logs.stderr.display());
    if job.stdin.is_some() {
        let _ = writeln!(s, "#SBATCH --input={}", stdin_path(logs).display());
    }
    s.push('\n');
    let _ = writeln!(s, "cd {}", shell_quote(&job.working_dir.to_string_lossy()));
    for (k, v) in &job.env_overrides {
        let _ = writeln!(s, "export {k}={}", shell_quote(v));
    }
    let cmd: Vec<String> = job.command.iter().map(|a| shell_quote(a)).collect();
    let _ = writeln!(s, "{}", cmd.join(" "));
    s
}

fn stdin_path(logs: &LogPaths) -> std::path::PathBuf {
    logs.stdout.with_extension("stdin")
}

/// `HH:MM:SS`, or `D-HH:MM:SS` once the limit reaches a day.
fn format_time_limit(d: Duration) -> String {
    let total = d.as_secs();
    let (days, rem) = (total / 86_400, total % 86_400);
    let (h, m, sec) = (rem / 3600, (rem % 3600) / 60, rem % 60);
    if days > 0 {
        format!("{days}-{h:02}:{m:02}:{sec:02}")
    } else {
        format!("{h:02}:{m:02}:{sec:02}")
    }
}

fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || "_-./=:,+@%".contains(c))
    {
        return s.to_string();
    }
    format!("'{}'", s.replace('\'', r#"'\''"#))
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum JobState {
    Pending,
    Terminal { state: String, exit_code: Option<i32> },
}

const TERMINAL_STATES: &[&str] = &[
    "COMPLETED",
    "FAILED",
    "CANCELLED",
    "TIMEOUT",
    "OUT_OF_MEMORY",
    "NODE_FAIL",
    "PREEMPTED",
    "BOOT_FAIL",
    "DEADLINE",
];

fn parse_poll_output(stdout: &str) -> JobState {
    let Some(line) = stdout.lines().map(str::trim).find(|l| !l.is_empty()) else {
        return JobState::Pending;
    };
    let mut fields = line.split(|c: char| c == '|' || c.is_whitespace()).filter(|f| !f.is_empty());
    let state = fields
        .next()
        .unwrap_or_default()
        .trim_end_matches('+')
        .to_ascii_uppercase();
    if !TERMINAL_STATES.contains(&state.as_str()) {
        return JobState::Pending;
    }
    let exit_code = fields
        .next()
        .and_then(|f| f.split(':').next())
        .and_then(|c| c.parse().ok());
    JobState::Terminal { state, exit_code }
}

/// Submits jobs through a batch scheduler and polls them to completion.
#[derive(Debug, Clone)]
pub struct SlurmExecutor {
    config: SchedulerConfig,
}

impl SlurmExecutor {
    pub fn new(config: SchedulerConfig) -> Self {
        Self { config }
    }

    fn run_submit(&self, script: &Path) -> Result<String, ExecError> {
        let (program, args) = self
            .config
            .submit_command
            .split_first()
            .ok_or_else(|| ExecError::InvalidRequest("submit command is empty".into()))?;
        let out = Command::new(program)
            .args(args)
            .arg(script)
            .output()
            .map_err(|source| ExecError::Spawn {
                program: program.clone(),
                source,
            })?;
        if !out.status.success() {
            return Err(ExecError::Submit(
                String::from_utf8_lossy(&out.stderr).trim().to_string(),
            ));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let id = stdout
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .and_then(|l| l.split(';').next())
            .map(|s| s.trim().trim_start_matches("Submitted batch job ").to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| ExecError::Submit("scheduler returned no job id".into()))?;
        Ok(id)
    }

    fn poll_once(&self, job_id: &str) -> Result<JobState, ExecError> {
        let argv: Vec<String> = self
            .config
            .poll_command
            .iter()
            .map(|a| a.replace("{job_id}", job_id))
            .collect();
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| ExecError::InvalidRequest("poll command is empty".into()))?;
        let out = Command::new(program)
            .args(args)
            .output()
            .map_err(|source| ExecError::Spawn {
                program: program.clone(),
                source,
            })?;
        if !out.status.success() {
            warn!(
                "poll for job {job_id} failed: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            );
            return Ok(JobState::Pending);
        }
        Ok(parse_poll_output(&String::from_utf8_lossy(&out.stdout)))
    }
}

impl JobExecutor for SlurmExecutor {
    fn submit(&self, job: &JobRequest, logs_dir: &Path) -> Result<JobResult, ExecError> {
        job.validate()?;
        if self.config.poll_interval.is_zero() {
            return Err(ExecError::InvalidRequest("poll_interval must be positive".into()));
        }
        let logs = allocate_logs(logs_dir, &job.label, Utc::now())?;
        if let Some(bytes) = &job.stdin {
            fs::write(stdin_path(&logs), bytes)?;
        }
        let script_path = logs.stdout.with_extension("sbatch");
        fs::write(&script_path, render_slurm_script(job, &self.config.defaults, &logs))?;

        let started = Instant::now();
        let job_id = self.run_submit(&script_path)?;
        debug!("submitted {} as job {job_id}", job.label);

        let (state, exit_code) = loop {
            thread::sleep(self.config.poll_interval);
            if let JobState::Terminal { state, exit_code } = self.poll_once(&job_id)? {
                break (state, exit_code);
            }
            if started.elapsed() >= self.config.poll_timeout {
                return Err(ExecError::PollTimeout {
                    job_id,
                    waited: started.elapsed(),
                });
            }
        };

        // the scheduler writes logs itself; make sure both exist even if it did not
        for p in [&logs.stdout, &logs.stderr] {
            if !p.exists() {
                fs::write(p, b"")?;
            }
        }
        let timed_out = state == "TIMEOUT";
        let exit_code = match (state.as_str(), exit_code) {
            ("TIMEOUT", _) => TIMEOUT_EXIT_CODE,
            ("COMPLETED", code) => code.unwrap_or(0),
            (_, Some(code)) if code != 0 => code,
            _ => 1,
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

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn logs() -> LogPaths {
        LogPaths {
            stdout: PathBuf::from("/ws/logs/20260414_163936_script_1.out"),
            stderr: PathBuf::from("/ws/logs/20260414_163936_script_1.err"),
        }
    }

    #[test]
    fn cpus_and_job_name_are_rendered() {
        let job = JobRequest::new(vec!["python".into(), "script_1.py".into()], "/ws", "script_1")
            .with_resources(Resources {
                cpus: 40,
                ..Resources::default()
            });
        let s = render_slurm_script(&job, &Resources::default(), &logs());
        assert!(s.starts_with("#!/bin/bash\n"));
        assert!(s.contains("#SBATCH --cpus-per-task=40\n"));
        assert!(s.contains("#SBATCH --job-name=script_1\n"));
        assert!(s.ends_with("python script_1.py\n"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let job = JobRequest::new(vec!["echo".into(), "a b".into()], "/ws", "x")
            .with_env("B", "2")
            .with_env("A", "it's");
        let a = render_slurm_script(&job, &Resources::default(), &logs());
        let b = render_slurm_script(&job, &Resources::default(), &logs());
        assert_eq!(a, b);
        let a_pos = a.find("export A=").unwrap();
        assert!(a_pos < a.find("export B=").unwrap());
        assert!(a.contains(r#"export A='it'\''s'"#));
        assert!(a.contains("echo 'a b'"));
    }

    #[test]
    fn time_limit_formats() {
        assert_eq!(format_time_limit(Duration::from_secs(3600)), "01:00:00");
        assert_eq!(format_time_limit(Duration::from_secs(90_061)), "1-01:01:01");
    }

    #[test]
    fn poll_output_parsing() {
        assert_eq!(parse_poll_output(""), JobState::Pending);
        assert_eq!(parse_poll_output("RUNNING|0:0\n"), JobState::Pending);
        assert_eq!(
            parse_poll_output("COMPLETED|0:0"),
            JobState::Terminal { state: "COMPLETED".into(), exit_code: Some(0) }
        );
        assert_eq!(
            parse_poll_output("FAILED|3:0"),
            JobState::Terminal { state: "FAILED".into(), exit_code: Some(3) }
        );
        assert_eq!(
            parse_poll_output("CANCELLED+ by 1000"),
            JobState::Terminal { state: "CANCELLED".into(), exit_code: None }
        );
    }
}
