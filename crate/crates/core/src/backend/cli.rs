//! Adapter for external coding-agent command-line tools.
//!
//! The agent CLI is a black box: it is launched in the workspace with the
//! prompt on stdin and the stage in `TOOLFORGE_STAGE`. Each stdout line
//! becomes a transcript step. A line holding a JSON object with a `usage`
//! member supplies token counts, and one with a `final_message` member
//! supplies the structured answer; the last such line wins.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    AgentBackend, AgentRequest, AgentResponse, BackendError, ExitStatus, TokenUsage,
    TranscriptStep,
};
use crate::executor::{ExecError, JobExecutor, JobRequest, LocalExecutor};
use crate::workspace::ToolSnapshot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliAdapterConfig {
    pub id: String,
    /// Program and leading arguments.
    pub command: Vec<String>,
    /// Used when the request carries no budget.
    #[serde(with = "crate::executor::duration_secs")]
    pub default_timeout: Duration,
    /// Extra arguments appended per attachment, with `{path}` replaced.
    #[serde(default)]
    pub attachment_arg: Option<String>,
}

pub struct CliAdapter {
    config: CliAdapterConfig,
    executor: Arc<dyn JobExecutor>,
}

impl CliAdapter {
    pub fn new(config: CliAdapterConfig) -> Self {
        Self {
            config,
            executor: Arc::new(LocalExecutor::new()),
        }
    }

    fn command_for(&self, req: &AgentRequest) -> Vec<String> {
        let mut cmd = self.config.command.clone();
        if let Some(template) = &self.config.attachment_arg {
            for a in &req.attachments {
                cmd.push(template.replace("{path}", &a.to_string_lossy()));
            }
        }
        cmd
    }
}

fn parse_stdout(text: &str) -> (Vec<TranscriptStep>, TokenUsage, Option<Value>) {
    let mut steps = Vec::new();
    let mut usage = TokenUsage::default();
    let mut final_message = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(line) {
            if let Some(u) = obj.get("usage") {
                if let Ok(u) = serde_json::from_value::<TokenUsage>(u.clone()) {
                    usage = u;
                    continue;
                }
            }
            if let Some(m) = obj.get("final_message") {
                final_message = Some(m.clone());
                continue;
            }
        }
        steps.push(TranscriptStep::new("output", line.to_string()));
    }
    (steps, usage, final_message)
}

impl AgentBackend for CliAdapter {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn spawn_session(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        req.validate()?;
        let program = self
            .config
            .command
            .first()
            .ok_or_else(|| BackendError::Unavailable("no agent command configured".into()))?;
        let timeout = req.session_budget.unwrap_or(self.config.default_timeout);
        let logs = req.workspace_root.join("logs");
        std::fs::create_dir_all(&logs)?;
        let before = ToolSnapshot::of_dir(&req.workspace_root)?;

        let mut job = JobRequest::new(
            self.command_for(req),
            &req.workspace_root,
            format!("agent_{}", req.stage.as_str().replace('-', "_")),
        )
        .with_timeout(timeout)
        .with_stdin(req.prompt.clone().into_bytes())
        .with_env("TOOLFORGE_STAGE", req.stage.as_str())
        .with_env("TOOLFORGE_TASK_ID", req.key.task_id.clone());
        if let Some(root) = &req.toolset_root {
            job = job.with_env("TOOLFORGE_TOOLSET", root.to_string_lossy());
        }
        let result = match self.executor.submit(&job, &logs) {
            Ok(r) => r,
            Err(ExecError::Spawn { source, .. }) => {
                return Err(BackendError::Unavailable(format!("cannot launch `{program}`: {source}")))
            }
            Err(e) => return Err(e.into()),
        };
        if result.timed_out {
            return Err(BackendError::SessionTimeout(timeout));
        }

        let stdout = String::from_utf8_lossy(&result.read_stdout()?).into_owned();
        let (transcript, token_usage, final_message) = parse_stdout(&stdout);
        let after = ToolSnapshot::of_dir(&req.workspace_root)?;
        let log_prefix = logs
            .strip_prefix(&req.workspace_root)
            .map(PathBuf::from)
            .unwrap_or_default();
        let artifacts_written = after
            .entries
            .iter()
            .filter(|(p, d)| before.entries.get(*p) != Some(*d))
            .map(|(p, _)| p.clone())
            .filter(|p| !std::path::Path::new(p).starts_with(&log_prefix))
            .collect();
        Ok(AgentResponse {
            transcript,
            artifacts_written,
            token_usage,
            exit_status: if result.success() {
                ExitStatus::Ok
            } else {
                ExitStatus::Failed(format!("agent exited with code {}", result.exit_code))
            },
            final_message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SessionKey, Stage};

    fn config(command: &[&str]) -> CliAdapterConfig {
        CliAdapterConfig {
            id: "cli".into(),
            command: command.iter().map(|s| s.to_string()).collect(),
            default_timeout: Duration::from_secs(10),
            attachment_arg: None,
        }
    }

    fn request(dir: &std::path::Path) -> AgentRequest {
        AgentRequest::new(Stage::TaskExecution, "write the report", dir, SessionKey::new("q01", 1))
    }

    #[test]
    fn unreachable_binary_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let adapter = CliAdapter::new(config(&["/nonexistent/agent-cli"]));
        assert!(matches!(
            adapter.spawn_session(&request(dir.path())),
            Err(BackendError::Unavailable(_))
        ));
    }

    #[test]
    fn captures_transcript_usage_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let script = r#"read p; echo "got: $p ($TOOLFORGE_STAGE)"; echo '# r' > report.md;
echo '{"usage":{"input":120,"output":30}}'; echo '{"final_message":{"ok":true}}'"#;
        let adapter = CliAdapter::new(config(&["sh", "-c", script]));
        let resp = adapter.spawn_session(&request(dir.path())).unwrap();
        assert_eq!(resp.exit_status, ExitStatus::Ok);
        assert_eq!(resp.transcript[0].summary, "got: write the report (task-execution)");
        assert_eq!(resp.token_usage, TokenUsage::new(120, 0, 0, 30));
        assert_eq!(resp.final_message, Some(serde_json::json!({"ok": true})));
        assert_eq!(resp.artifacts_written, vec!["report.md"]);
    }

    #[test]
    fn timeouts_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let slow = CliAdapter::new(config(&["sleep", "5"]));
        let req = request(dir.path()).with_budget(Some(Duration::from_millis(200)));
        assert!(matches!(slow.spawn_session(&req), Err(BackendError::SessionTimeout(_))));
        let failing = CliAdapter::new(config(&["sh", "-c", "exit 3"]));
        let resp = failing.spawn_session(&request(dir.path())).unwrap();
        assert_eq!(resp.failure_reason(), Some("agent exited with code 3"));
    }
}
