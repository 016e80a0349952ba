//! Coding-agent backends.
//!
//! Every stage of the workflow is one fresh [`AgentBackend::spawn_session`]
//! call. Nothing but the workspace files carries over between sessions.

pub mod cli;
pub mod mock;
pub mod pricing;

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::executor::ExecError;

pub use cli::{CliAdapter, CliAdapterConfig};
pub use mock::{MockBackend, Playbook};
pub use pricing::{account_cost, load_pricing, CostModel, PricingEntry, Usd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    ToolAnalysis,
    ToolGeneration,
    ToolReview,
    TaskExecution,
    Evaluation,
    RequirementValidation,
    ToolsetReorganization,
    ToolMerge,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::ToolAnalysis,
        Stage::ToolGeneration,
        Stage::ToolReview,
        Stage::TaskExecution,
        Stage::Evaluation,
        Stage::RequirementValidation,
        Stage::ToolsetReorganization,
        Stage::ToolMerge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ToolAnalysis => "tool-analysis",
            Stage::ToolGeneration => "tool-generation",
            Stage::ToolReview => "tool-review",
            Stage::TaskExecution => "task-execution",
            Stage::Evaluation => "evaluation",
            Stage::RequirementValidation => "requirement-validation",
            Stage::ToolsetReorganization => "toolset-reorganization",
            Stage::ToolMerge => "tool-merge",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown stage `{0}`")]
pub struct UnknownStage(pub String);

impl FromStr for Stage {
    type Err = UnknownStage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| UnknownStage(s.to_string()))
    }
}

/// Identifies a session for playbook lookup and bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionKey {
    pub task_id: String,
    /// Workflow iteration; 0 for sessions outside a task loop.
    pub iteration: u32,
    /// Requirement, tool or directory the session is about, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl SessionKey {
    pub fn new(task_id: impl Into<String>, iteration: u32) -> Self {
        Self {
            task_id: task_id.into(),
            iteration,
            subject: None,
        }
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRequest {
    pub stage: Stage,
    pub prompt: String,
    pub workspace_root: PathBuf,
    pub attachments: Vec<PathBuf>,
    pub session_budget: Option<Duration>,
    pub key: SessionKey,
    /// Toolset the session may browse, one level at a time.
    pub toolset_root: Option<PathBuf>,
}

impl AgentRequest {
    pub fn new(
        stage: Stage,
        prompt: impl Into<String>,
        workspace_root: impl Into<PathBuf>,
        key: SessionKey,
    ) -> Self {
        Self {
            stage,
            prompt: prompt.into(),
            workspace_root: workspace_root.into(),
            attachments: Vec::new(),
            session_budget: None,
            key,
            toolset_root: None,
        }
    }

    pub fn with_toolset(mut self, root: impl Into<PathBuf>) -> Self {
        self.toolset_root = Some(root.into());
        self
    }

    pub fn with_attachments(mut self, attachments: Vec<PathBuf>) -> Self {
        self.attachments = attachments;
        self
    }

    pub fn with_budget(mut self, budget: Option<Duration>) -> Self {
        self.session_budget = budget;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        if !self.workspace_root.is_dir() {
            return Err(BackendError::InvalidRequest(format!(
                "workspace {} does not exist",
                self.workspace_root.display()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptStep {
    pub kind: String,
    pub summary: String,
}

impl TranscriptStep {
    pub fn new(kind: impl Into<String>, summary: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            summary: summary.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum ExitStatus {
    #[default]
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenUsage {
    pub input: u64,
    pub cache_write: u64,
    pub cache_read: u64,
    pub output: u64,
}

impl TokenUsage {
    pub fn new(input: u64, cache_write: u64, cache_read: u64, output: u64) -> Self {
        Self {
            input,
            cache_write,
            cache_read,
            output,
        }
    }

    /// Tokens counted against the prompt side of the context window.
    pub fn prompt_tokens(&self) -> u64 {
        self.input + self.cache_write + self.cache_read
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, o: TokenUsage) -> TokenUsage {
        TokenUsage {
            input: self.input + o.input,
            cache_write: self.cache_write + o.cache_write,
            cache_read: self.cache_read + o.cache_read,
            output: self.output + o.output,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, o: TokenUsage) {
        *self = *self + o;
    }
}

impl Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentResponse {
    pub transcript: Vec<TranscriptStep>,
    /// Paths relative to the request's workspace root.
    pub artifacts_written: Vec<String>,
    pub token_usage: TokenUsage,
    pub exit_status: ExitStatus,
    /// Structured answer for stages that return data rather than files
    /// (plans, verdicts, proposals).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_message: Option<Value>,
}

impl AgentResponse {
    pub fn failure_reason(&self) -> Option<&str> {
        match &self.exit_status {
            ExitStatus::Ok => None,
            ExitStatus::Failed(r) => Some(r),
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("session exceeded its {0:?} budget")]
    SessionTimeout(Duration),
    #[error("playbook has no entry for task `{task_id}`, stage {stage}, iteration {iteration}{}",
        .subject.as_deref().map(|s| format!(", subject `{s}`")).unwrap_or_default())]
    PlaybookMiss {
        task_id: String,
        stage: Stage,
        iteration: u32,
        subject: Option<String>,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("session failed: {0}")]
    SessionFailed(String),
    #[error("malformed backend output: {0}")]
    Malformed(String),
    #[error("executor failure: {0}")]
    Executor(#[from] ExecError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub trait AgentBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Runs one isolated session.
    fn spawn_session(&self, request: &AgentRequest) -> Result<AgentResponse, BackendError>;
}

impl<T: AgentBackend + ?Sized> AgentBackend for std::sync::Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn spawn_session(&self, request: &AgentRequest) -> Result<AgentResponse, BackendError> {
        (**self).spawn_session(request)
    }
}

impl<T: AgentBackend + ?Sized> AgentBackend for &T {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn spawn_session(&self, request: &AgentRequest) -> Result<AgentResponse, BackendError> {
        (**self).spawn_session(request)
    }
}

/// Spawns a session and turns a failed exit status into an error.
pub fn spawn_checked(
    backend: &dyn AgentBackend,
    request: &AgentRequest,
) -> Result<AgentResponse, BackendError> {
    request.validate()?;
    let response = backend.spawn_session(request)?;
    match response.failure_reason() {
        Some(reason) => Err(BackendError::SessionFailed(reason.to_string())),
        None => Ok(response),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stage_names_round_trip() {
        for st in Stage::ALL {
            assert_eq!(st.as_str().parse::<Stage>().unwrap(), st);
            assert_eq!(serde_json::to_value(st).unwrap(), Value::from(st.as_str()));
        }
        assert_eq!("foo".parse::<Stage>(), Err(UnknownStage("foo".into())));
    }

    #[test]
    fn exit_status_serialization() {
        assert_eq!(serde_json::to_value(ExitStatus::Ok).unwrap(), serde_json::json!({"status": "ok"}));
        assert_eq!(
            serde_json::to_value(ExitStatus::Failed("x".into())).unwrap(),
            serde_json::json!({"status": "failed", "reason": "x"})
        );
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let req = AgentRequest::new(Stage::Evaluation, " ", dir.path(), SessionKey::new("q", 1));
        assert!(matches!(req.validate(), Err(BackendError::InvalidRequest(_))));
    }

    fn usage() -> impl Strategy<Value = TokenUsage> {
        (0..1u64 << 40, 0..1u64 << 40, 0..1u64 << 40, 0..1u64 << 40)
            .prop_map(|(a, b, c, d)| TokenUsage::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn usage_addition_is_componentwise(a in usage(), b in usage()) {
            let s = a + b;
            prop_assert_eq!(s.input, a.input + b.input);
            prop_assert_eq!(s.output, a.output + b.output);
            prop_assert_eq!(s, b + a);
            prop_assert_eq!([a, b].into_iter().sum::<TokenUsage>(), s);
        }
    }
}
