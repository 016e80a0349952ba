//! Deterministic scripted backend.
//!
//! A [`Playbook`] maps session keys to scripted responses. An entry matches a
//! request when its stage equals the request's stage and each of `task_id`
//! (`"*"` matches any), `iteration` and `subject` is either unset or equal.
//! Among matching entries the most specific wins (task id, then iteration,
//! then subject); ties go to the earliest entry.
//!
//! Each entry holds a sequence of responses consumed one per session, with a
//! separate cursor per (entry, task id, subject). When the sequence runs out
//! the last response repeats, unless `repeat_last` is false, in which case
//! the session is a playbook miss.
//!
//! Text writes and commands may use `{{task_id}}`, `{{iteration}}` and
//! `{{subject}}` placeholders, which are filled from the session key.

use std::collections::HashMap;
use std::fs;
use std::path::{Component, Path};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    AgentBackend, AgentRequest, AgentResponse, BackendError, ExitStatus, SessionKey, Stage,
    TokenUsage, TranscriptStep,
};
use crate::executor::{JobExecutor, JobRequest};
use crate::registry::{CategoryPath, Disclosure, Registry};
use crate::workspace::InputFile;

fn wildcard() -> String {
    "*".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedResponse {
    /// Files to write, relative to the request's workspace root.
    #[serde(default)]
    pub writes: Vec<InputFile>,
    /// Files to delete, relative to the workspace root.
    #[serde(default)]
    pub removes: Vec<String>,
    /// Commands run through the job executor in the workspace root.
    #[serde(default)]
    pub commands: Vec<Vec<String>>,
    /// Category paths to list through the disclosure primitive, in order.
    #[serde(default)]
    pub navigate: Vec<String>,
    #[serde(default)]
    pub final_message: Option<Value>,
    #[serde(default)]
    pub usage: TokenUsage,
    #[serde(default)]
    pub transcript: Vec<TranscriptStep>,
    /// Makes the session end with a failed exit status.
    #[serde(default)]
    pub fail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaybookEntry {
    #[serde(default = "wildcard")]
    pub task_id: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    pub responses: Vec<ScriptedResponse>,
    #[serde(default = "yes")]
    pub repeat_last: bool,
}

impl PlaybookEntry {
    pub fn new(task_id: &str, stage: Stage, responses: Vec<ScriptedResponse>) -> Self {
        Self {
            task_id: task_id.into(),
            stage,
            iteration: None,
            subject: None,
            responses,
            repeat_last: true,
        }
    }

    pub fn at_iteration(mut self, iteration: u32) -> Self {
        self.iteration = Some(iteration);
        self
    }

    pub fn for_subject(mut self, subject: &str) -> Self {
        self.subject = Some(subject.into());
        self
    }

    pub fn no_repeat(mut self) -> Self {
        self.repeat_last = false;
        self
    }

    fn matches(&self, stage: Stage, key: &SessionKey) -> bool {
        self.stage == stage
            && (self.task_id == "*" || self.task_id == key.task_id)
            && self.iteration.is_none_or(|i| i == key.iteration)
            && self
                .subject
                .as_ref()
                .is_none_or(|s| key.subject.as_ref() == Some(s))
    }

    fn specificity(&self) -> u8 {
        (u8::from(self.task_id != "*") << 2)
            | (u8::from(self.iteration.is_some()) << 1)
            | u8::from(self.subject.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Playbook {
    pub entries: Vec<PlaybookEntry>,
}

impl Playbook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, entry: PlaybookEntry) -> Self {
        self.entries.push(entry);
        self
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    fn lookup(&self, stage: Stage, key: &SessionKey) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.matches(stage, key)
                && best.is_none_or(|b| e.specificity() > self.entries[b].specificity())
            {
                best = Some(i);
            }
        }
        best
    }
}

/// One session as seen by the mock.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedSession {
    pub stage: Stage,
    pub key: SessionKey,
    pub prompt: String,
    pub attachments: Vec<std::path::PathBuf>,
    pub transcript: Vec<TranscriptStep>,
    /// Directories listed during the session.
    pub visited: Vec<CategoryPath>,
}

pub struct MockBackend {
    id: String,
    playbook: Playbook,
    executor: Option<Arc<dyn JobExecutor>>,
    cursors: Mutex<HashMap<(usize, String, Option<String>), usize>>,
    sessions: Mutex<Vec<RecordedSession>>,
}

impl MockBackend {
    pub fn new(playbook: Playbook) -> Self {
        Self {
            id: "mock".into(),
            playbook,
            executor: None,
            cursors: Mutex::default(),
            sessions: Mutex::default(),
        }
    }

    /// Executor used for scripted commands.
    pub fn with_executor(mut self, executor: Arc<dyn JobExecutor>) -> Self {
        self.executor = Some(executor);
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn sessions(&self) -> Vec<RecordedSession> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn count(&self, stage: Stage) -> usize {
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|s| s.stage == stage)
            .count()
    }

    pub fn count_for(&self, stage: Stage, task_id: &str) -> usize {
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|s| s.stage == stage && s.key.task_id == task_id)
            .count()
    }

    fn next_response(&self, req: &AgentRequest) -> Result<ScriptedResponse, BackendError> {
        let miss = || BackendError::PlaybookMiss {
            task_id: req.key.task_id.clone(),
            stage: req.stage,
            iteration: req.key.iteration,
            subject: req.key.subject.clone(),
        };
        let idx = self.playbook.lookup(req.stage, &req.key).ok_or_else(miss)?;
        let entry = &self.playbook.entries[idx];
        let mut cursors = self.cursors.lock().unwrap_or_else(|e| e.into_inner());
        let cursor = cursors
            .entry((idx, req.key.task_id.clone(), req.key.subject.clone()))
            .or_insert(0);
        let pos = *cursor;
        *cursor += 1;
        match entry.responses.get(pos) {
            Some(r) => Ok(r.clone()),
            None if entry.repeat_last => entry.responses.last().cloned().ok_or_else(miss),
            None => Err(miss()),
        }
    }

    fn run_script(
        &self,
        req: &AgentRequest,
        script: &ScriptedResponse,
        transcript: &mut Vec<TranscriptStep>,
        visited: &mut Vec<CategoryPath>,
    ) -> Result<Vec<String>, BackendError> {
        let fill = |s: &str| fill_placeholders(s, &req.key);

        if !script.navigate.is_empty() {
            let root = req.toolset_root.as_ref().ok_or_else(|| {
                BackendError::InvalidRequest("navigation scripted but no toolset given".into())
            })?;
            let registry = Registry::open(root)
                .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
            let view = Disclosure::new(registry);
            for p in &script.navigate {
                let path = CategoryPath::parse(p);
                match view.list(&path) {
                    Ok(node) => transcript.push(TranscriptStep::new(
                        "navigate",
                        format!(
                            "{path}: subcategories [{}], tools [{}]",
                            node.subcategories.join(", "),
                            node.tools.join(", ")
                        ),
                    )),
                    Err(e) => transcript.push(TranscriptStep::new("navigate", format!("{path}: {e}"))),
                }
            }
            *visited = view.visited();
        }

        let mut artifacts = Vec::new();
        for w in &script.writes {
            let rel = fill(&w.path);
            let dest = inside(&req.workspace_root, &rel)?;
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            let bytes = match std::str::from_utf8(&w.contents) {
                Ok(text) => fill(text).into_bytes(),
                Err(_) => w.contents.clone(),
            };
            fs::write(&dest, bytes)?;
            transcript.push(TranscriptStep::new("write", rel.clone()));
            if !artifacts.contains(&rel) {
                artifacts.push(rel);
            }
        }
        for r in &script.removes {
            let rel = fill(r);
            let dest = inside(&req.workspace_root, &rel)?;
            match fs::remove_file(&dest) {
                Ok(()) => transcript.push(TranscriptStep::new("remove", rel)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        for (i, cmd) in script.commands.iter().enumerate() {
            let executor = self.executor.as_ref().ok_or_else(|| {
                BackendError::InvalidRequest("commands scripted but no executor configured".into())
            })?;
            let command: Vec<String> = cmd.iter().map(|c| fill(c)).collect();
            let logs = req.workspace_root.join("logs");
            fs::create_dir_all(&logs)?;
            let job = JobRequest::new(command.clone(), &req.workspace_root, format!("mock_cmd{i}"));
            let result = executor.submit(&job, &logs)?;
            transcript.push(TranscriptStep::new(
                "command",
                format!("{} (exit {})", command.join(" "), result.exit_code),
            ));
        }
        Ok(artifacts)
    }
}

fn fill_placeholders(s: &str, key: &SessionKey) -> String {
    s.replace("{{task_id}}", &key.task_id)
        .replace("{{iteration}}", &key.iteration.to_string())
        .replace("{{subject}}", key.subject.as_deref().unwrap_or(""))
}

fn fill_value(v: &Value, key: &SessionKey) -> Value {
    match v {
        Value::String(s) => Value::String(fill_placeholders(s, key)),
        Value::Array(a) => Value::Array(a.iter().map(|x| fill_value(x, key)).collect()),
        Value::Object(o) => Value::Object(
            o.iter()
                .map(|(k, x)| (fill_placeholders(k, key), fill_value(x, key)))
                .collect(),
        ),
        other => other.clone(),
    }
}

fn inside(root: &Path, rel: &str) -> Result<std::path::PathBuf, BackendError> {
    let p = Path::new(rel);
    if rel.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(BackendError::InvalidRequest(format!(
            "scripted path `{rel}` escapes the workspace"
        )));
    }
    Ok(root.join(p))
}

impl AgentBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn spawn_session(&self, req: &AgentRequest) -> Result<AgentResponse, BackendError> {
        req.validate()?;
        let script = self.next_response(req)?;
        let mut transcript = Vec::new();
        let mut visited = Vec::new();
        let outcome = self.run_script(req, &script, &mut transcript, &mut visited);
        transcript.extend(script.transcript.iter().cloned());
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(RecordedSession {
                stage: req.stage,
                key: req.key.clone(),
                prompt: req.prompt.clone(),
                attachments: req.attachments.clone(),
                transcript: transcript.clone(),
                visited,
            });
        let artifacts_written = outcome?;
        let final_message = script.final_message.as_ref().map(|v| fill_value(v, &req.key));
        if final_message.is_some() {
            transcript.push(TranscriptStep::new("final", "structured answer"));
        }
        Ok(AgentResponse {
            transcript,
            artifacts_written,
            token_usage: script.usage,
            exit_status: match script.fail {
                Some(reason) => ExitStatus::Failed(reason),
                None => ExitStatus::Ok,
            },
            final_message,
        })
    }
}
