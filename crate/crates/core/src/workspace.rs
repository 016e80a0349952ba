//! Per-task agent workspace.
//!
//! ```text
//! <base>/<task-id>/
//!   question.md  tools/  tool_smith/  logs/  img/
//!   report.md        (written by the executor session)
//!   evaluation.json  (written by the evaluator session)
//!   iterations/<n>/  (archived state after each iteration)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::workflow::{IterationRecord, RunMode};

pub const QUESTION_FILE: &str = "question.md";
pub const REPORT_FILE: &str = "report.md";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const RUN_OUTCOME_FILE: &str = "run_outcome.json";
pub const ITERATION_RECORD_FILE: &str = "record.json";
/// Observations an execution session reports for rubric scoring.
pub const RESULTS_FILE: &str = "results.json";

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("workspace already exists at {0}")]
    WorkspaceExists(PathBuf),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputFile {
    pub path: String,
    pub contents: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct InputFileRepr {
    path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base64: Option<String>,
}

impl Serialize for InputFile {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let repr = match std::str::from_utf8(&self.contents) {
            Ok(text) => InputFileRepr {
                path: self.path.clone(),
                text: Some(text.to_string()),
                base64: None,
            },
            Err(_) => InputFileRepr {
                path: self.path.clone(),
                text: None,
                base64: Some(base64::engine::general_purpose::STANDARD.encode(&self.contents)),
            },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for InputFile {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = InputFileRepr::deserialize(d)?;
        let contents = match (repr.text, repr.base64) {
            (Some(t), None) => t.into_bytes(),
            (None, Some(b)) => base64::engine::general_purpose::STANDARD
                .decode(b)
                .map_err(serde::de::Error::custom)?,
            _ => {
                return Err(serde::de::Error::custom(
                    "input file needs exactly one of `text` or `base64`",
                ))
            }
        };
        Ok(InputFile {
            path: repr.path,
            contents,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub prompt: String,
    #[serde(default)]
    pub input_files: Vec<InputFile>,
    #[serde(default)]
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric_ref: Option<String>,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            prompt: prompt.into(),
            input_files: Vec::new(),
            mode: RunMode::default(),
            rubric_ref: None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkspaceError> {
        if !is_safe_id(&self.id) {
            return Err(WorkspaceError::InvalidTask(format!(
                "id `{}` must match [A-Za-z0-9_-]+",
                self.id
            )));
        }
        if self.prompt.trim().is_empty() {
            return Err(WorkspaceError::InvalidTask("prompt is empty".into()));
        }
        for f in &self.input_files {
            let p = Path::new(&f.path);
            let safe = !f.path.is_empty()
                && p.components().all(|c| matches!(c, Component::Normal(_)));
            if !safe {
                return Err(WorkspaceError::InvalidTask(format!(
                    "input file path `{}` must be relative and stay inside the workspace",
                    f.path
                )));
            }
            if f.path == QUESTION_FILE {
                return Err(WorkspaceError::InvalidTask(format!(
                    "input file may not replace {QUESTION_FILE}"
                )));
            }
        }
        Ok(())
    }
}

pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkspacePaths {
    pub root: PathBuf,
    pub question: PathBuf,
    pub tools_dir: PathBuf,
    pub tool_smith_dir: PathBuf,
    pub logs_dir: PathBuf,
    pub img_dir: PathBuf,
    pub report: PathBuf,
    pub evaluation: PathBuf,
}

impl WorkspacePaths {
    /// Paths for a workspace rooted at `root`; nothing is created.
    pub fn at(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self {
            question: root.join(QUESTION_FILE),
            tools_dir: root.join("tools"),
            tool_smith_dir: root.join("tool_smith"),
            logs_dir: root.join("logs"),
            img_dir: root.join("img"),
            report: root.join(REPORT_FILE),
            evaluation: root.join(EVALUATION_FILE),
            root,
        }
    }

    pub fn iterations_dir(&self) -> PathBuf {
        self.root.join("iterations")
    }

    pub fn run_outcome(&self) -> PathBuf {
        self.root.join(RUN_OUTCOME_FILE)
    }

    /// Sandbox directory for forging tools for `task_id`.
    pub fn sandbox_root(&self, task_id: &str) -> PathBuf {
        self.tool_smith_dir.join(format!("task_{task_id}"))
    }

    pub fn write_question(&self, prompt: &str) -> io::Result<()> {
        fs::write(&self.question, prompt.as_bytes())
    }
}

/// Creates `base_dir/<task.id>/` with the standard layout and the task's
/// input files.
pub fn init_workspace(
    task: &TaskSpec,
    base_dir: &Path,
    overwrite: bool,
) -> Result<WorkspacePaths, WorkspaceError> {
    task.validate()?;
    if !base_dir.is_dir() {
        return Err(WorkspaceError::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("base directory {} does not exist", base_dir.display()),
        )));
    }
    let ws = WorkspacePaths::at(base_dir.join(&task.id));
    if ws.root.exists() {
        if !overwrite {
            return Err(WorkspaceError::WorkspaceExists(ws.root));
        }
        fs::remove_dir_all(&ws.root)?;
    }
    fs::create_dir(&ws.root)?;
    for dir in [&ws.tools_dir, &ws.tool_smith_dir, &ws.logs_dir, &ws.img_dir] {
        fs::create_dir(dir)?;
    }
    ws.write_question(&task.prompt)?;
    for f in &task.input_files {
        let dest = ws.root.join(&f.path);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(dest, &f.contents)?;
    }
    Ok(ws)
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 digests of every file under a directory, keyed by `/`-separated
/// relative path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSnapshot {
    pub entries: BTreeMap<String, String>,
}

impl ToolSnapshot {
    pub fn of_dir(dir: &Path) -> io::Result<Self> {
        let mut entries = BTreeMap::new();
        for entry in WalkDir::new(dir).follow_links(true) {
            let entry = entry.map_err(io::Error::from)?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry
                .path()
                .strip_prefix(dir)
                .expect("walkdir yields children of its root");
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            entries.insert(key, digest_bytes(&fs::read(entry.path())?));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn snapshot_tools(ws: &WorkspacePaths) -> io::Result<ToolSnapshot> {
    ToolSnapshot::of_dir(&ws.tools_dir)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStats {
    pub edited_files: u32,
    pub created_files: u32,
}

/// Files changed in place and files added between two snapshots. Deleted
/// files are not counted.
pub fn diff_tool_edits(before: &ToolSnapshot, after: &ToolSnapshot) -> EditStats {
    let mut stats = EditStats::default();
    for (path, digest) in &after.entries {
        match before.entries.get(path) {
            Some(old) if old != digest => stats.edited_files += 1,
            Some(_) => {}
            None => stats.created_files += 1,
        }
    }
    stats
}

/// Contents of `report.md`, or `None` when there is no report. A report that
/// is not valid UTF-8 is an error.
pub fn read_report(ws: &WorkspacePaths) -> Result<Option<String>, WorkspaceError> {
    match fs::read(&ws.report) {
        Ok(bytes) => String::from_utf8(bytes).map(Some).map_err(|e| {
            WorkspaceError::Io(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("report.md is not UTF-8: {e}"),
            ))
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Copies the iteration's question, report and evaluation plus the record
/// itself into `iterations/<n>/`, replacing any earlier archive of the same
/// iteration.
pub fn archive_iteration(
    ws: &WorkspacePaths,
    iteration: u32,
    record: &IterationRecord,
) -> Result<PathBuf, WorkspaceError> {
    if iteration == 0 {
        return Err(WorkspaceError::InvalidTask("iterations are numbered from 1".into()));
    }
    let dir = ws.iterations_dir().join(iteration.to_string());
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    fs::copy(&ws.question, dir.join(QUESTION_FILE))?;
    for optional in [&ws.report, &ws.evaluation] {
        if optional.is_file() {
            fs::copy(optional, dir.join(optional.file_name().expect("file path")))?;
        }
    }
    let mut json = serde_json::to_string_pretty(record).expect("record serializes");
    json.push('\n');
    fs::write(dir.join(ITERATION_RECORD_FILE), json)?;
    Ok(dir)
}
