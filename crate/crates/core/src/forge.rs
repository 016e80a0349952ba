//! Tool forging: analysis plans, requirement vetting, the draft/test and
//! review loops in an isolated sandbox, promotion, and the behavioural
//! contract check.
//!
//! Sandbox layout per requirement:
//!
//! ```text
//! tool_smith/task_<id>/<name>/
//!   <name>.<ext>              drafted source
//!   tests/                    executable unit tests, pass = exit 0
//!   <name>.manifest.json      draft manifest
//!   review_iter_<n>.json      reviewer verdicts
//!   logs/                     test run logs
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{
    spawn_checked, AgentBackend, AgentRequest, AgentResponse, BackendError, SessionKey, Stage,
};
use crate::executor::{tail_log, ExecError, JobExecutor, JobRequest};
use crate::registry::invoke::{invoke_tool, InvokeError, ToolRunner, WireOutput};
use crate::registry::schema::{is_identifier, list_violations, wrong_type_value};
use crate::registry::{
    CategoryPath, Entrypoint, ParamSpec, Provenance, RegisterOutcome, Registry, RegistryError,
    ToolManifest,
};
use crate::workspace::WorkspacePaths;

pub const ANALYSIS_FILE: &str = "analysis_plan.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRequirement {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub method_hint: String,
    #[serde(default)]
    pub inputs: Vec<ParamSpec>,
    #[serde(default)]
    pub outputs: Vec<ParamSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisPlan {
    pub task_analysis: String,
    #[serde(default)]
    pub reuse: Vec<String>,
    #[serde(default)]
    pub requirements: Vec<ToolRequirement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approved,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub iteration: u32,
    pub verdict: Verdict,
    #[serde(default)]
    pub issues: Vec<String>,
    #[serde(default)]
    pub fixes_applied: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftArtifact {
    pub requirement: ToolRequirement,
    pub sandbox_dir: PathBuf,
    /// Source file name inside the sandbox.
    pub source_file: String,
    pub source: Vec<u8>,
    pub manifest: ToolManifest,
    pub test_results: Vec<TestResult>,
    pub reviews: Vec<ReviewRecord>,
    /// Draft rounds used.
    pub rounds: u32,
}

impl DraftArtifact {
    pub fn tests_pass(&self) -> bool {
        !self.test_results.is_empty() && self.test_results.iter().all(|t| t.passed)
    }

    pub fn approved(&self) -> bool {
        self.reviews.last().is_some_and(|r| r.verdict == Verdict::Approved)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgeBudgets {
    pub max_rounds: u32,
    pub max_reviews: u32,
}

impl Default for ForgeBudgets {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            max_reviews: 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot parse analysis plan: {0}")]
    PlanParse(String),
    #[error("plan reuses tools that do not exist: {}", .0.join(", "))]
    DanglingReuse(Vec<String>),
    #[error("{stage} budget exhausted after {attempts} attempts")]
    BudgetExhausted { stage: &'static str, attempts: u32 },
    #[error("malformed review: {0}")]
    ReviewParse(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Executor(#[from] ExecError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Runs the analyzer session and checks the plan against the registry.
///
/// The plan is taken from the session's structured answer, or failing that
/// from `analysis_plan.json` in the workspace.
pub fn analyze_task(
    ws: &WorkspacePaths,
    registry: Option<&Registry>,
    backend: &dyn AgentBackend,
    key: SessionKey,
    prompt: &str,
) -> Result<(AnalysisPlan, AgentResponse), ForgeError> {
    let mut req = AgentRequest::new(Stage::ToolAnalysis, prompt, &ws.root, key);
    if let Some(r) = registry {
        req = req.with_toolset(r.root());
    }
    let response = spawn_checked(backend, &req)?;
    let raw = match &response.final_message {
        Some(v) => v.clone(),
        None => {
            let bytes = fs::read(ws.root.join(ANALYSIS_FILE)).map_err(|e| {
                ForgeError::PlanParse(format!("no plan in the session answer or {ANALYSIS_FILE}: {e}"))
            })?;
            serde_json::from_slice(&bytes).map_err(|e| ForgeError::PlanParse(e.to_string()))?
        }
    };
    let plan: AnalysisPlan =
        serde_json::from_value(raw).map_err(|e| ForgeError::PlanParse(e.to_string()))?;
    for req in &plan.requirements {
        if !is_identifier(&req.name) {
            return Err(ForgeError::PlanParse(format!(
                "requirement name `{}` is not an identifier",
                req.name
            )));
        }
    }
    let mut dangling = Vec::new();
    for name in &plan.reuse {
        let known = match registry {
            Some(r) => r.contains(name)?,
            None => false,
        };
        if !known {
            dangling.push(name.clone());
        }
    }
    if !dangling.is_empty() {
        return Err(ForgeError::DanglingReuse(dangling));
    }
    Ok((plan, response))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vetting {
    Accept,
    Reject(String),
}

/// Deterministic floor applied before the backend validator.
pub fn requirement_rule_violation(
    req: &ToolRequirement,
    task_id: &str,
    registry: Option<&Registry>,
) -> Result<Option<String>, ForgeError> {
    if req.inputs.is_empty() && req.outputs.is_empty() {
        return Ok(Some("requirement has neither inputs nor outputs".into()));
    }
    if mentions_word(&req.description, task_id) {
        return Ok(Some(format!(
            "description names task `{task_id}`; tools must be reusable beyond one task"
        )));
    }
    let mut violations = list_violations(&req.inputs, "inputs");
    violations.extend(list_violations(&req.outputs, "outputs"));
    if !violations.is_empty() {
        return Ok(Some(format!("invalid contract: {}", violations.join("; "))));
    }
    if let Some(r) = registry {
        if r.contains(&req.name)? {
            return Ok(Some(format!("a tool named `{}` already exists; reuse it", req.name)));
        }
    }
    Ok(None)
}

fn mentions_word(text: &str, word: &str) -> bool {
    if word.is_empty() {
        return false;
    }
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    text.match_indices(word).any(|(i, _)| {
        let before = text[..i].chars().next_back();
        let after = text[i + word.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

#[derive(Debug, Deserialize)]
struct ValidatorAnswer {
    accept: bool,
    #[serde(default)]
    reason: String,
}

/// Rules first; only a rule-clean requirement costs a validator session.
pub fn validate_requirement(
    req: &ToolRequirement,
    ws: &WorkspacePaths,
    registry: Option<&Registry>,
    backend: &dyn AgentBackend,
    key: SessionKey,
    prompt: &str,
) -> Result<(Vetting, Option<AgentResponse>), ForgeError> {
    if let Some(reason) = requirement_rule_violation(req, &key.task_id, registry)? {
        return Ok((Vetting::Reject(reason), None));
    }
    let request = AgentRequest::new(Stage::RequirementValidation, prompt, &ws.root, key);
    let response = spawn_checked(backend, &request)?;
    let answer: ValidatorAnswer = response
        .final_message
        .clone()
        .ok_or_else(|| BackendError::Malformed("validator gave no verdict".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| BackendError::Malformed(e.to_string())))?;
    let vetting = if answer.accept {
        Vetting::Accept
    } else {
        Vetting::Reject(if answer.reason.is_empty() {
            "rejected by validator".into()
        } else {
            answer.reason
        })
    };
    Ok((vetting, Some(response)))
}

#[derive(Debug, Default, Deserialize)]
struct DraftAnswer {
    source: Option<String>,
    callable: Option<String>,
    probe: Option<Value>,
}

fn find_source(sandbox: &Path, name: &str, hinted: Option<&str>) -> io::Result<Option<String>> {
    if let Some(h) = hinted {
        return Ok(sandbox.join(h).is_file().then(|| h.to_string()));
    }
    let mut hits: Vec<String> = fs::read_dir(sandbox)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|f| {
            !f.ends_with(".json")
                && !f.ends_with(".md")
                && Path::new(f).file_stem().is_some_and(|s| s == name)
        })
        .collect();
    hits.sort();
    Ok(hits.into_iter().next())
}

fn interpreter_for(path: &Path) -> Vec<String> {
    let p = path.to_string_lossy().into_owned();
    match path.extension().and_then(|e| e.to_str()) {
        Some("sh") => vec!["sh".into(), p],
        Some("bash") => vec!["bash".into(), p],
        Some("py") => vec!["python3".into(), p],
        _ => vec![p],
    }
}

fn test_label(file: &str) -> String {
    let stem: String = file
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("test_{stem}")
}

/// Runs every file in `<sandbox>/tests` in sorted order. `TOOL_SOURCE`
/// points at the drafted source.
pub fn run_sandbox_tests(
    sandbox: &Path,
    source_file: &str,
    executor: &dyn JobExecutor,
) -> Result<Vec<TestResult>, ForgeError> {
    let tests_dir = sandbox.join("tests");
    let mut files: Vec<String> = match fs::read_dir(&tests_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|f| !f.starts_with('.'))
            .collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    files.sort();
    // Jobs run inside the sandbox, so the source path must not be relative.
    let source = std::path::absolute(sandbox.join(source_file))?;
    let logs = sandbox.join("logs");
    fs::create_dir_all(&logs)?;
    let mut out = Vec::new();
    for f in files {
        let job = JobRequest::new(interpreter_for(&std::path::absolute(tests_dir.join(&f))?), sandbox, test_label(&f))
            .with_env("TOOL_SOURCE", source.to_string_lossy());
        let result = executor.submit(&job, &logs)?;
        let detail = if result.timed_out {
            "timed out".to_string()
        } else if result.success() {
            String::new()
        } else {
            format!(
                "exit {}: {}",
                result.exit_code,
                tail_log(&result.stderr_log, 5).unwrap_or_default().trim_end()
            )
        };
        out.push(TestResult {
            name: f,
            passed: result.success(),
            detail,
        });
    }
    Ok(out)
}

fn failure_feedback(results: &[TestResult], missing: Option<&str>) -> String {
    let mut s = String::from("\n\n## Feedback from the previous round\n");
    if let Some(m) = missing {
        s.push_str(&format!("- {m}\n"));
    }
    if results.is_empty() && missing.is_none() {
        s.push_str("- no unit tests found under tests/\n");
    }
    for t in results.iter().filter(|t| !t.passed) {
        s.push_str(&format!("- {} failed: {}\n", t.name, t.detail));
    }
    s
}

/// Draft/test loop. Each round is one generation session followed by a run
/// of the sandbox tests; failures are fed into the next round's prompt.
#[allow(clippy::too_many_arguments)]
pub fn forge_tool(
    req: &ToolRequirement,
    ws: &WorkspacePaths,
    backend: &dyn AgentBackend,
    executor: &dyn JobExecutor,
    max_rounds: u32,
    key: SessionKey,
    prompt: &str,
    sessions: &mut Vec<AgentResponse>,
) -> Result<DraftArtifact, ForgeError> {
    if max_rounds == 0 {
        return Err(ForgeError::Precondition("max_rounds must be positive".into()));
    }
    let sandbox = ws.sandbox_root(&key.task_id).join(&req.name);
    fs::create_dir_all(sandbox.join("tests"))?;
    let key = key.with_subject(req.name.clone());
    let mut feedback = String::new();
    for round in 1..=max_rounds {
        let request = AgentRequest::new(
            Stage::ToolGeneration,
            format!("{prompt}{feedback}"),
            &sandbox,
            key.clone(),
        );
        let response = spawn_checked(backend, &request)?;
        let answer: DraftAnswer = response
            .final_message
            .clone()
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or_default();
        sessions.push(response);

        let Some(source_file) = find_source(&sandbox, &req.name, answer.source.as_deref())? else {
            feedback = failure_feedback(&[], Some(&format!("source file `{}.<ext>` missing", req.name)));
            continue;
        };
        let results = run_sandbox_tests(&sandbox, &source_file, executor)?;
        if results.is_empty() || results.iter().any(|t| !t.passed) {
            feedback = failure_feedback(&results, None);
            continue;
        }
        let manifest = ToolManifest {
            name: req.name.clone(),
            description: req.description.clone(),
            category_path: CategoryPath::root(),
            version: 1,
            inputs: req.inputs.clone(),
            outputs: req.outputs.clone(),
            entrypoint: Entrypoint {
                source: source_file.clone(),
                callable: answer.callable.unwrap_or_else(|| req.name.clone()),
            },
            provenance: Provenance {
                generated_by: backend.id().to_string(),
                task_id: key.task_id.clone(),
                created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            },
            tests_passed: true,
            probe: answer.probe,
        };
        fs::write(
            sandbox.join(format!("{}{}", req.name, crate::registry::MANIFEST_SUFFIX)),
            manifest.to_json(),
        )?;
        return Ok(DraftArtifact {
            requirement: req.clone(),
            source: fs::read(sandbox.join(&source_file))?,
            sandbox_dir: sandbox,
            source_file,
            manifest,
            test_results: results,
            reviews: Vec::new(),
            rounds: round,
        });
    }
    Err(ForgeError::BudgetExhausted {
        stage: "tool generation",
        attempts: max_rounds,
    })
}

#[derive(Debug, Deserialize)]
struct ReviewAnswer {
    verdict: Verdict,
    #[serde(default)]
    issues: Vec<String>,
    #[serde(default)]
    fixes_applied: Vec<String>,
}

/// Reviewer loop. A `revise` verdict means the reviewer changed the
/// source; tests re-run before the next review. Approval only counts while
/// the tests pass.
#[allow(clippy::too_many_arguments)]
pub fn review_tool(
    mut draft: DraftArtifact,
    backend: &dyn AgentBackend,
    executor: &dyn JobExecutor,
    max_reviews: u32,
    key: SessionKey,
    prompt: &str,
    sessions: &mut Vec<AgentResponse>,
) -> Result<DraftArtifact, ForgeError> {
    if !draft.tests_pass() {
        return Err(ForgeError::Precondition("draft tests do not pass".into()));
    }
    let key = key.with_subject(draft.requirement.name.clone());
    for n in 1..=max_reviews {
        let request = AgentRequest::new(Stage::ToolReview, prompt, &draft.sandbox_dir, key.clone());
        let response = spawn_checked(backend, &request)?;
        let answer: ReviewAnswer = response
            .final_message
            .clone()
            .ok_or_else(|| ForgeError::ReviewParse("reviewer gave no verdict".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| ForgeError::ReviewParse(e.to_string())))?;
        sessions.push(response);
        if answer.verdict == Verdict::Approved && answer.issues.len() > answer.fixes_applied.len() {
            return Err(ForgeError::ReviewParse(format!(
                "approved with {} issues but only {} fixes",
                answer.issues.len(),
                answer.fixes_applied.len()
            )));
        }
        let record = ReviewRecord {
            iteration: n,
            verdict: answer.verdict,
            issues: answer.issues,
            fixes_applied: answer.fixes_applied,
        };
        let mut json = serde_json::to_string_pretty(&record).expect("review serializes");
        json.push('\n');
        fs::write(draft.sandbox_dir.join(format!("review_iter_{n}.json")), json)?;
        draft.reviews.push(record);

        if draft.reviews.last().is_some_and(|r| r.verdict == Verdict::Revise) {
            draft.test_results = run_sandbox_tests(&draft.sandbox_dir, &draft.source_file, executor)?;
            draft.source = fs::read(draft.sandbox_dir.join(&draft.source_file))?;
            draft.manifest.tests_passed = draft.tests_pass();
        } else if draft.tests_pass() {
            return Ok(draft);
        }
    }
    Err(ForgeError::BudgetExhausted {
        stage: "tool review",
        attempts: max_reviews,
    })
}

/// Registers an approved, passing draft at the registry root.
pub fn promote_tool(draft: &DraftArtifact, registry: &Registry) -> Result<RegisterOutcome, ForgeError> {
    if !draft.approved() {
        return Err(ForgeError::Precondition(format!(
            "draft `{}` has no approving review",
            draft.requirement.name
        )));
    }
    if !draft.tests_pass() {
        return Err(ForgeError::Precondition(format!(
            "draft `{}` does not pass its tests",
            draft.requirement.name
        )));
    }
    let mut manifest = draft.manifest.clone();
    manifest.category_path = CategoryPath::root();
    manifest.tests_passed = true;
    Ok(registry.register(&manifest, &draft.source)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "reasons", rename_all = "snake_case")]
pub enum ContractVerdict {
    Pass,
    Fail(Vec<String>),
}

impl ContractVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, ContractVerdict::Pass)
    }
}

/// An input that violates `m.inputs`: the probe (or an empty record) with
/// the first parameter replaced by a wrongly typed value. Tools without
/// inputs get an unexpected field.
pub fn schema_violating_input(m: &ToolManifest) -> Value {
    let mut base = match &m.probe {
        Some(Value::Object(o)) => o.clone(),
        _ => serde_json::Map::new(),
    };
    match m.inputs.first() {
        Some(p) => {
            base.insert(p.name.clone(), wrong_type_value(p));
        }
        None => {
            base.insert("unexpected_field".into(), Value::from(1));
        }
    }
    Value::Object(base)
}

/// Behavioural lint of a registered tool: a schema-violating input must
/// produce a structured error, and the declared probe input, if any, must
/// produce conforming output.
pub fn contract_check(
    name: &str,
    registry: &Registry,
    runner: &ToolRunner,
) -> Result<ContractVerdict, ForgeError> {
    let entry = registry.resolve(name)?;
    let mut reasons = Vec::new();

    let bad = schema_violating_input(&entry.manifest);
    let d = runner.dispatch(&entry, &bad)?;
    match (&d.output, d.job.exit_code, d.job.timed_out) {
        (_, _, true) => reasons.push("timed out on invalid input".to_string()),
        (Ok(WireOutput::Failure { .. }), code, _) if code != 0 => {}
        (Ok(WireOutput::Success { .. }), _, _) => {
            reasons.push("silent fallback on invalid input".to_string())
        }
        (Ok(WireOutput::Failure { .. }), _, _) => {
            reasons.push("failure document on invalid input but exit code 0".to_string())
        }
        (Err(detail), 0, _) => reasons.push(format!(
            "no structured error on invalid input (exit 0: {detail})"
        )),
        (Err(detail), code, _) => reasons.push(format!(
            "unstructured failure on invalid input (exit {code}: {detail})"
        )),
    }

    if let Some(probe) = &entry.manifest.probe {
        match invoke_tool(registry, name, probe, runner) {
            Ok(_) => {}
            Err(InvokeError::Executor(e)) => return Err(e.into()),
            Err(e) => reasons.push(format!("probe input failed: {e}")),
        }
    }
    Ok(if reasons.is_empty() {
        ContractVerdict::Pass
    } else {
        ContractVerdict::Fail(reasons)
    })
}
