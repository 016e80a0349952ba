//! The per-task loop (analyze, forge, execute, evaluate), its three
//! operating modes, and curricula over a shared toolset.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::backend::{
    spawn_checked, AgentBackend, AgentRequest, AgentResponse, BackendError, CostModel, SessionKey, Stage,
    TokenUsage, Usd,
};
use crate::evaluator::{decide_next, evaluate, Decision, EvalError, EvaluationResult};
use crate::executor::{duration_millis, JobExecutor};
use crate::forge::{
    analyze_task, forge_tool, promote_tool, review_tool, validate_requirement, ForgeBudgets, ForgeError,
    ToolRequirement, Vetting,
};
use crate::optimizer::{optimize_toolset, EmbeddingProvider, HashEmbedder, OptimizeReport, OptimizerSettings};
use crate::optimizer::merge::MergeContext;
use crate::prompts::{with_section, PromptError, PromptSet};
use crate::registry::invoke::ToolRunner;
use crate::registry::{RegisterOutcome, Registry, RegistryError};
use crate::workspace::{
    archive_iteration, diff_tool_edits, init_workspace, snapshot_tools, EditStats, TaskSpec, WorkspaceError,
    WorkspacePaths,
};

pub use crate::prompts::select_stage_prompt;

pub const DEFAULT_MAX_ITERATIONS: u32 = 5;
pub const NEXT_STEP_HEADING: &str = "Next-step plan from evaluation";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Empty toolset, tools forged on demand.
    #[default]
    ZeroShot,
    /// Seeded toolset, no forging.
    ToolReuse,
    /// No analyzer and no toolset.
    EvaluatorOnly,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::ZeroShot => "zero_shot",
            RunMode::ToolReuse => "tool_reuse",
            RunMode::EvaluatorOnly => "evaluator_only",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "zero_shot" | "zs" => Ok(RunMode::ZeroShot),
            "tool_reuse" | "tr" => Ok(RunMode::ToolReuse),
            "evaluator_only" | "eo" => Ok(RunMode::EvaluatorOnly),
            other => Err(format!("unknown mode `{other}` (zero_shot, tool_reuse, evaluator_only)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: RunMode,
    pub max_iterations: u32,
    pub budgets: ForgeBudgets,
    pub optimizer: OptimizerSettings,
    pub backend_id: String,
    /// Prices sessions; `None` leaves costs at zero.
    pub cost: Option<CostModel>,
    /// Replace an existing workspace directory.
    pub overwrite: bool,
    pub prompts: PromptSet,
    /// Extra files handed to execution sessions.
    pub attachments: Vec<PathBuf>,
    pub session_budget: Option<Duration>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::default(),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            budgets: ForgeBudgets::default(),
            optimizer: OptimizerSettings::default(),
            backend_id: "mock".into(),
            cost: None,
            overwrite: false,
            prompts: PromptSet::default(),
            attachments: Vec::new(),
            session_budget: None,
        }
    }
}

impl RunConfig {
    pub fn with_mode(mut self, mode: RunMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_max_iterations(mut self, n: u32) -> Self {
        self.max_iterations = n;
        self
    }

    fn session_cost(&self, usage: &TokenUsage) -> Usd {
        self.cost.as_ref().map_or(Usd::ZERO, |c| c.session_cost(usage))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub stage: Stage,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    pub usage: TokenUsage,
    pub cost: Usd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ForgeOutcome {
    Promoted { version: u32 },
    Unchanged { version: u32 },
    Rejected { reason: String },
    BudgetExhausted { stage: String },
    Failed { detail: String },
    /// Forging is disabled in this mode.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeEvent {
    pub requirement: String,
    #[serde(flatten)]
    pub outcome: ForgeOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub stage_sessions: Vec<SessionRecord>,
    pub edit_stats: EditStats,
    pub evaluation: Option<EvaluationResult>,
    /// The engine forced `result_complete` off because report.md was missing.
    #[serde(default)]
    pub report_override: bool,
    #[serde(with = "duration_millis")]
    pub wall_time: Duration,
    #[serde(default)]
    pub forge_events: Vec<ForgeEvent>,
    /// Existing tools the analyzer chose to reuse.
    #[serde(default)]
    pub reused: Vec<String>,
}

impl IterationRecord {
    pub fn empty(index: u32) -> Self {
        Self {
            index,
            stage_sessions: Vec::new(),
            edit_stats: EditStats::default(),
            evaluation: None,
            report_override: false,
            wall_time: Duration::ZERO,
            forge_events: Vec::new(),
            reused: Vec::new(),
        }
    }

    pub fn usage(&self) -> TokenUsage {
        self.stage_sessions.iter().map(|s| s.usage).sum()
    }

    pub fn cost(&self) -> Usd {
        self.stage_sessions.iter().map(|s| s.cost).sum()
    }

    pub fn sessions_of(&self, stage: Stage) -> usize {
        self.stage_sessions.iter().filter(|s| s.stage == stage).count()
    }

    fn push(&mut self, task_id: &str, stage: Stage, key: &SessionKey, resp: &AgentResponse, config: &RunConfig) {
        let n = self.sessions_of(stage) + 1;
        self.stage_sessions.push(SessionRecord {
            stage,
            session_id: session_id(task_id, self.index, stage, n),
            subject: key.subject.clone(),
            usage: resp.token_usage,
            cost: config.session_cost(&resp.token_usage),
        });
    }
}

/// Deterministic session id: `<task>-i<iteration>-<stage>-<n>`.
pub fn session_id(task_id: &str, iteration: u32, stage: Stage, n: usize) -> String {
    format!("{task_id}-i{iteration}-{stage}-{n}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    FailedBudget,
    Error(String),
}

impl RunStatus {
    pub fn label(&self) -> &'static str {
        match self {
            RunStatus::Complete => "complete",
            RunStatus::FailedBudget => "failed_budget",
            RunStatus::Error(_) => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub task_id: String,
    pub mode: RunMode,
    pub status: RunStatus,
    pub iterations: Vec<IterationRecord>,
    pub total_usage: TokenUsage,
    pub total_cost: Usd,
    #[serde(with = "duration_millis")]
    pub total_time: Duration,
    pub final_report_present: bool,
}

impl RunOutcome {
    fn error(task_id: &str, mode: RunMode, detail: String) -> Self {
        Self {
            task_id: task_id.into(),
            mode,
            status: RunStatus::Error(detail),
            iterations: Vec::new(),
            total_usage: TokenUsage::default(),
            total_cost: Usd::ZERO,
            total_time: Duration::ZERO,
            final_report_present: false,
        }
    }

    /// Copy with every wall-clock field zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut c = self.clone();
        c.total_time = Duration::ZERO;
        for it in &mut c.iterations {
            it.wall_time = Duration::ZERO;
        }
        c
    }

    pub fn sessions_of(&self, stage: Stage) -> usize {
        self.iterations.iter().map(|i| i.sessions_of(stage)).sum()
    }

    pub fn edit_stats(&self) -> EditStats {
        let mut s = EditStats::default();
        for it in &self.iterations {
            s.edited_files += it.edit_stats.edited_files;
            s.created_files += it.edit_stats.created_files;
        }
        s
    }

    pub fn write(&self, ws: &WorkspacePaths) -> io::Result<()> {
        let mut json = serde_json::to_string_pretty(self).expect("outcome serializes");
        json.push('\n');
        fs::write(ws.run_outcome(), json)
    }
}

/// Where the workspace's `tools/` comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolsetBinding {
    /// A new empty toolset.
    Fresh,
    /// A private copy of an existing toolset.
    Seeded(PathBuf),
    /// The given toolset itself, linked into the workspace.
    Shared(PathBuf),
}

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("plan is empty")]
    EmptyPlan,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Appends the evaluator's plan to the task prompt under a fixed heading.
pub fn compose_next_question(task: &TaskSpec, plan: &str) -> Result<TaskSpec, WorkflowError> {
    if plan.trim().is_empty() {
        return Err(WorkflowError::EmptyPlan);
    }
    let mut next = task.clone();
    next.prompt = with_section(&task.prompt, NEXT_STEP_HEADING, plan);
    Ok(next)
}

/// Backends and executors a run talks to.
#[derive(Clone, Copy)]
pub struct Services<'a> {
    pub backend: &'a dyn AgentBackend,
    /// Runs forged tools' unit tests.
    pub executor: &'a dyn JobExecutor,
    /// Invokes registered tools; needed for merge verification.
    pub runner: Option<&'a ToolRunner>,
    pub embedder: Option<&'a dyn EmbeddingProvider>,
}

impl<'a> Services<'a> {
    pub fn new(backend: &'a dyn AgentBackend, executor: &'a dyn JobExecutor) -> Self {
        Self {
            backend,
            executor,
            runner: None,
            embedder: None,
        }
    }

    pub fn with_runner(mut self, runner: &'a ToolRunner) -> Self {
        self.runner = Some(runner);
        self
    }

    pub fn with_embedder(mut self, embedder: &'a dyn EmbeddingProvider) -> Self {
        self.embedder = Some(embedder);
        self
    }
}

fn copy_tree(src: &Path, dest: &Path) -> io::Result<()> {
    for entry in WalkDir::new(src).follow_links(true) {
        let entry = entry.map_err(io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under root");
        let target = dest.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target)?;
        } else {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

fn bind_toolset(ws: &WorkspacePaths, binding: &ToolsetBinding) -> Result<(), WorkflowError> {
    match binding {
        ToolsetBinding::Fresh => {}
        ToolsetBinding::Seeded(src) => {
            if !src.is_dir() {
                return Err(WorkflowError::Precondition(format!(
                    "seed toolset {} does not exist",
                    src.display()
                )));
            }
            copy_tree(src, &ws.tools_dir)?;
        }
        ToolsetBinding::Shared(path) => {
            let target = fs::canonicalize(path).map_err(|e| {
                WorkflowError::Precondition(format!("shared toolset {}: {e}", path.display()))
            })?;
            fs::remove_dir(&ws.tools_dir)?;
            std::os::unix::fs::symlink(&target, &ws.tools_dir)?;
        }
    }
    Ok(())
}

/// Stages one iteration runs in `mode`, in order. Forging stages repeat per
/// requirement and are flagged `true`.
pub fn stage_plan(mode: RunMode) -> Vec<(Stage, bool)> {
    let mut out = Vec::new();
    if mode != RunMode::EvaluatorOnly {
        out.push((Stage::ToolAnalysis, false));
    }
    if mode == RunMode::ZeroShot {
        out.extend([
            (Stage::RequirementValidation, true),
            (Stage::ToolGeneration, true),
            (Stage::ToolReview, true),
        ]);
    }
    out.extend([(Stage::TaskExecution, false), (Stage::Evaluation, false)]);
    out
}

/// Runs one task to completion, budget exhaustion or error.
///
/// Problems setting up the workspace are returned as `Err`; anything that
/// goes wrong once the loop has started ends the run with
/// [`RunStatus::Error`] and is still written to `run_outcome.json`.
pub fn run_task(
    task: &TaskSpec,
    config: &RunConfig,
    base_dir: &Path,
    binding: &ToolsetBinding,
    services: Services<'_>,
) -> Result<RunOutcome, WorkflowError> {
    if config.max_iterations == 0 {
        return Err(WorkflowError::Precondition("max_iterations must be at least 1".into()));
    }
    if config.mode == RunMode::ToolReuse && *binding == ToolsetBinding::Fresh {
        return Err(WorkflowError::Precondition("tool_reuse needs a seed or shared toolset".into()));
    }
    let started = Instant::now();
    let ws = init_workspace(task, base_dir, config.overwrite)?;
    let registry = if config.mode == RunMode::EvaluatorOnly {
        None
    } else {
        bind_toolset(&ws, binding)?;
        let reg = Registry::open(&ws.tools_dir)?;
        reg.generate_index()?;
        Some(reg)
    };

    let mut iterations = Vec::new();
    let mut current = task.clone();
    let mut status = RunStatus::FailedBudget;
    for index in 1..=config.max_iterations {
        let t0 = Instant::now();
        let mut rec = IterationRecord::empty(index);
        let result = run_iteration(&ws, &current, index, config, registry.as_ref(), services, &mut rec);
        rec.wall_time = t0.elapsed();
        if let Err(e) = archive_iteration(&ws, index, &rec) {
            log::warn!("cannot archive iteration {index} of {}: {e}", task.id);
        }
        iterations.push(rec);
        match result {
            Err(e) => {
                status = RunStatus::Error(e.to_string());
                break;
            }
            Ok(eval) => match decide_next(&eval, index, config.max_iterations) {
                Decision::StopComplete => {
                    status = RunStatus::Complete;
                    break;
                }
                Decision::StopFailed => {
                    status = RunStatus::FailedBudget;
                    break;
                }
                Decision::Continue(plan) => match compose_next_question(&current, &plan) {
                    Ok(next) => current = next,
                    Err(e) => {
                        status = RunStatus::Error(e.to_string());
                        break;
                    }
                },
            },
        }
    }

    let outcome = RunOutcome {
        task_id: task.id.clone(),
        mode: config.mode,
        status,
        total_usage: iterations.iter().map(IterationRecord::usage).sum(),
        total_cost: iterations.iter().map(IterationRecord::cost).sum(),
        iterations,
        total_time: started.elapsed(),
        final_report_present: ws.report.is_file(),
    };
    outcome.write(&ws)?;
    Ok(outcome)
}

fn run_iteration(
    ws: &WorkspacePaths,
    question: &TaskSpec,
    index: u32,
    config: &RunConfig,
    registry: Option<&Registry>,
    services: Services<'_>,
    rec: &mut IterationRecord,
) -> Result<EvaluationResult, WorkflowError> {
    let task_id = question.id.as_str();
    let key = SessionKey::new(task_id, index);
    let prompts = &config.prompts;
    ws.write_question(&question.prompt)?;

    if let Some(reg) = registry {
        let prompt = select_stage_prompt(Stage::ToolAnalysis, question, Some(reg), prompts)?;
        let (plan, resp) = analyze_task(ws, Some(reg), services.backend, key.clone(), &prompt)?;
        rec.push(task_id, Stage::ToolAnalysis, &key, &resp, config);
        rec.reused = plan.reuse.clone();
        for req in &plan.requirements {
            let outcome = if config.mode == RunMode::ZeroShot {
                forge_requirement(req, ws, question, reg, config, services, &key, rec)?
            } else {
                ForgeOutcome::Skipped
            };
            rec.forge_events.push(ForgeEvent {
                requirement: req.name.clone(),
                outcome,
            });
        }
        reg.generate_index()?;
    }

    let before = snapshot_tools(ws)?;
    let prompt = select_stage_prompt(Stage::TaskExecution, question, registry, prompts)?;
    let mut req = AgentRequest::new(Stage::TaskExecution, prompt, &ws.root, key.clone())
        .with_attachments(config.attachments.clone())
        .with_budget(config.session_budget);
    if registry.is_some() {
        req = req.with_toolset(&ws.tools_dir);
    }
    let resp = spawn_checked(services.backend, &req)?;
    rec.push(task_id, Stage::TaskExecution, &key, &resp, config);
    let after = snapshot_tools(ws)?;
    rec.edit_stats = diff_tool_edits(&before, &after);

    let prompt = select_stage_prompt(Stage::Evaluation, question, None, prompts)?;
    let evaluated = evaluate(ws, services.backend, key.clone(), &prompt)?;
    rec.push(task_id, Stage::Evaluation, &key, &evaluated.response, config);
    rec.report_override = evaluated.report_override;
    rec.evaluation = Some(evaluated.result.clone());
    Ok(evaluated.result)
}

fn requirement_prompt(stage: Stage, question: &TaskSpec, req: &ToolRequirement, prompts: &PromptSet) -> Result<String, WorkflowError> {
    let base = select_stage_prompt(stage, question, None, prompts)?;
    let spec = serde_json::to_string_pretty(req).expect("requirement serializes");
    Ok(with_section(&base, "Tool requirement", &format!("```json\n{spec}\n```")))
}

/// Validate, draft, review and promote one requirement. Budget exhaustion
/// and malformed reviews are recorded, not raised.
#[allow(clippy::too_many_arguments)]
fn forge_requirement(
    req: &ToolRequirement,
    ws: &WorkspacePaths,
    question: &TaskSpec,
    registry: &Registry,
    config: &RunConfig,
    services: Services<'_>,
    key: &SessionKey,
    rec: &mut IterationRecord,
) -> Result<ForgeOutcome, WorkflowError> {
    let task_id = question.id.as_str();
    let prompts = &config.prompts;
    let subject_key = key.clone().with_subject(req.name.clone());

    let prompt = requirement_prompt(Stage::RequirementValidation, question, req, prompts)?;
    let (vetting, resp) = validate_requirement(req, ws, Some(registry), services.backend, subject_key.clone(), &prompt)?;
    if let Some(r) = resp {
        rec.push(task_id, Stage::RequirementValidation, &subject_key, &r, config);
    }
    if let Vetting::Reject(reason) = vetting {
        log::info!("requirement `{}` rejected: {reason}", req.name);
        return Ok(ForgeOutcome::Rejected { reason });
    }

    let mut sessions = Vec::new();
    let prompt = requirement_prompt(Stage::ToolGeneration, question, req, prompts)?;
    let drafted = forge_tool(req, ws, services.backend, services.executor, config.budgets.max_rounds, key.clone(), &prompt, &mut sessions);
    for s in &sessions {
        rec.push(task_id, Stage::ToolGeneration, &subject_key, s, config);
    }
    let draft = match drafted {
        Ok(d) => d,
        Err(e) => return degrade(e),
    };

    let mut sessions = Vec::new();
    let prompt = requirement_prompt(Stage::ToolReview, question, req, prompts)?;
    let reviewed = review_tool(draft, services.backend, services.executor, config.budgets.max_reviews, key.clone(), &prompt, &mut sessions);
    for s in &sessions {
        rec.push(task_id, Stage::ToolReview, &subject_key, s, config);
    }
    let draft = match reviewed {
        Ok(d) => d,
        Err(e) => return degrade(e),
    };
    Ok(match promote_tool(&draft, registry)? {
        RegisterOutcome::Created { version } => ForgeOutcome::Promoted { version },
        RegisterOutcome::Replaced { to, .. } => ForgeOutcome::Promoted { version: to },
        RegisterOutcome::Unchanged { version } => ForgeOutcome::Unchanged { version },
    })
}

fn degrade(e: ForgeError) -> Result<ForgeOutcome, WorkflowError> {
    match e {
        ForgeError::BudgetExhausted { stage, attempts } => {
            log::warn!("{stage} budget exhausted after {attempts} attempts; continuing without the tool");
            Ok(ForgeOutcome::BudgetExhausted { stage: stage.into() })
        }
        ForgeError::ReviewParse(detail) | ForgeError::Precondition(detail) => Ok(ForgeOutcome::Failed { detail }),
        other => Err(other.into()),
    }
}

#[derive(Debug, Default, Serialize)]
pub struct CurriculumOutcome {
    pub toolset: PathBuf,
    pub outcomes: Vec<RunOutcome>,
    pub optimizations: Vec<OptimizeReport>,
    /// Optimizer failures, by the task they preceded.
    pub optimizer_errors: Vec<(String, String)>,
    pub optimizer_usage: TokenUsage,
    pub optimizer_cost: Usd,
}

impl CurriculumOutcome {
    pub fn all_complete(&self) -> bool {
        self.outcomes.iter().all(|o| o.status == RunStatus::Complete)
    }

    pub fn total_cost(&self) -> Usd {
        self.outcomes.iter().map(|o| o.total_cost).sum::<Usd>() + self.optimizer_cost
    }
}

/// Runs `tasks` in order against one shared toolset, tidying the toolset
/// before each task. A failed task is recorded and the curriculum goes on.
pub fn run_curriculum(
    tasks: &[TaskSpec],
    config: &RunConfig,
    base_dir: &Path,
    toolset: &Path,
    services: Services<'_>,
) -> Result<CurriculumOutcome, WorkflowError> {
    let registry = Registry::open(toolset)?;
    let mut out = CurriculumOutcome {
        toolset: toolset.to_path_buf(),
        ..Default::default()
    };
    let fallback_embedder = HashEmbedder::default();
    let embedder = services.embedder.unwrap_or(&fallback_embedder);
    for task in tasks {
        let merge_ctx = services.runner.map(|runner| MergeContext { runner, embedder });
        if config.optimizer.merge && merge_ctx.is_none() {
            log::warn!("merging is enabled but no tool runner was supplied; skipping merges");
        }
        let key = SessionKey::new(task.id.clone(), 0);
        match optimize_toolset(&registry, services.backend, merge_ctx, &config.optimizer, &key, &config.prompts) {
            Ok(report) => {
                for (_, resp) in &report.sessions {
                    out.optimizer_usage += resp.token_usage;
                    out.optimizer_cost += config.session_cost(&resp.token_usage);
                }
                out.optimizations.push(report);
            }
            Err(e) => {
                log::warn!("toolset optimization before {} failed: {e}", task.id);
                out.optimizer_errors.push((task.id.clone(), e.to_string()));
            }
        }
        let binding = ToolsetBinding::Shared(toolset.to_path_buf());
        let outcome = match run_task(task, config, base_dir, &binding, services) {
            Ok(o) => o,
            Err(e) => {
                log::error!("task {} could not start: {e}", task.id);
                RunOutcome::error(&task.id, config.mode, e.to_string())
            }
        };
        out.outcomes.push(outcome);
    }
    Ok(out)
}
