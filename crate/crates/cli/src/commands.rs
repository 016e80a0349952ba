use std::fs;
use std::path::{Path, PathBuf};

use toolforge_core::optimizer::{optimize_toolset, HashEmbedder, MergeContext, MergeOutcome, OptimizerSettings};
use toolforge_core::registry::Registry;
use toolforge_core::scoring::{Rubric, RunResults};
use toolforge_core::backend::SessionKey;
use toolforge_core::workflow::{
    run_curriculum, run_task, stage_plan, RunMode, RunOutcome, RunStatus, Services, ToolsetBinding,
};
use toolforge_core::workspace::TaskSpec;

use crate::config::{Settings, Source};
use crate::runtime;
use crate::{CliError, Exit};

fn summary_line(o: &RunOutcome) -> String {
    let n = o.iterations.len();
    format!(
        "{}: {} after {n} iteration{} ({}), cost ${}, time {:.1}s",
        o.task_id,
        o.status.label(),
        if n == 1 { "" } else { "s" },
        o.mode,
        o.total_cost,
        o.total_time.as_secs_f64()
    )
}

fn exit_for(statuses: &[&RunStatus]) -> Exit {
    if statuses.iter().any(|s| matches!(s, RunStatus::Error(_))) {
        Exit::Error
    } else if statuses.iter().any(|s| **s == RunStatus::FailedBudget) {
        Exit::Budget
    } else {
        Exit::Success
    }
}

fn print_plan(settings: &Settings, tasks: &[TaskSpec], mode: RunMode, optimizer: bool) {
    println!("settings:");
    for line in settings.describe() {
        println!("  {line}");
    }
    if optimizer {
        println!(
            "before each task: toolset-reorganization of directories over {} tools{}",
            settings.threshold.value,
            if settings.merge.value { ", after tool-merge of near-duplicates" } else { "" }
        );
    }
    for t in tasks {
        println!("task {} ({mode}), up to {} iterations, each:", t.id, settings.max_iterations.value);
        for (i, (stage, per_req)) in stage_plan(mode).into_iter().enumerate() {
            println!("  {}. {stage}{}", i + 1, if per_req { " (per requirement)" } else { "" });
        }
    }
    println!("dry run: no sessions spawned");
}

/// The task file's mode applies unless a mode was configured explicitly.
fn effective_mode(settings: &Settings, task: &TaskSpec) -> RunMode {
    if settings.mode.source == Source::Default {
        task.mode
    } else {
        settings.mode.value
    }
}

fn binding(settings: &Settings, mode: RunMode) -> Result<ToolsetBinding, CliError> {
    match (mode, &settings.toolset.value) {
        (RunMode::ToolReuse, None) => Err(CliError::new("tool_reuse mode needs --toolset")),
        (RunMode::ToolReuse, Some(p)) => Ok(ToolsetBinding::Seeded(p.clone())),
        _ => Ok(ToolsetBinding::Fresh),
    }
}

pub fn solve(settings: &Settings, task_file: &Path, dry_run: bool) -> Result<Exit, CliError> {
    let task = runtime::load_task(task_file)?;
    let mode = effective_mode(settings, &task);
    if dry_run {
        print_plan(settings, std::slice::from_ref(&task), mode, false);
        return Ok(Exit::Success);
    }
    let mut config = runtime::run_config(settings)?;
    config.mode = mode;
    let binding = binding(settings, mode)?;
    let backend = runtime::backend(settings, &settings.backend.value)?;
    let exec = runtime::executor(settings, true)?;
    let base = &settings.runs_dir.value;
    runtime::ensure_dir(base)?;
    let outcome = run_task(&task, &config, base, &binding, Services::new(backend.as_ref(), exec.as_ref()))?;
    println!("{}", summary_line(&outcome));
    println!("workspace: {}", base.join(&task.id).display());
    if let RunStatus::Error(detail) = &outcome.status {
        eprintln!("error: {detail}");
    }
    Ok(exit_for(&[&outcome.status]))
}

pub fn curriculum(settings: &Settings, list_file: &Path, dry_run: bool) -> Result<Exit, CliError> {
    let tasks = runtime::load_task_list(list_file)?;
    if tasks.is_empty() {
        println!("no tasks in {}; nothing to run", list_file.display());
        return Ok(Exit::Success);
    }
    let mode = settings.mode.value;
    if dry_run {
        print_plan(settings, &tasks, mode, true);
        return Ok(Exit::Success);
    }
    let base = settings.runs_dir.value.clone();
    runtime::ensure_dir(&base)?;
    let toolset: PathBuf = settings.toolset.value.clone().unwrap_or_else(|| base.join("toolset"));
    Registry::create(&toolset)?;
    let config = runtime::run_config(settings)?;
    let backend = runtime::backend(settings, &settings.backend.value)?;
    let exec = runtime::executor(settings, true)?;
    let runner = runtime::runner(settings, exec.clone());
    let mut services = Services::new(backend.as_ref(), exec.as_ref());
    if let Some(r) = &runner {
        services = services.with_runner(r);
    }
    let outcome = run_curriculum(&tasks, &config, &base, &toolset, services)?;

    for o in &outcome.outcomes {
        println!("{}", summary_line(o));
    }
    for (task, err) in &outcome.optimizer_errors {
        eprintln!("warning: toolset optimization before {task} failed: {err}");
    }
    let out_path = base.join("curriculum_outcome.json");
    let json = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
    fs::write(&out_path, json + "\n").map_err(|e| CliError::new(format!("{}: {e}", out_path.display())))?;
    println!("toolset: {}", toolset.display());
    println!("outcomes: {}", out_path.display());
    let statuses: Vec<&RunStatus> = outcome.outcomes.iter().map(|o| &o.status).collect();
    Ok(exit_for(&statuses))
}

pub fn optimize(settings: &Settings, toolset: &Path) -> Result<Exit, CliError> {
    let meta = fs::metadata(toolset).map_err(|e| CliError::new(format!("toolset {}: {e}", toolset.display())))?;
    if meta.permissions().readonly() {
        return Err(CliError::new(format!("toolset {} is read-only", toolset.display())));
    }
    let registry = Registry::open(toolset)?;
    let backend = runtime::backend(settings, &settings.backend.value)?;
    let exec = runtime::executor(settings, true)?;
    let runner = runtime::runner(settings, exec);
    if settings.merge.value && runner.is_none() {
        return Err(CliError::new("merging verifies tools through the shim; set --shim"));
    }
    let embedder = HashEmbedder::default();
    let ctx = runner.as_ref().map(|runner| MergeContext {
        runner,
        embedder: &embedder,
    });
    let opt = OptimizerSettings {
        enabled: true,
        threshold: settings.threshold.value,
        merge: settings.merge.value,
        ..OptimizerSettings::default()
    };
    let prompts = toolforge_core::prompts::PromptSet::default();
    let report = optimize_toolset(&registry, backend.as_ref(), ctx, &opt, &SessionKey::new("optimize", 0), &prompts)?;

    for m in &report.merges {
        let members = m.cluster.members.join(" + ");
        match &m.outcome {
            MergeOutcome::Merged { unified_name, .. } => println!("merged {members} into {unified_name}"),
            MergeOutcome::Kept { rationale } => println!("kept {members}: {rationale}"),
            MergeOutcome::RolledBack { reasons } => {
                println!("rolled back {members} after {} attempts: {}", m.attempts, reasons.join("; "))
            }
        }
    }
    for r in &report.reorgs {
        let plan = &r.proposal.plan;
        let names: Vec<&str> = plan.new_subcategories.iter().map(|s| s.name.as_str()).collect();
        println!(
            "reorganized {}: {} tools into {}",
            plan.target_dir,
            plan.moved_count(),
            if names.is_empty() { "nothing".to_string() } else { names.join(", ") }
        );
    }
    for dir in &report.still_oversized {
        eprintln!("warning: {dir} still holds more than {} tools", settings.threshold.value);
    }
    println!("tools: {} → {}", report.tools_before, report.tools_after);
    Ok(Exit::Success)
}

pub fn score(results_file: &Path, rubric_file: &Path) -> Result<Exit, CliError> {
    let rubric = Rubric::from_json(&runtime::read(rubric_file)?)
        .map_err(|e| CliError::new(format!("rubric {}: {e}", rubric_file.display())))?;
    let results: RunResults = serde_json::from_str(&runtime::read(results_file)?)
        .map_err(|e| CliError::new(format!("results {}: {e}", results_file.display())))?;
    let s = rubric.score(&results)?;
    println!("accuracy {:.3}", s.accuracy);
    println!("methodology {:.3}", s.methodology);
    println!("combined {:.3}", s.combined);
    Ok(Exit::Success)
}
