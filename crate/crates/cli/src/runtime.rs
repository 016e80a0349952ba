//! Turns resolved settings into engine objects.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use toolforge_core::backend::mock::{MockBackend, Playbook};
use toolforge_core::backend::pricing::{default_pricing, load_pricing};
use toolforge_core::backend::{AgentBackend, CliAdapter, CostModel};
use toolforge_core::executor::JobExecutor;
use toolforge_core::registry::invoke::ToolRunner;
use toolforge_core::workflow::RunConfig;
use toolforge_core::workspace::TaskSpec;

use crate::config::Settings;
use crate::CliError;

/// Builds a fresh backend. Mock backends keep per-session cursors, so each
/// independent run gets its own instance.
pub fn backend(settings: &Settings, id: &str) -> Result<Box<dyn AgentBackend>, CliError> {
    if id == "mock" {
        let Some(path) = &settings.playbook.value else {
            return Err(CliError::new("the mock backend needs --playbook"));
        };
        let text = read(path)?;
        let pb = Playbook::from_json(&text).map_err(|e| CliError::new(format!("playbook {}: {e}", path.display())))?;
        return Ok(Box::new(MockBackend::new(pb)));
    }
    match settings.backends.get(id) {
        Some(cfg) => Ok(Box::new(CliAdapter::new(cfg.clone()))),
        None => Err(CliError::new(format!("unknown backend `{id}`; define it under `backends` in the config file"))),
    }
}

pub fn cost_model(settings: &Settings) -> Result<Option<CostModel>, CliError> {
    let Some(model) = &settings.model.value else {
        if settings.pricing.value.is_some() {
            log::warn!("a pricing table was given without a model; costs stay at zero");
        }
        return Ok(None);
    };
    let entries = match &settings.pricing.value {
        Some(p) => load_pricing(&read(p)?)?,
        None => default_pricing(),
    };
    Ok(Some(CostModel::new(model.clone(), entries)?))
}

/// `real_submit` lets the scheduler backend actually submit; otherwise jobs
/// run as local subprocesses.
pub fn executor(settings: &Settings, real_submit: bool) -> Result<Arc<dyn JobExecutor>, CliError> {
    let mut cfg = settings.executor.clone();
    cfg.force_local = !real_submit;
    Ok(cfg.build()?)
}

pub fn runner(settings: &Settings, exec: Arc<dyn JobExecutor>) -> Option<ToolRunner> {
    settings
        .shim
        .value
        .clone()
        .filter(|s| !s.is_empty())
        .map(|shim| ToolRunner::new(exec, shim, settings.runs_dir.value.join("logs")))
}

pub fn run_config(settings: &Settings) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default()
        .with_mode(settings.mode.value)
        .with_max_iterations(settings.max_iterations.value);
    config.backend_id = settings.backend.value.clone();
    config.cost = cost_model(settings)?;
    config.overwrite = settings.overwrite.value;
    config.optimizer.merge = settings.merge.value;
    config.optimizer.threshold = settings.threshold.value;
    Ok(config)
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::new(format!("{}: {e}", path.display())))
}

pub fn load_task(path: &Path) -> Result<TaskSpec, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::new(format!("task file {}: {e}", path.display())))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TaskList {
    Bare(Vec<TaskSpec>),
    Wrapped { tasks: Vec<TaskSpec> },
}

/// A JSON array of tasks, or an object with a `tasks` array.
pub fn load_task_list(path: &Path) -> Result<Vec<TaskSpec>, CliError> {
    let list: TaskList = serde_json::from_str(&read(path)?)
        .map_err(|e| CliError::new(format!("task list {}: expected an array of tasks: {e}", path.display())))?;
    let tasks = match list {
        TaskList::Bare(t) | TaskList::Wrapped { tasks: t } => t,
    };
    let mut seen = std::collections::BTreeSet::new();
    for t in &tasks {
        if !seen.insert(t.id.as_str()) {
            return Err(CliError::new(format!("task id `{}` appears twice in {}", t.id, path.display())));
        }
    }
    Ok(tasks)
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::new(format!("{}: {e}", path.display())))
}
