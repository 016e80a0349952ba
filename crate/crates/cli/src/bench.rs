//! The benchmark matrix: every (backend, mode, repetition) cell runs the
//! whole task list, then cells are aggregated into tables and radar data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toolforge_core::executor::JobExecutor;
use toolforge_core::scoring::tables::{emit_tables, radar_csv, ModeColumns, TableFormat, TableRow};
use toolforge_core::scoring::{normalize_radar, summarize, RadarAxis, Rubric, RunResults, Summary};
use toolforge_core::workflow::{run_task, RunMode, RunStatus, Services, ToolsetBinding};
use toolforge_core::workspace::{TaskSpec, RESULTS_FILE};

use crate::config::Settings;
use crate::runtime;
use crate::{CliError, Exit};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    pub tasks: Vec<TaskSpec>,
    pub modes: Vec<String>,
    #[serde(default = "mock_only")]
    pub backends: Vec<String>,
    #[serde(default = "three")]
    pub repetitions: u32,
    /// Seed toolset for tool-reuse cells.
    #[serde(default)]
    pub toolset: Option<PathBuf>,
    /// Rubric file per task id. Scored against the workspace's results file.
    #[serde(default)]
    pub rubrics: BTreeMap<String, PathBuf>,
    /// Display name per backend id.
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    /// Pricing model per backend id.
    #[serde(default)]
    pub models: BTreeMap<String, String>,
}

fn mock_only() -> Vec<String> {
    vec!["mock".into()]
}

fn three() -> u32 {
    3
}

/// A matrix that passed validation.
struct Plan {
    tasks: Vec<TaskSpec>,
    modes: Vec<RunMode>,
    backends: Vec<String>,
    repetitions: u32,
    toolset: Option<PathBuf>,
    rubrics: BTreeMap<String, Rubric>,
    labels: BTreeMap<String, String>,
    models: BTreeMap<String, String>,
}

fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError::new(format!("invalid matrix: {msg}"))
}

impl Matrix {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut m: Matrix = serde_json::from_str(&runtime::read(path)?).map_err(invalid)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(t) = m.toolset.as_mut() {
            rel(t);
        }
        m.rubrics.values_mut().for_each(rel);
        Ok(m)
    }

    fn validate(self) -> Result<Plan, CliError> {
        if self.tasks.is_empty() {
            return Err(invalid("no tasks"));
        }
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.id.as_str()) {
                return Err(invalid(format!("task `{}` listed twice", t.id)));
            }
        }
        if self.modes.is_empty() || self.backends.is_empty() {
            return Err(invalid("modes and backends must be non-empty"));
        }
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1"));
        }
        let mut modes = Vec::new();
        for m in &self.modes {
            let mode: RunMode = m.parse().map_err(invalid)?;
            if modes.contains(&mode) {
                return Err(invalid(format!("mode {mode} listed twice")));
            }
            modes.push(mode);
        }
        if modes.contains(&RunMode::ToolReuse) && !self.toolset.as_ref().is_some_and(|p| p.is_dir()) {
            return Err(invalid("tool_reuse needs an existing `toolset` directory"));
        }
        let mut rubrics = BTreeMap::new();
        for (task, path) in &self.rubrics {
            if !ids.contains(task.as_str()) {
                return Err(invalid(format!("rubric for unknown task `{task}`")));
            }
            let r = Rubric::from_json(&runtime::read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            rubrics.insert(task.clone(), r);
        }
        Ok(Plan {
            tasks: self.tasks,
            modes,
            backends: self.backends,
            repetitions: self.repetitions,
            toolset: self.toolset,
            rubrics,
            labels: self.labels,
            models: self.models,
        })
    }
}

/// Totals for one repetition of one (backend, mode) pair.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub backend: String,
    pub mode: RunMode,
    pub repetition: u32,
    pub time_min: f64,
    pub cost_usd: f64,
    pub iterations: f64,
    /// Mean combined score of the tasks that have a rubric.
    pub score: Option<f64>,
    pub statuses: BTreeMap<String, String>,
}

fn short(mode: RunMode) -> &'static str {
    match mode {
        RunMode::ZeroShot => "ZS",
        RunMode::ToolReuse => "TR",
        RunMode::EvaluatorOnly => "EO",
    }
}

fn run_cell(
    plan: &Plan,
    settings: &Settings,
    exec: &Arc<dyn JobExecutor>,
    out: &Path,
    (backend_id, mode, rep): (&str, RunMode, u32),
) -> Result<CellResult, CliError> {
    let backend = runtime::backend(settings, backend_id)?;
    let mut config = runtime::run_config(settings)?;
    config.mode = mode;
    config.overwrite = true;
    config.backend_id = backend_id.to_string();
    if let Some(model) = plan.models.get(backend_id) {
        let entries = match &settings.pricing.value {
            Some(p) => toolforge_core::backend::load_pricing(&runtime::read(p)?)?,
            None => toolforge_core::backend::pricing::default_pricing(),
        };
        config.cost = Some(toolforge_core::backend::CostModel::new(model.clone(), entries)?);
    }
    let binding = match mode {
        RunMode::ToolReuse => ToolsetBinding::Seeded(plan.toolset.clone().expect("validated")),
        _ => ToolsetBinding::Fresh,
    };
    let base = out.join("runs").join(backend_id).join(mode.as_str()).join(format!("r{rep}"));
    runtime::ensure_dir(&base)?;

    let mut cell = CellResult {
        backend: backend_id.to_string(),
        mode,
        repetition: rep,
        time_min: 0.0,
        cost_usd: 0.0,
        iterations: 0.0,
        score: None,
        statuses: BTreeMap::new(),
    };
    let mut scores = Vec::new();
    for task in &plan.tasks {
        let outcome = run_task(task, &config, &base, &binding, Services::new(backend.as_ref(), exec.as_ref()))?;
        cell.time_min += outcome.total_time.as_secs_f64() / 60.0;
        cell.cost_usd += outcome.total_cost.as_f64();
        cell.iterations += outcome.iterations.len() as f64;
        cell.statuses.insert(task.id.clone(), outcome.status.label().to_string());
        if let RunStatus::Error(e) = &outcome.status {
            log::warn!("{backend_id}/{mode}/r{rep}: task {} ended in error: {e}", task.id);
        }
        if let Some(rubric) = plan.rubrics.get(&task.id) {
            let path = base.join(&task.id).join(RESULTS_FILE);
            let results = match fs::read_to_string(&path) {
                Ok(text) => serde_json::from_str::<RunResults>(&text)
                    .map_err(|e| CliError::new(format!("{}: {e}", path.display())))?,
                Err(_) => {
                    log::warn!("{} is missing; task {} scores 0", path.display(), task.id);
                    RunResults::default()
                }
            };
            scores.push(rubric.score(&results)?.combined);
        }
    }
    cell.iterations /= plan.tasks.len() as f64;
    if !scores.is_empty() {
        cell.score = Some(scores.iter().sum::<f64>() / scores.len() as f64);
    }
    Ok(cell)
}

fn column(cells: &[&CellResult], f: fn(&CellResult) -> Option<f64>) -> Option<Summary> {
    let xs: Vec<f64> = cells.iter().filter_map(|c| f(c)).collect();
    summarize(&xs).ok()
}

fn rows(plan: &Plan, cells: &[CellResult]) -> Vec<TableRow> {
    plan.backends
        .iter()
        .map(|b| {
            let of = |mode: RunMode| -> Vec<&CellResult> { cells.iter().filter(|c| c.backend == *b && c.mode == mode).collect() };
            let metric = |f: fn(&CellResult) -> Option<f64>| ModeColumns {
                zs: column(&of(RunMode::ZeroShot), f),
                tr: column(&of(RunMode::ToolReuse), f),
                eo: column(&of(RunMode::EvaluatorOnly), f),
            };
            TableRow {
                label: plan.labels.get(b).cloned().unwrap_or_else(|| b.clone()),
                time_min: metric(|c| Some(c.time_min)),
                cost_usd: metric(|c| Some(c.cost_usd)),
                score: metric(|c| c.score),
            }
        })
        .collect()
}

fn radar(plan: &Plan, cells: &[CellResult]) -> (String, Vec<String>) {
    let mut labels = Vec::new();
    let (mut time, mut cost, mut score) = (Vec::new(), Vec::new(), Vec::new());
    for b in &plan.backends {
        for &mode in &plan.modes {
            let group: Vec<&CellResult> = cells.iter().filter(|c| c.backend == *b && c.mode == mode).collect();
            let mean = |f: fn(&CellResult) -> Option<f64>| column(&group, f).map(|s| s.mean);
            labels.push(format!("{} {}", plan.labels.get(b).unwrap_or(b), short(mode)));
            time.push(mean(|c| Some(c.time_min)).unwrap_or(0.0));
            cost.push(mean(|c| Some(c.cost_usd)).unwrap_or(0.0));
            score.push(mean(|c| c.score));
        }
    }
    let axis = |name: &str, lower, values| RadarAxis {
        name: name.into(),
        lower_is_better: lower,
        values,
    };
    let mut axes = vec![axis("time_min", true, time), axis("cost_usd", true, cost)];
    if score.iter().all(Option::is_some) {
        axes.push(axis("score", false, score.into_iter().flatten().collect()));
    }
    let normalized = normalize_radar(&axes);
    (radar_csv(&labels, &axes, &normalized), normalized.warnings)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::new(format!("{}: {e}", path.display())))
}

pub fn bench(settings: &Settings, matrix_file: &Path, out: Option<&Path>, real_submit: bool) -> Result<Exit, CliError> {
    let plan = Matrix::load(matrix_file)?.validate()?;
    // Fail on an unusable backend before any cell starts.
    for b in &plan.backends {
        runtime::backend(settings, b)?;
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| settings.runs_dir.value.join("bench"));
    runtime::ensure_dir(&out)?;
    let exec = runtime::executor(settings, real_submit)?;

    let mut grid = Vec::new();
    for b in &plan.backends {
        for &m in &plan.modes {
            for rep in 1..=plan.repetitions {
                grid.push((b.as_str(), m, rep));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.jobs.value)
        .build()
        .map_err(|e| CliError::new(format!("thread pool: {e}")))?;
    let cells: Vec<CellResult> = pool.install(|| {
        grid.par_iter()
            .map(|&key| run_cell(&plan, settings, &exec, &out, key))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let rows = rows(&plan, &cells);
    let markdown = emit_tables(&rows, TableFormat::Markdown);
    let (radar, warnings) = radar(&plan, &cells);
    for w in warnings {
        eprintln!("warning: {w}");
    }
    write(&out.join("tables.md"), &markdown)?;
    write(&out.join("tables.csv"), &emit_tables(&rows, TableFormat::Csv))?;
    write(&out.join("radar.csv"), &radar)?;
    write(&out.join("cells.json"), &(serde_json::to_string_pretty(&cells).expect("cells serialize") + "\n"))?;

    print!("{markdown}");
    let unfinished = cells.iter().flat_map(|c| c.statuses.values()).filter(|s| *s != "complete").count();
    println!(
        "{} cells, {} task runs, {unfinished} not complete; outputs in {}",
        cells.len(),
        cells.len() * plan.tasks.len(),
        out.display()
    );
    Ok(Exit::Success)
}
