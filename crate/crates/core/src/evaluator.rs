//! Solution evaluation: the `evaluation.json` contract and the stop/continue
//! decision.

use std::fs;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{spawn_checked, AgentBackend, AgentRequest, AgentResponse, BackendError, SessionKey, Stage};
use crate::workspace::WorkspacePaths;

pub const COMPLETION_SENTINEL: &str = "Task complete; no further action needed";

/// Plan used when the engine overrides a result because `report.md` is absent.
pub const MISSING_REPORT_PLAN: &str =
    "report.md is missing. Write report.md in the workspace root with the results, tables and figures the task asks for.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub bug_need_fix: bool,
    pub script_complete: bool,
    pub further_simulation_needed: bool,
    pub result_complete: bool,
    pub next_step_needed: bool,
    pub next_step_plan: String,
}

impl EvaluationResult {
    /// `next_step_needed` implied by the four condition flags.
    pub fn expected_next_step(&self) -> bool {
        needs_next_step(
            self.bug_need_fix,
            self.script_complete,
            self.further_simulation_needed,
            self.result_complete,
        )
    }

    pub fn complete() -> Self {
        Self {
            bug_need_fix: false,
            script_complete: true,
            further_simulation_needed: false,
            result_complete: true,
            next_step_needed: false,
            next_step_plan: COMPLETION_SENTINEL.into(),
        }
    }

    pub fn needs_work(plan: impl Into<String>) -> Self {
        Self {
            result_complete: false,
            next_step_needed: true,
            next_step_plan: plan.into(),
            ..Self::complete()
        }
    }
}

pub fn needs_next_step(bug: bool, script: bool, further: bool, result: bool) -> bool {
    !(!bug && script && !further && result)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("evaluator session did not write evaluation.json")]
    MissingEvaluationFile,
    #[error("cannot parse evaluation.json: {0}")]
    Parse(String),
    #[error("inconsistent flags: next_step_needed is {stated} but the conditions imply {implied}")]
    InconsistentFlags { stated: bool, implied: bool },
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Strictly parses an evaluation payload. All six fields are required and
/// typed; unknown fields are ignored.
pub fn parse_evaluation(bytes: &[u8]) -> Result<EvaluationResult, EvalError> {
    let mut r: EvaluationResult =
        serde_json::from_slice(bytes).map_err(|e| EvalError::Parse(e.to_string()))?;
    let implied = r.expected_next_step();
    if r.next_step_needed != implied {
        return Err(EvalError::InconsistentFlags {
            stated: r.next_step_needed,
            implied,
        });
    }
    if r.next_step_needed {
        if r.next_step_plan.trim().is_empty() {
            return Err(EvalError::Parse(
                "next_step_plan is empty although a next step is needed".into(),
            ));
        }
    } else if r.next_step_plan != COMPLETION_SENTINEL {
        log::warn!(
            "evaluation marked complete with plan {:?}; normalizing to the completion sentinel",
            r.next_step_plan
        );
        r.next_step_plan = COMPLETION_SENTINEL.into();
    }
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct Evaluated {
    pub result: EvaluationResult,
    pub response: AgentResponse,
    /// True when a missing report forced `result_complete` to false.
    pub report_override: bool,
}

/// Runs one evaluation session and reads back `evaluation.json`.
///
/// A stale `evaluation.json` is removed first, so the file read is always
/// this session's. A missing `report.md` forces `result_complete = false`.
pub fn evaluate(
    ws: &WorkspacePaths,
    backend: &dyn AgentBackend,
    key: SessionKey,
    prompt: &str,
) -> Result<Evaluated, EvalError> {
    if !ws.question.is_file() {
        return Err(EvalError::Io(io::Error::new(
            io::ErrorKind::NotFound,
            "question.md is missing",
        )));
    }
    match fs::remove_file(&ws.evaluation) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
        _ => {}
    }
    let request = AgentRequest::new(Stage::Evaluation, prompt, &ws.root, key);
    let response = spawn_checked(backend, &request)?;
    let bytes = match fs::read(&ws.evaluation) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(EvalError::MissingEvaluationFile),
        Err(e) => return Err(e.into()),
    };
    let mut result = parse_evaluation(&bytes)?;
    let mut report_override = false;
    if !ws.report.is_file() && result.result_complete {
        result.result_complete = false;
        report_override = true;
    }
    if !ws.report.is_file() && !result.next_step_needed {
        result.next_step_needed = true;
        result.next_step_plan = MISSING_REPORT_PLAN.into();
    }
    Ok(Evaluated {
        result,
        response,
        report_override,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    StopComplete,
    Continue(String),
    StopFailed,
}

pub fn decide_next(eval: &EvaluationResult, iteration: u32, max_iterations: u32) -> Decision {
    if !eval.next_step_needed {
        Decision::StopComplete
    } else if iteration < max_iterations {
        Decision::Continue(eval.next_step_plan.clone())
    } else {
        Decision::StopFailed
    }
}
