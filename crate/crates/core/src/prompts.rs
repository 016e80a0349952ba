//! Stage prompt templates and their instantiation.
//!
//! A prompt is the stage template, then the question text, then (for the
//! analysis and execution stages) the toolset's root listing. Nothing below
//! the root is ever inlined; sessions browse deeper themselves.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::backend::{Stage, UnknownStage};
use crate::registry::{CategoryPath, Registry, RegistryError, INDEX_FILE};
use crate::workspace::TaskSpec;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    UnknownStage(#[from] UnknownStage),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("cannot read template {path}: {source}")]
    Template { path: String, source: io::Error },
}

fn default_template(stage: Stage) -> &'static str {
    match stage {
        Stage::ToolAnalysis => include_str!("../prompts/tool-analysis.md"),
        Stage::ToolGeneration => include_str!("../prompts/tool-generation.md"),
        Stage::ToolReview => include_str!("../prompts/tool-review.md"),
        Stage::TaskExecution => include_str!("../prompts/task-execution.md"),
        Stage::Evaluation => include_str!("../prompts/evaluation.md"),
        Stage::RequirementValidation => include_str!("../prompts/requirement-validation.md"),
        Stage::ToolsetReorganization => include_str!("../prompts/toolset-reorganization.md"),
        Stage::ToolMerge => include_str!("../prompts/tool-merge.md"),
    }
}

/// One template per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<Stage, String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            templates: Stage::ALL
                .into_iter()
                .map(|s| (s, default_template(s).to_string()))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Defaults, overridden by any `<stage>.md` present in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::default();
        for stage in Stage::ALL {
            let path = dir.join(format!("{stage}.md"));
            match fs::read_to_string(&path) {
                Ok(text) => {
                    set.templates.insert(stage, text);
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(source) => {
                    return Err(PromptError::Template {
                        path: path.display().to_string(),
                        source,
                    })
                }
            }
        }
        Ok(set)
    }

    pub fn template(&self, stage: Stage) -> &str {
        &self.templates[&stage]
    }
}

fn shows_toolset(stage: Stage) -> bool {
    matches!(stage, Stage::ToolAnalysis | Stage::TaskExecution)
}

/// The root level of the toolset: subdirectories and root tools only.
pub fn root_listing(registry: &Registry) -> Result<String, PromptError> {
    let node = registry.list_children(&CategoryPath::root())?;
    let mut out = String::new();
    if node.subcategories.is_empty() && node.tools.is_empty() {
        out.push_str("(the toolset is empty)\n");
        return Ok(out);
    }
    for sub in &node.subcategories {
        out.push_str(&format!("- {sub}/\n"));
    }
    for tool in &node.tools {
        let entry = registry.resolve(tool)?;
        out.push_str(&format!("- `{tool}`: {}\n", entry.manifest.first_line_description()));
    }
    Ok(out)
}

/// Deterministic prompt for `stage`.
pub fn select_stage_prompt(
    stage: Stage,
    task: &TaskSpec,
    view: Option<&Registry>,
    prompts: &PromptSet,
) -> Result<String, PromptError> {
    let mut out = prompts.template(stage).trim_end().to_string();
    out.push_str("\n\n## Question\n\n");
    out.push_str(task.prompt.trim_end());
    out.push('\n');
    if let (true, Some(reg)) = (shows_toolset(stage), view) {
        out.push_str(&format!(
            "\n## Toolset root\n\nNavigation index: `tools/{INDEX_FILE}`.\n\n"
        ));
        out.push_str(&root_listing(reg)?);
    }
    Ok(out)
}

/// [`select_stage_prompt`] for a stage given by name.
pub fn select_stage_prompt_named(
    stage: &str,
    task: &TaskSpec,
    view: Option<&Registry>,
    prompts: &PromptSet,
) -> Result<String, PromptError> {
    select_stage_prompt(stage.parse()?, task, view, prompts)
}

/// Appends a titled section.
pub fn with_section(prompt: &str, heading: &str, body: &str) -> String {
    format!("{}\n\n## {heading}\n\n{}\n", prompt.trim_end(), body.trim_end())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn task() -> TaskSpec {
        TaskSpec::new("q01", "Compute the HOMO-LUMO gap of benzene.")
    }

    #[test]
    fn execution_prompt_shows_question_and_root_only() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::create(dir.path()).unwrap();
        let mut deep = fixtures::stats_manifest();
        deep.category_path = CategoryPath::parse("analysis/stats");
        reg.register(&deep, b"x").unwrap();
        reg.register(&fixtures::add_manifest(), b"x").unwrap();
        let p = select_stage_prompt(Stage::TaskExecution, &task(), Some(&reg), &PromptSet::default()).unwrap();
        assert!(p.contains("HOMO-LUMO gap of benzene"));
        assert!(p.contains("- analysis/\n"));
        assert!(p.contains("- `add`: Add two integers."));
        assert!(!p.contains("stats"));
    }

    #[test]
    fn evaluation_prompt_carries_the_decision_logic() {
        let p = select_stage_prompt(Stage::Evaluation, &task(), None, &PromptSet::default()).unwrap();
        assert!(p.starts_with("You are a Report Evaluation Agent"));
        assert!(p.contains("Task complete; no further action needed"));
        assert!(p.contains("`next_step_needed` to false only when all four conditions hold"));
    }

    #[test]
    fn unknown_stage_and_determinism() {
        assert!(matches!(
            select_stage_prompt_named("foo", &task(), None, &PromptSet::default()),
            Err(PromptError::UnknownStage(_))
        ));
        let a = select_stage_prompt_named("tool-analysis", &task(), None, &PromptSet::default()).unwrap();
        let b = select_stage_prompt_named("tool-analysis", &task(), None, &PromptSet::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overrides_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("evaluation.md"), "Judge it.").unwrap();
        let set = PromptSet::from_dir(dir.path()).unwrap();
        assert_eq!(set.template(Stage::Evaluation), "Judge it.");
        assert_eq!(set.template(Stage::ToolReview), PromptSet::default().template(Stage::ToolReview));
    }
}
