//! Ready-made mock playbooks for end-to-end runs.
//!
//! [`TaskScript`] describes one task's behaviour: which tools the analyzer
//! asks for on the first iteration, and on which iteration the evaluator is
//! satisfied. Drafted tools are shell scripts whose single unit test exits 0.

use serde_json::json;

use crate::backend::mock::{Playbook, PlaybookEntry, ScriptedResponse};
use crate::backend::{Stage, TokenUsage};
use crate::evaluator::EvaluationResult;
use crate::forge::ToolRequirement;
use crate::registry::{ParamSpec, SemanticType};
use crate::workspace::{InputFile, EVALUATION_FILE, REPORT_FILE};

pub fn text(path: &str, contents: &str) -> InputFile {
    InputFile {
        path: path.into(),
        contents: contents.as_bytes().to_vec(),
    }
}

/// A requirement with one integer input and one integer output.
pub fn requirement(name: &str, description: &str) -> ToolRequirement {
    ToolRequirement {
        name: name.into(),
        description: description.into(),
        method_hint: String::new(),
        inputs: vec![ParamSpec::new("x", SemanticType::Integer)],
        outputs: vec![ParamSpec::new("y", SemanticType::Integer)],
    }
}

pub fn evaluation(result: &EvaluationResult, usage: TokenUsage) -> ScriptedResponse {
    ScriptedResponse {
        writes: vec![text(
            EVALUATION_FILE,
            &serde_json::to_string_pretty(result).expect("evaluation serializes"),
        )],
        usage,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskScript {
    pub task_id: String,
    /// Requested on iteration 1; later iterations request nothing new.
    pub requirements: Vec<ToolRequirement>,
    pub reuse: Vec<String>,
    /// Iteration whose evaluation says complete; `None` never completes.
    pub pass_on: Option<u32>,
    pub write_report: bool,
    /// Usage charged to every session.
    pub usage: TokenUsage,
}

impl TaskScript {
    pub fn new(task_id: &str) -> Self {
        Self {
            task_id: task_id.into(),
            requirements: Vec::new(),
            reuse: Vec::new(),
            pass_on: Some(1),
            write_report: true,
            usage: TokenUsage::default(),
        }
    }

    pub fn requiring(mut self, reqs: Vec<ToolRequirement>) -> Self {
        self.requirements = reqs;
        self
    }

    pub fn reusing(mut self, names: &[&str]) -> Self {
        self.reuse = names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn passing_on(mut self, k: Option<u32>) -> Self {
        self.pass_on = k;
        self
    }

    pub fn with_usage(mut self, usage: TokenUsage) -> Self {
        self.usage = usage;
        self
    }

    pub fn entries(&self) -> Vec<PlaybookEntry> {
        let id = self.task_id.as_str();
        let once = |stage, r: ScriptedResponse| PlaybookEntry::new(id, stage, vec![r]);
        let answer = |v: serde_json::Value| ScriptedResponse {
            final_message: Some(v),
            usage: self.usage,
            ..Default::default()
        };
        let plan = |reqs: &[ToolRequirement]| {
            answer(json!({
                "task_analysis": format!("plan for {id}"),
                "reuse": self.reuse,
                "requirements": reqs,
            }))
        };
        let mut out = vec![
            once(Stage::ToolAnalysis, plan(&[])),
            once(Stage::ToolAnalysis, plan(&self.requirements)).at_iteration(1),
            once(Stage::RequirementValidation, answer(json!({"accept": true}))),
            once(
                Stage::ToolGeneration,
                ScriptedResponse {
                    writes: vec![
                        text("{{subject}}.sh", "#!/bin/sh\necho '{\"y\": 0}'\n"),
                        text("tests/test_{{subject}}.sh", "test -f \"$TOOL_SOURCE\"\n"),
                    ],
                    usage: self.usage,
                    ..Default::default()
                },
            ),
            once(Stage::ToolReview, answer(json!({"verdict": "approved"}))),
            once(
                Stage::TaskExecution,
                ScriptedResponse {
                    writes: if self.write_report {
                        vec![text(REPORT_FILE, "# {{task_id}}\n\niteration {{iteration}}\n")]
                    } else {
                        Vec::new()
                    },
                    usage: self.usage,
                    ..Default::default()
                },
            ),
        ];
        let refine = evaluation(&EvaluationResult::needs_work("refine the analysis"), self.usage);
        let done = evaluation(&EvaluationResult::complete(), self.usage);
        match self.pass_on {
            Some(1) => out.push(once(Stage::Evaluation, done)),
            Some(k) => {
                out.push(once(Stage::Evaluation, refine));
                out.push(once(Stage::Evaluation, done).at_iteration(k));
            }
            None => out.push(once(Stage::Evaluation, refine)),
        }
        out
    }
}

pub fn playbook(scripts: &[TaskScript]) -> Playbook {
    Playbook {
        entries: scripts.iter().flat_map(TaskScript::entries).collect(),
    }
}

/// Organizer answer for `dir` (`"/"` for the root).
pub fn reorg_entry(dir: &str, groups: &[(&str, Vec<String>)]) -> PlaybookEntry {
    let subs: Vec<_> = groups
        .iter()
        .map(|(name, members)| json!({"name": name, "members": members}))
        .collect();
    PlaybookEntry::new(
        "*",
        Stage::ToolsetReorganization,
        vec![ScriptedResponse {
            final_message: Some(json!({ "new_subcategories": subs })),
            ..Default::default()
        }],
    )
    .for_subject(dir)
}

/// Splits the flat corpus by name family, then splits geometry again.
pub fn flat_corpus_reorg() -> Vec<PlaybookEntry> {
    let names: Vec<String> = super::flat_corpus().into_iter().map(|m| m.name).collect();
    let family = |prefix: &str| -> Vec<String> {
        names.iter().filter(|n| n.starts_with(prefix)).cloned().collect()
    };
    let geo = |xs: &[&str]| -> Vec<String> { xs.iter().map(|x| format!("geometry_{x}")).collect() };
    vec![
        reorg_entry(
            "/",
            &[("geometry", family("geometry_")), ("energy", family("energy_")), ("plotting", family("plot_"))],
        ),
        reorg_entry(
            "geometry",
            &[
                ("transforms", geo(&["align", "center", "rotate", "translate"])),
                ("structure_io", geo(&["smiles_to_xyz", "read_xyz", "write_xyz"])),
                ("measures", geo(&["bond_lengths", "bond_angles", "dihedrals", "rmsd", "point_group"])),
            ],
        ),
    ]
}

/// Unified name proposed for each of the merge corpus pairs.
pub const UNIFIED_NAMES: [&str; 3] = ["dft_single_point", "dft_geometry_optimizer", "hessian_vibrational"];

/// Merger proposals for the three near-duplicate pairs, plus a staging
/// reviewer that approves or always asks for revision.
pub fn merge_playbook(approve: bool) -> Playbook {
    let corpus = super::merge_corpus();
    let mut pb = Playbook::new();
    for ((a, b), unified) in super::MERGE_PAIRS.iter().zip(UNIFIED_NAMES) {
        let mut members = [a.to_string(), b.to_string()];
        members.sort();
        let base = corpus.iter().find(|m| m.name == *a).expect("pair member exists");
        let mut manifest = base.clone();
        manifest.name = unified.into();
        manifest.description = format!("{} Optional implicit solvent.", base.description);
        manifest.entrypoint.source = format!("{unified}.py");
        manifest.inputs.retain(|p| p.name != "solvent");
        manifest
            .inputs
            .push(ParamSpec::new("solvent", SemanticType::String).optional());
        pb = pb.with(
            PlaybookEntry::new(
                "*",
                Stage::ToolMerge,
                vec![ScriptedResponse {
                    final_message: Some(json!({
                        "merge": true,
                        "rationale": "same computation; solvent becomes optional",
                        "unified_name": unified,
                        "unified_source": format!("# unified `{unified}`\n"),
                        "unified_manifest": manifest,
                        "supersedes": members,
                    })),
                    ..Default::default()
                }],
            )
            .for_subject(&members.join("+")),
        );
    }
    let review = if approve {
        json!({"verdict": "approved"})
    } else {
        json!({"verdict": "revise", "issues": ["unified tool drops an output"]})
    };
    pb.with(PlaybookEntry::new(
        "*",
        Stage::ToolReview,
        vec![ScriptedResponse {
            final_message: Some(review),
            ..Default::default()
        }],
    ))
}
