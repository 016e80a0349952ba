use std::collections::BTreeSet;

use proptest::prelude::*;
use toolforge_core::backend::mock::{MockBackend, Playbook, PlaybookEntry, ScriptedResponse};
use toolforge_core::backend::{AgentBackend, AgentRequest, SessionKey, Stage};
use toolforge_core::fixtures;
use toolforge_core::prompts::{select_stage_prompt, PromptSet};
use toolforge_core::registry::{CategoryPath, Registry};
use toolforge_core::workspace::TaskSpec;

const LAYOUT: &[(&str, &[&str])] = &[
    ("", &["root_tool_00", "root_tool_01"]),
    ("alpha", &["alpha_tool_00", "alpha_tool_01", "alpha_tool_02"]),
    ("alpha/inner", &["inner_tool_00", "inner_tool_01"]),
    ("alpha/inner/deep", &["deep_tool_00"]),
    ("beta", &["beta_tool_00", "beta_tool_01"]),
    ("beta/leaf", &["leaf_tool_00"]),
];

const CANDIDATES: &[&str] = &["", "alpha", "alpha/inner", "alpha/inner/deep", "beta", "beta/leaf", "gamma", "alpha/nope", "../etc"];

fn hierarchy(dir: &std::path::Path) -> Registry {
    let reg = Registry::create(dir.join("tools")).unwrap();
    for (cat, tools) in LAYOUT {
        for t in *tools {
            let mut m = fixtures::filler_manifest(t, &format!("Tool {t}."));
            m.category_path = CategoryPath::parse(cat);
            reg.register(&m, b"# noop\n").unwrap();
        }
    }
    reg.generate_index().unwrap();
    reg
}

fn tools_under(path: &CategoryPath) -> Vec<&'static str> {
    LAYOUT
        .iter()
        .filter(|(c, _)| CategoryPath::parse(c) == *path)
        .flat_map(|(_, t)| t.iter().copied())
        .collect()
}

fn check_session(script: Vec<String>) -> Result<(), TestCaseError> {
    let dir = tempfile::tempdir().unwrap();
    let reg = hierarchy(dir.path());
    let task = TaskSpec::new("nav", "Find a tool.");
    let prompt = select_stage_prompt(Stage::ToolAnalysis, &task, Some(&reg), &PromptSet::default()).unwrap();
    let mock = MockBackend::new(Playbook::new().with(PlaybookEntry::new(
        "*",
        Stage::ToolAnalysis,
        vec![ScriptedResponse {
            navigate: script,
            ..Default::default()
        }],
    )));
    let req = AgentRequest::new(Stage::ToolAnalysis, prompt, dir.path(), SessionKey::new("nav", 1)).with_toolset(reg.root());
    mock.spawn_session(&req).unwrap();

    for s in mock.sessions() {
        let mut seen = BTreeSet::from([CategoryPath::root()]);
        for v in &s.visited {
            let parent = CategoryPath(v.0[..v.0.len().saturating_sub(1)].to_vec());
            prop_assert!(v.is_root() || seen.contains(&parent), "{v} listed before its parent");
            seen.insert(v.clone());
        }
        let allowed: BTreeSet<&str> = seen.iter().flat_map(tools_under).collect();
        let text = std::iter::once(s.prompt.clone())
            .chain(s.transcript.iter().map(|t| t.summary.clone()))
            .collect::<Vec<_>>()
            .join("\n");
        for (_, tools) in LAYOUT {
            for t in *tools {
                if text.contains(t) {
                    prop_assert!(allowed.contains(t), "{t} shown outside the visited closure {seen:?}");
                }
            }
        }
    }
    Ok(())
}

#[test]
fn prompt_alone_names_only_root_tools() {
    let dir = tempfile::tempdir().unwrap();
    let reg = hierarchy(dir.path());
    let prompt = select_stage_prompt(Stage::ToolAnalysis, &TaskSpec::new("nav", "x"), Some(&reg), &PromptSet::default()).unwrap();
    assert!(prompt.contains("root_tool_00") && prompt.contains("alpha/"));
    assert!(!prompt.contains("alpha_tool_00") && !prompt.contains("deep_tool_00"));
}

#[test]
fn deep_listing_without_parents_reveals_nothing() {
    check_session(vec!["alpha/inner/deep".into(), "beta/leaf".into()]).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sessions_never_see_tools_beyond_their_path(
        script in prop::collection::vec(prop::sample::select(CANDIDATES), 0..8)
    ) {
        check_session(script.into_iter().map(String::from).collect())?;
    }
}
