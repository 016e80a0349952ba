//! Toolset upkeep: splitting oversized directories and merging
//! near-duplicate tools.

pub mod embed;
pub mod merge;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{spawn_checked, AgentBackend, AgentRequest, AgentResponse, BackendError, SessionKey, Stage};
use crate::executor::ExecError;
use crate::forge::ForgeError;
use crate::prompts::{with_section, PromptSet};
use crate::registry::schema::is_identifier;
use crate::registry::{write_atomic, CategoryPath, Registry, RegistryError, RegistryWriter, MANIFEST_SUFFIX};

pub use embed::{embed_and_cluster, EmbedError, EmbeddingProvider, HashEmbedder, MergeCluster};
pub use merge::{
    apply_merge_with_rollback, extract_signatures, merge_pass, propose_merge, BackupSnapshot, MergeContext,
    MergeOutcome, MergeProposal, MergeRecord, BACKUP_DIR, STAGING_DIR,
};

pub const DEFAULT_THRESHOLD: usize = 10;
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub enabled: bool,
    pub threshold: usize,
    pub merge: bool,
    pub sim_threshold: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: DEFAULT_THRESHOLD,
            merge: false,
            sim_threshold: DEFAULT_SIM_THRESHOLD,
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("invalid reorganization plan: {0}")]
    InvalidPlan(String),
    #[error("invalid merge proposal: {0}")]
    InvalidProposal(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Executor(#[from] ExecError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Every directory with more than `threshold` direct children (tools plus
/// subdirectories).
pub fn scan_oversized(registry: &Registry, threshold: usize) -> Result<Vec<CategoryPath>, RegistryError> {
    let mut out = Vec::new();
    for path in registry.all_categories()? {
        if registry.list_children(&path)?.child_count() > threshold {
            out.push(path);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subcategory {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReorgPlan {
    pub target_dir: CategoryPath,
    pub new_subcategories: Vec<Subcategory>,
    pub unmoved: Vec<String>,
}

impl ReorgPlan {
    pub fn empty(target_dir: CategoryPath) -> Self {
        Self {
            target_dir,
            new_subcategories: Vec::new(),
            unmoved: Vec::new(),
        }
    }

    pub fn moved_count(&self) -> usize {
        self.new_subcategories.iter().map(|s| s.members.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedReorg {
    pub plan: ReorgPlan,
    /// The directory would still exceed the threshold after the plan.
    pub flagged: bool,
}

#[derive(Deserialize)]
struct ReorgAnswer {
    new_subcategories: Vec<Subcategory>,
}

/// Checks `groups` against the current contents of `dir` and completes the
/// plan with the unmoved tools.
pub fn build_reorg_plan(
    dir: &CategoryPath,
    groups: Vec<Subcategory>,
    registry: &Registry,
    threshold: usize,
) -> Result<ProposedReorg, OptimizeError> {
    let node = registry.list_children(dir)?;
    let here: BTreeSet<&String> = node.tools.iter().collect();
    let mut names = BTreeSet::new();
    let mut placed = BTreeSet::new();
    for g in &groups {
        if !is_identifier(&g.name) {
            return Err(OptimizeError::InvalidPlan(format!(
                "subcategory name `{}` is not an identifier",
                g.name
            )));
        }
        if node.tools.contains(&g.name) {
            return Err(OptimizeError::InvalidPlan(format!(
                "subcategory `{}` would shadow a tool of the same name",
                g.name
            )));
        }
        if !names.insert(g.name.as_str()) {
            return Err(OptimizeError::InvalidPlan(format!("subcategory `{}` listed twice", g.name)));
        }
        if g.members.is_empty() {
            return Err(OptimizeError::InvalidPlan(format!("subcategory `{}` is empty", g.name)));
        }
        for m in &g.members {
            if !here.contains(m) {
                return Err(OptimizeError::InvalidPlan(format!("`{m}` is not a tool in {dir}")));
            }
            if !placed.insert(m.as_str()) {
                return Err(OptimizeError::InvalidPlan(format!("`{m}` assigned to more than one subcategory")));
            }
        }
    }
    let unmoved: Vec<String> = node.tools.iter().filter(|t| !placed.contains(t.as_str())).cloned().collect();
    let new_dirs = names.iter().filter(|n| !node.subcategories.iter().any(|s| s == *n)).count();
    let after = node.subcategories.len() + new_dirs + unmoved.len();
    Ok(ProposedReorg {
        plan: ReorgPlan {
            target_dir: dir.clone(),
            new_subcategories: groups,
            unmoved,
        },
        flagged: after > threshold,
    })
}

/// Asks the backend to split `dir`. Only `dir`'s own entries are shown.
pub fn propose_reorg(
    dir: &CategoryPath,
    registry: &Registry,
    backend: &dyn AgentBackend,
    threshold: usize,
    key: SessionKey,
    prompts: &PromptSet,
) -> Result<(ProposedReorg, AgentResponse), OptimizeError> {
    let node = registry.list_children(dir)?;
    let mut listing = String::new();
    for sub in &node.subcategories {
        listing.push_str(&format!("- {sub}/\n"));
    }
    for tool in &node.tools {
        let e = registry.resolve(tool)?;
        listing.push_str(&format!("- `{tool}`: {}\n", e.manifest.first_line_description()));
    }
    let prompt = with_section(
        prompts.template(Stage::ToolsetReorganization),
        &format!("Directory `{dir}` ({} entries, threshold {threshold})", node.child_count()),
        &listing,
    );
    let req = AgentRequest::new(Stage::ToolsetReorganization, prompt, registry.root(), key.with_subject(dir.to_string()))
        .with_toolset(registry.root());
    let response = spawn_checked(backend, &req)?;
    let answer: ReorgAnswer = response
        .final_message
        .clone()
        .ok_or_else(|| OptimizeError::InvalidPlan("organizer gave no plan".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| OptimizeError::InvalidPlan(e.to_string())))?;
    let proposed = build_reorg_plan(dir, answer.new_subcategories, registry, threshold)?;
    Ok((proposed, response))
}

/// Called before each step of a mutation; an error aborts and rolls back.
pub type FailPoint<'a> = &'a dyn Fn(usize) -> io::Result<()>;

pub fn no_failpoint(_: usize) -> io::Result<()> {
    Ok(())
}

enum Undo {
    Moved { from: PathBuf, to: PathBuf },
    Rewrote { path: PathBuf, original: Vec<u8> },
    CreatedDir(PathBuf),
}

fn undo_all(journal: Vec<Undo>) {
    for step in journal.into_iter().rev() {
        let result = match step {
            Undo::Moved { from, to } => fs::rename(&to, &from),
            Undo::Rewrote { path, original } => fs::write(&path, original),
            Undo::CreatedDir(dir) => fs::remove_dir(&dir),
        };
        if let Err(e) = result {
            log::error!("rollback step failed: {e}");
        }
    }
}

pub fn apply_reorg(plan: &ReorgPlan, registry: &Registry) -> Result<(), OptimizeError> {
    apply_reorg_with(plan, registry, &no_failpoint)
}

/// Moves the plan's tools, rewrites their manifests' category paths and
/// regenerates the index. Any failure undoes every completed step.
pub fn apply_reorg_with(
    plan: &ReorgPlan,
    registry: &Registry,
    failpoint: FailPoint<'_>,
) -> Result<(), OptimizeError> {
    if plan.moved_count() == 0 {
        return Ok(());
    }
    let writer = registry.write();
    let mut journal = Vec::new();
    match apply_locked(plan, &writer, failpoint, &mut journal) {
        Ok(()) => {
            writer.generate_index()?;
            Ok(())
        }
        Err(e) => {
            undo_all(journal);
            Err(e)
        }
    }
}

fn apply_locked(
    plan: &ReorgPlan,
    writer: &RegistryWriter<'_>,
    failpoint: FailPoint<'_>,
    journal: &mut Vec<Undo>,
) -> Result<(), OptimizeError> {
    let registry = writer.registry();
    // Validate against the tree as it is now, under the lock.
    let groups = plan.new_subcategories.clone();
    build_reorg_plan(&plan.target_dir, groups, registry, usize::MAX)?;
    let mut step = 0;
    for group in &plan.new_subcategories {
        let dest_cat = plan.target_dir.child(&group.name);
        let dest = registry.root().join(dest_cat.to_relative());
        if !dest.exists() {
            failpoint(step)?;
            step += 1;
            fs::create_dir(&dest)?;
            journal.push(Undo::CreatedDir(dest.clone()));
        }
        for member in &group.members {
            let entry = registry.resolve(member)?;
            let new_source = dest.join(&entry.manifest.entrypoint.source);
            let new_manifest = dest.join(format!("{member}{MANIFEST_SUFFIX}"));

            failpoint(step)?;
            step += 1;
            fs::rename(&entry.source_path, &new_source)?;
            journal.push(Undo::Moved { from: entry.source_path.clone(), to: new_source });

            failpoint(step)?;
            step += 1;
            let original = fs::read(&entry.manifest_path)?;
            fs::rename(&entry.manifest_path, &new_manifest)?;
            journal.push(Undo::Moved { from: entry.manifest_path.clone(), to: new_manifest.clone() });

            failpoint(step)?;
            step += 1;
            let mut m = entry.manifest.clone();
            m.category_path = dest_cat.clone();
            write_atomic(&new_manifest, m.to_json().as_bytes())?;
            journal.push(Undo::Rewrote { path: new_manifest, original });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReorgRecord {
    pub proposal: ProposedReorg,
    pub applied: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct OptimizeReport {
    pub tools_before: usize,
    pub tools_after: usize,
    pub reorgs: Vec<ReorgRecord>,
    pub merges: Vec<MergeRecord>,
    /// Directories still over the threshold at the end.
    pub still_oversized: Vec<CategoryPath>,
    #[serde(skip)]
    pub sessions: Vec<(Stage, AgentResponse)>,
}

/// Reorganizes until no directory is oversized. Each directory is proposed
/// at most once per call, so a stubborn directory cannot loop forever.
pub fn reorganize(
    registry: &Registry,
    backend: &dyn AgentBackend,
    threshold: usize,
    key: &SessionKey,
    prompts: &PromptSet,
    report: &mut OptimizeReport,
) -> Result<(), OptimizeError> {
    let mut attempted = BTreeSet::new();
    loop {
        let pending: Vec<CategoryPath> = scan_oversized(registry, threshold)?
            .into_iter()
            .filter(|p| !attempted.contains(p))
            .collect();
        let Some(dir) = pending.into_iter().next() else {
            break;
        };
        attempted.insert(dir.clone());
        let (proposal, response) = propose_reorg(&dir, registry, backend, threshold, key.clone(), prompts)?;
        report.sessions.push((Stage::ToolsetReorganization, response));
        if proposal.flagged {
            log::warn!("reorganization of {dir} leaves it above the threshold of {threshold}");
        }
        apply_reorg(&proposal.plan, registry)?;
        report.reorgs.push(ReorgRecord {
            applied: proposal.plan.moved_count() > 0,
            proposal,
        });
    }
    report.still_oversized = scan_oversized(registry, threshold)?;
    Ok(())
}

/// The pre-task pass: optional merging, then reorganization.
pub fn optimize_toolset(
    registry: &Registry,
    backend: &dyn AgentBackend,
    merge_ctx: Option<merge::MergeContext<'_>>,
    settings: &OptimizerSettings,
    key: &SessionKey,
    prompts: &PromptSet,
) -> Result<OptimizeReport, OptimizeError> {
    let mut report = OptimizeReport {
        tools_before: registry.tool_count()?,
        ..Default::default()
    };
    if !settings.enabled {
        report.tools_after = report.tools_before;
        return Ok(report);
    }
    if let (true, Some(ctx)) = (settings.merge, merge_ctx) {
        merge_pass(registry, backend, &ctx, settings.sim_threshold, key, prompts, &mut report)?;
    }
    reorganize(registry, backend, settings.threshold, key, prompts, &mut report)?;
    report.tools_after = registry.tool_count()?;
    Ok(report)
}

/// Name and source digest of every tool, for conservation checks.
pub fn tool_digests(registry: &Registry) -> Result<BTreeMap<String, String>, RegistryError> {
    let mut out = BTreeMap::new();
    for e in registry.all_tools()? {
        let bytes = fs::read(&e.source_path)?;
        out.insert(e.manifest.name.clone(), crate::workspace::digest_bytes(&bytes));
    }
    Ok(out)
}
