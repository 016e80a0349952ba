//! Merging near-duplicate tools behind a backup, a staging check and a
//! rollback path.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::embed::{embed_and_cluster, EmbeddingProvider, MergeCluster};
use super::{no_failpoint, FailPoint, OptimizeError, OptimizeReport};
use crate::backend::{spawn_checked, AgentBackend, AgentRequest, AgentResponse, SessionKey, Stage};
use crate::forge::{contract_check, ContractVerdict, Verdict};
use crate::prompts::{with_section, PromptSet};
use crate::registry::invoke::ToolRunner;
use crate::registry::{
    validate_manifest, write_atomic, CollisionPolicy, ParamSpec, Registry, RegistryError, ToolManifest,
    INDEX_FILE,
};

pub const BACKUP_DIR: &str = ".merge_backup";
pub const STAGING_DIR: &str = ".merge_staging";

fn render_params(params: &[ParamSpec]) -> String {
    params
        .iter()
        .map(|p| {
            let opt = if p.required { "" } else { "?" };
            format!("{}{opt}: {}", p.name, p.semantic_type)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// `name(a: integer, b?: string) -> out: number — first description line`.
pub fn signature_of(m: &ToolManifest) -> String {
    let outputs = if m.outputs.is_empty() {
        "()".to_string()
    } else {
        render_params(&m.outputs)
    };
    format!(
        "{}({}) -> {outputs} — {}",
        m.name,
        render_params(&m.inputs),
        m.first_line_description()
    )
}

/// Signature text of every tool, keyed by name.
pub fn extract_signatures(registry: &Registry) -> Result<BTreeMap<String, String>, RegistryError> {
    Ok(registry
        .all_tools()?
        .into_iter()
        .map(|e| (e.manifest.name.clone(), signature_of(&e.manifest)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MergeProposal {
    Merge {
        unified_name: String,
        unified_source: String,
        unified_manifest: ToolManifest,
        supersedes: Vec<String>,
        rationale: String,
    },
    Keep {
        rationale: String,
    },
}

#[derive(Deserialize)]
struct RawProposal {
    merge: bool,
    #[serde(default)]
    rationale: String,
    unified_name: Option<String>,
    unified_source: Option<String>,
    unified_manifest: Option<ToolManifest>,
    #[serde(default)]
    supersedes: Vec<String>,
}

fn parse_proposal(v: Value, cluster: &MergeCluster, registry: &Registry) -> Result<MergeProposal, String> {
    let raw: RawProposal = serde_json::from_value(v).map_err(|e| e.to_string())?;
    if !raw.merge {
        return Ok(MergeProposal::Keep {
            rationale: raw.rationale,
        });
    }
    let name = raw.unified_name.ok_or("unified_name missing")?;
    let source = raw.unified_source.ok_or("unified_source missing")?;
    let manifest = raw.unified_manifest.ok_or("unified_manifest missing")?;
    if manifest.name != name {
        return Err(format!("manifest names `{}` but unified_name is `{name}`", manifest.name));
    }
    if raw.supersedes.is_empty() {
        return Err("supersedes is empty".into());
    }
    if let Some(x) = raw.supersedes.iter().find(|s| !cluster.members.contains(s)) {
        return Err(format!("`{x}` is not part of the cluster"));
    }
    if !raw.supersedes.contains(&name) && registry.contains(&name).map_err(|e| e.to_string())? {
        return Err(format!("`{name}` already names a tool outside the merge"));
    }
    let mut check = manifest.clone();
    check.tests_passed = true;
    let problems = validate_manifest(&check);
    if !problems.is_empty() {
        return Err(format!("unified manifest invalid: {}", problems.join("; ")));
    }
    Ok(MergeProposal::Merge {
        unified_name: name,
        unified_source: source,
        unified_manifest: manifest,
        supersedes: raw.supersedes,
        rationale: raw.rationale,
    })
}

fn merge_prompt(cluster: &MergeCluster, registry: &Registry, prompts: &PromptSet) -> Result<String, OptimizeError> {
    let mut body = String::new();
    for name in &cluster.members {
        let e = registry.resolve(name)?;
        let source = fs::read_to_string(&e.source_path).unwrap_or_default();
        body.push_str(&format!(
            "### `{name}`\n\nSignature: `{}`\n\nManifest:\n```json\n{}```\n\nSource (`{}`):\n```\n{}\n```\n\n",
            signature_of(&e.manifest),
            e.manifest.to_json(),
            e.manifest.entrypoint.source,
            source.trim_end()
        ));
    }
    Ok(with_section(prompts.template(Stage::ToolMerge), "Candidate tools", &body))
}

/// One merger session. A malformed answer is returned as `Err(reason)` in
/// the inner result so the caller can retry with feedback.
pub fn propose_merge(
    cluster: &MergeCluster,
    registry: &Registry,
    backend: &dyn AgentBackend,
    key: SessionKey,
    prompts: &PromptSet,
    feedback: Option<&str>,
) -> Result<(Result<MergeProposal, String>, AgentResponse), OptimizeError> {
    let mut prompt = merge_prompt(cluster, registry, prompts)?;
    if let Some(f) = feedback {
        prompt = with_section(&prompt, "Why the previous proposal was rejected", f);
    }
    let req = AgentRequest::new(Stage::ToolMerge, prompt, registry.root(), key.with_subject(cluster.members.join("+")))
        .with_toolset(registry.root());
    let response = spawn_checked(backend, &req)?;
    let parsed = match response.final_message.clone() {
        Some(v) => parse_proposal(v, cluster, registry),
        None => Err("merger gave no proposal".into()),
    };
    Ok((parsed, response))
}

/// Copies of the files a merge may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BackupSnapshot {
    pub dir: PathBuf,
    /// Paths relative to the registry root.
    pub files: Vec<PathBuf>,
}

impl BackupSnapshot {
    /// Backs up the sources and manifests of `names` plus the index under
    /// `.merge_backup/<YYYYMMDD_HHMMSS>/`.
    pub fn create(registry: &Registry, names: &[String]) -> Result<Self, OptimizeError> {
        let stamp = Utc::now().format("%Y%m%d_%H%M%S").to_string();
        let base = registry.root().join(BACKUP_DIR);
        let mut dir = base.join(&stamp);
        let mut n = 1;
        while dir.exists() {
            dir = base.join(format!("{stamp}_{n}"));
            n += 1;
        }
        let mut files = Vec::new();
        for name in names {
            let e = registry.resolve(name)?;
            files.push(e.manifest_path.clone());
            if e.source_path.is_file() {
                files.push(e.source_path.clone());
            }
        }
        let index = registry.root().join(INDEX_FILE);
        if index.is_file() {
            files.push(index);
        }
        let mut rel_files = Vec::new();
        for f in files {
            let rel = f.strip_prefix(registry.root()).unwrap_or(&f).to_path_buf();
            let dest = dir.join(&rel);
            fs::create_dir_all(dest.parent().unwrap_or(&dir))?;
            fs::copy(&f, &dest)?;
            rel_files.push(rel);
        }
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, files: rel_files })
    }

    /// Writes every backed-up file back to its original place.
    pub fn restore(&self, root: &Path) -> Result<(), OptimizeError> {
        for rel in &self.files {
            let dest = root.join(rel);
            if let Some(p) = dest.parent() {
                fs::create_dir_all(p)?;
            }
            write_atomic(&dest, &fs::read(self.dir.join(rel))?)?;
        }
        Ok(())
    }
}

/// What a merge pass needs beyond the backend.
#[derive(Clone, Copy)]
pub struct MergeContext<'a> {
    pub runner: &'a ToolRunner,
    pub embedder: &'a dyn EmbeddingProvider,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MergeOutcome {
    Kept { rationale: String },
    Merged { unified_name: String, superseded: Vec<String> },
    RolledBack { reasons: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeRecord {
    pub cluster: MergeCluster,
    pub outcome: MergeOutcome,
    pub attempts: u32,
    pub backup: Option<PathBuf>,
}

#[derive(Deserialize)]
struct StagingReview {
    verdict: Verdict,
    #[serde(default)]
    issues: Vec<String>,
}

/// Installs the unified tool in a scratch registry, runs the contract check
/// and one review session there. Returns the failure reasons, if any.
fn verify_in_staging(
    registry: &Registry,
    manifest: &ToolManifest,
    source: &str,
    backend: &dyn AgentBackend,
    runner: &ToolRunner,
    key: &SessionKey,
    prompts: &PromptSet,
    sessions: &mut Vec<(Stage, AgentResponse)>,
) -> Result<Vec<String>, OptimizeError> {
    let staging_root = registry.root().join(STAGING_DIR);
    if staging_root.exists() {
        fs::remove_dir_all(&staging_root)?;
    }
    let staging = Registry::create(&staging_root)?;
    let mut m = manifest.clone();
    m.category_path = crate::registry::CategoryPath::root();
    m.tests_passed = true;
    let result = (|| {
        staging.register(&m, source.as_bytes())?;
        let mut reasons = Vec::new();
        if let ContractVerdict::Fail(r) = contract_check(&m.name, &staging, runner)? {
            reasons.extend(r.into_iter().map(|r| format!("contract check: {r}")));
        }
        let req = AgentRequest::new(Stage::ToolReview, prompts.template(Stage::ToolReview), &staging_root, key.clone().with_subject(m.name.clone()))
            .with_toolset(&staging_root);
        let response = spawn_checked(backend, &req)?;
        let review: Result<StagingReview, String> = response
            .final_message
            .clone()
            .ok_or_else(|| "reviewer gave no verdict".to_string())
            .and_then(|v| serde_json::from_value(v).map_err(|e| e.to_string()));
        sessions.push((Stage::ToolReview, response));
        match review {
            Ok(r) if r.verdict == Verdict::Approved => {}
            Ok(r) => reasons.push(format!("review: {}", r.issues.join("; "))),
            Err(e) => reasons.push(format!("review: {e}")),
        }
        Ok::<_, OptimizeError>(reasons)
    })();
    let _ = fs::remove_dir_all(&staging_root);
    result
}

pub fn apply_merge_with_rollback(
    cluster: &MergeCluster,
    registry: &Registry,
    backend: &dyn AgentBackend,
    ctx: &MergeContext<'_>,
    key: &SessionKey,
    prompts: &PromptSet,
    sessions: &mut Vec<(Stage, AgentResponse)>,
) -> Result<MergeRecord, OptimizeError> {
    apply_merge_with(cluster, registry, backend, ctx, key, prompts, sessions, &no_failpoint)
}

/// Proposes, verifies and commits one merge. A failed verification is
/// retried once with the failure as feedback; a second failure, or any
/// error while committing, restores the backup.
#[allow(clippy::too_many_arguments)]
pub fn apply_merge_with(
    cluster: &MergeCluster,
    registry: &Registry,
    backend: &dyn AgentBackend,
    ctx: &MergeContext<'_>,
    key: &SessionKey,
    prompts: &PromptSet,
    sessions: &mut Vec<(Stage, AgentResponse)>,
    failpoint: FailPoint<'_>,
) -> Result<MergeRecord, OptimizeError> {
    let backup = BackupSnapshot::create(registry, &cluster.members)?;
    let record = |outcome, attempts| MergeRecord {
        cluster: cluster.clone(),
        outcome,
        attempts,
        backup: Some(backup.dir.clone()),
    };
    let mut feedback: Option<String> = None;
    let mut reasons = Vec::new();
    for attempt in 1..=2u32 {
        let (proposal, response) = propose_merge(cluster, registry, backend, key.clone(), prompts, feedback.as_deref())?;
        sessions.push((Stage::ToolMerge, response));
        let (name, source, manifest, supersedes) = match proposal {
            Ok(MergeProposal::Keep { rationale }) => return Ok(record(MergeOutcome::Kept { rationale }, attempt)),
            Ok(MergeProposal::Merge {
                unified_name,
                unified_source,
                unified_manifest,
                supersedes,
                ..
            }) => (unified_name, unified_source, unified_manifest, supersedes),
            Err(reason) => {
                reasons = vec![format!("malformed proposal: {reason}")];
                feedback = Some(reasons.join("\n"));
                continue;
            }
        };
        reasons = verify_in_staging(registry, &manifest, &source, backend, ctx.runner, key, prompts, sessions)?;
        if !reasons.is_empty() {
            log::warn!("merge of {} failed verification: {}", cluster.members.join(", "), reasons.join("; "));
            feedback = Some(reasons.iter().map(|r| format!("- {r}")).collect::<Vec<_>>().join("\n"));
            continue;
        }
        match commit(registry, &manifest, &source, &supersedes, failpoint) {
            Ok(()) => {
                return Ok(record(
                    MergeOutcome::Merged {
                        unified_name: name,
                        superseded: supersedes,
                    },
                    attempt,
                ))
            }
            Err(e) => {
                log::error!("merge commit failed, restoring backup: {e}");
                undo_commit(registry, &backup, &name)?;
                return Ok(record(
                    MergeOutcome::RolledBack {
                        reasons: vec![format!("commit failed: {e}")],
                    },
                    attempt,
                ));
            }
        }
    }
    backup.restore(registry.root())?;
    Ok(record(MergeOutcome::RolledBack { reasons }, 2))
}

fn commit(
    registry: &Registry,
    manifest: &ToolManifest,
    source: &str,
    supersedes: &[String],
    failpoint: FailPoint<'_>,
) -> Result<(), OptimizeError> {
    let writer = registry.write();
    let location = registry.resolve(&supersedes[0])?.location;
    let mut step = 0;
    for name in supersedes {
        failpoint(step)?;
        step += 1;
        writer.remove(name)?;
    }
    failpoint(step)?;
    step += 1;
    let mut m = manifest.clone();
    m.category_path = location;
    m.tests_passed = true;
    writer.register(&m, source.as_bytes(), CollisionPolicy::AutoBump)?;
    failpoint(step)?;
    writer.generate_index()?;
    Ok(())
}

fn undo_commit(registry: &Registry, backup: &BackupSnapshot, unified: &str) -> Result<(), OptimizeError> {
    {
        let _guard = registry.write();
        if let Ok(e) = registry.resolve(unified) {
            let _ = fs::remove_file(&e.source_path);
            let _ = fs::remove_file(&e.manifest_path);
        }
    }
    backup.restore(registry.root())
}

/// Clusters the toolset and attempts one merge per cluster.
pub fn merge_pass(
    registry: &Registry,
    backend: &dyn AgentBackend,
    ctx: &MergeContext<'_>,
    sim_threshold: f64,
    key: &SessionKey,
    prompts: &PromptSet,
    report: &mut OptimizeReport,
) -> Result<(), OptimizeError> {
    let signatures = extract_signatures(registry)?;
    let clusters = embed_and_cluster(&signatures, ctx.embedder, sim_threshold)?;
    for cluster in clusters {
        let rec = apply_merge_with_rollback(&cluster, registry, backend, ctx, key, prompts, &mut report.sessions)?;
        report.merges.push(rec);
    }
    Ok(())
}

/// Removes stale backups, keeping the newest `keep`.
pub fn prune_backups(registry: &Registry, keep: usize) -> std::io::Result<usize> {
    let base = registry.root().join(BACKUP_DIR);
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&base) {
        Ok(rd) => rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect(),
        Err(_) => return Ok(0),
    };
    dirs.sort();
    let excess = dirs.len().saturating_sub(keep);
    for d in &dirs[..excess] {
        fs::remove_dir_all(d)?;
    }
    Ok(excess)
}
