//! On-disk toolset: tool sources with JSON manifest sidecars arranged in a
//! category tree.
//!
//! Layout: `<root>/<category…>/<name>.<ext>` next to `<name>.manifest.json`,
//! plus a generated `INDEX.md` at the root. Directories whose names start
//! with `.` (backups, staging) are invisible to every listing.
//!
//! Reads go straight to disk. Mutations go through [`RegistryWriter`], which
//! holds a per-root lock shared by every handle opened on the same directory.

pub mod disclosure;
pub mod invoke;
pub mod schema;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

pub use disclosure::Disclosure;
pub use schema::{Constraint, ParamSpec, SemanticType};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";
pub const INDEX_FILE: &str = "INDEX.md";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("manifest validation failed: {}", .0.join("; "))]
    ValidationFailed(Vec<String>),
    #[error("tool `{name}` version {version} already registered with different content")]
    NameConflict { name: String, version: u32 },
    #[error("no such category `{0}`")]
    NoSuchCategory(CategoryPath),
    #[error("tool `{0}` not found")]
    NotFound(String),
    #[error("tool `{name}` is ambiguous: found at {paths:?}")]
    Ambiguous { name: String, paths: Vec<PathBuf> },
    #[error("corrupt manifest {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Ordered directory names below the toolset root. Empty means the root.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryPath(pub Vec<String>);

impl CategoryPath {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn child(&self, name: &str) -> Self {
        let mut v = self.0.clone();
        v.push(name.to_string());
        Self(v)
    }

    pub fn parse(s: &str) -> Self {
        Self(
            s.split('/')
                .filter(|p| !p.is_empty() && *p != ".")
                .map(String::from)
                .collect(),
        )
    }

    pub fn is_prefix_of(&self, other: &CategoryPath) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }

    pub fn to_relative(&self) -> PathBuf {
        self.0.iter().collect()
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for CategoryPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str("/")
        } else {
            f.write_str(&self.0.join("/"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entrypoint {
    /// Source file name, adjacent to the manifest.
    pub source: String,
    pub callable: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generated_by: String,
    pub task_id: String,
    /// RFC 3339 timestamp.
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolManifest {
    pub name: String,
    pub description: String,
    pub category_path: CategoryPath,
    pub version: u32,
    pub inputs: Vec<ParamSpec>,
    pub outputs: Vec<ParamSpec>,
    pub entrypoint: Entrypoint,
    pub provenance: Provenance,
    pub tests_passed: bool,
    /// A known-good input used by the contract check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<serde_json::Value>,
}

impl ToolManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// True when two manifests describe the same tool contract, ignoring
    /// bookkeeping fields (version, location, provenance, test flag).
    pub fn same_contract(&self, other: &ToolManifest) -> bool {
        self.name == other.name
            && self.description == other.description
            && self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.entrypoint == other.entrypoint
            && self.probe == other.probe
    }

    pub fn first_line_description(&self) -> &str {
        self.description.lines().next().unwrap_or("").trim()
    }
}

/// Returns every problem found in `m`; empty means valid.
pub fn validate_manifest(m: &ToolManifest) -> Vec<String> {
    let mut out = Vec::new();
    if m.name.is_empty() {
        out.push("name: empty".to_string());
    } else if !schema::is_identifier(&m.name) {
        out.push(format!("name: `{}` is not an identifier", m.name));
    }
    if m.description.trim().is_empty() {
        out.push("description: empty".to_string());
    }
    if m.version == 0 {
        out.push("version: must be at least 1".to_string());
    }
    for part in &m.category_path.0 {
        if !schema::is_identifier(part) {
            out.push(format!("category_path: `{part}` is not an identifier"));
        }
    }
    out.extend(schema::list_violations(&m.inputs, "inputs"));
    out.extend(schema::list_violations(&m.outputs, "outputs"));

    let src = &m.entrypoint.source;
    if src.is_empty() {
        out.push("entrypoint.source: empty".to_string());
    } else if src.contains('/') || src.contains('\\') || src.ends_with(MANIFEST_SUFFIX) {
        out.push(format!("entrypoint.source: `{src}` must be a plain file name"));
    } else if Path::new(src).file_stem().and_then(|s| s.to_str()) != Some(m.name.as_str()) {
        out.push(format!("entrypoint.source: `{src}` must be named after the tool"));
    }
    if !schema::is_identifier(&m.entrypoint.callable) {
        out.push(format!(
            "entrypoint.callable: `{}` is not an identifier",
            m.entrypoint.callable
        ));
    }

    if m.provenance.generated_by.trim().is_empty() {
        out.push("provenance.generated_by: empty".to_string());
    }
    if m.provenance.task_id.trim().is_empty() {
        out.push("provenance.task_id: empty".to_string());
    }
    if chrono::DateTime::parse_from_rfc3339(&m.provenance.created_at).is_err() {
        out.push(format!(
            "provenance.created_at: `{}` is not an RFC 3339 timestamp",
            m.provenance.created_at
        ));
    }
    if let Some(probe) = &m.probe {
        out.extend(schema::check_record(&m.inputs, probe, "probe"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryNode {
    pub path: CategoryPath,
    pub subcategories: Vec<String>,
    pub tools: Vec<String>,
}

impl CategoryNode {
    pub fn child_count(&self) -> usize {
        self.subcategories.len() + self.tools.len()
    }
}

/// A tool as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolEntry {
    pub manifest: ToolManifest,
    pub manifest_path: PathBuf,
    pub source_path: PathBuf,
    /// Directory holding the tool, relative to the registry root.
    pub location: CategoryPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisionPolicy {
    /// Changed content under an existing name is stored as the next version.
    AutoBump,
    /// Changed content must carry a higher version than the stored one.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterOutcome {
    Created { version: u32 },
    Unchanged { version: u32 },
    Replaced { from: u32, to: u32 },
}

fn lock_for(root: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let key = fs::canonicalize(root).unwrap_or_else(|_| root.to_path_buf());
    let mut map = LOCKS.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    map.entry(key).or_default().clone()
}

/// Handle on a toolset directory. Cheap to clone; clones share the writer
/// lock.
#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
    writer: Arc<Mutex<()>>,
}

impl Registry {
    /// Opens an existing toolset directory.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(RegistryError::Io(io::Error::new(
                io::ErrorKind::NotFound,
                format!("toolset directory {} does not exist", root.display()),
            )));
        }
        let writer = lock_for(&root);
        Ok(Self { root, writer })
    }

    /// Opens `root`, creating it if needed.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, RegistryError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Self::open(root)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Acquires the single-writer lock for this toolset.
    pub fn write(&self) -> RegistryWriter<'_> {
        RegistryWriter {
            registry: self,
            _guard: self.writer.lock().unwrap_or_else(|e| e.into_inner()),
        }
    }

    pub fn register(
        &self,
        manifest: &ToolManifest,
        source: &[u8],
    ) -> Result<RegisterOutcome, RegistryError> {
        self.write().register(manifest, source, CollisionPolicy::AutoBump)
    }

    /// Immediate children of `path`. Never recurses.
    pub fn list_children(&self, path: &CategoryPath) -> Result<CategoryNode, RegistryError> {
        let dir = self.root.join(path.to_relative());
        if path.0.iter().any(|p| p == ".." || p.starts_with('.')) || !dir.is_dir() {
            return Err(RegistryError::NoSuchCategory(path.clone()));
        }
        let mut subcategories = Vec::new();
        let mut tools = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            let ft = entry.file_type()?;
            if ft.is_dir() {
                subcategories.push(name);
            } else if let Some(tool) = name.strip_suffix(MANIFEST_SUFFIX) {
                tools.push(tool.to_string());
            }
        }
        subcategories.sort();
        tools.sort();
        Ok(CategoryNode {
            path: path.clone(),
            subcategories,
            tools,
        })
    }

    /// Every tool in the tree, ordered by manifest path.
    pub fn all_tools(&self) -> Result<Vec<ToolEntry>, RegistryError> {
        let mut out = Vec::new();
        for path in self.manifest_paths()? {
            out.push(self.load_entry(&path)?);
        }
        Ok(out)
    }

    pub fn tool_count(&self) -> Result<usize, RegistryError> {
        Ok(self.manifest_paths()?.len())
    }

    /// Every category directory, depth-first in lexicographic order, root first.
    pub fn all_categories(&self) -> Result<Vec<CategoryPath>, RegistryError> {
        let mut out = Vec::new();
        let mut stack = vec![CategoryPath::root()];
        while let Some(p) = stack.pop() {
            let node = self.list_children(&p)?;
            for sub in node.subcategories.iter().rev() {
                stack.push(p.child(sub));
            }
            out.push(p);
        }
        Ok(out)
    }

    fn manifest_paths(&self) -> Result<Vec<PathBuf>, RegistryError> {
        let mut paths = Vec::new();
        let walker = WalkDir::new(&self.root)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.'));
        for entry in walker {
            let entry = entry.map_err(|e| RegistryError::Io(e.into()))?;
            if entry.file_type().is_file()
                && entry.file_name().to_string_lossy().ends_with(MANIFEST_SUFFIX)
            {
                paths.push(entry.into_path());
            }
        }
        Ok(paths)
    }

    fn load_entry(&self, manifest_path: &Path) -> Result<ToolEntry, RegistryError> {
        let bytes = fs::read(manifest_path)?;
        let manifest = ToolManifest::from_json(&bytes).map_err(|e| RegistryError::Corrupt {
            path: manifest_path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let dir = manifest_path.parent().unwrap_or(&self.root);
        let rel = dir.strip_prefix(&self.root).unwrap_or(Path::new(""));
        let location = CategoryPath(
            rel.components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect(),
        );
        let file_name = manifest_path.file_name().unwrap_or_default().to_string_lossy();
        let expected = file_name.trim_end_matches(MANIFEST_SUFFIX);
        if manifest.name != expected {
            return Err(RegistryError::Corrupt {
                path: manifest_path.to_path_buf(),
                detail: format!("manifest names `{}` but file is `{expected}`", manifest.name),
            });
        }
        Ok(ToolEntry {
            source_path: dir.join(&manifest.entrypoint.source),
            manifest_path: manifest_path.to_path_buf(),
            manifest,
            location,
        })
    }

    /// Finds the single tool called `name` anywhere in the tree.
    pub fn resolve(&self, name: &str) -> Result<ToolEntry, RegistryError> {
        let target = format!("{name}{MANIFEST_SUFFIX}");
        let hits: Vec<PathBuf> = self
            .manifest_paths()?
            .into_iter()
            .filter(|p| p.file_name().is_some_and(|f| f.to_string_lossy() == target))
            .collect();
        match hits.len() {
            0 => Err(RegistryError::NotFound(name.to_string())),
            1 => self.load_entry(&hits[0]),
            _ => Err(RegistryError::Ambiguous {
                name: name.to_string(),
                paths: hits,
            }),
        }
    }

    pub fn contains(&self, name: &str) -> Result<bool, RegistryError> {
        match self.resolve(name) {
            Ok(_) => Ok(true),
            Err(RegistryError::NotFound(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    /// Renders the navigation index without touching disk.
    pub fn render_index(&self) -> Result<String, RegistryError> {
        let mut out = String::from("# Tool Index\n");
        let mut body = String::new();
        self.render_node(&CategoryPath::root(), 0, &mut body)?;
        if !body.is_empty() {
            out.push('\n');
            out.push_str(&body);
        }
        Ok(out)
    }

    fn render_node(&self, path: &CategoryPath, depth: usize, out: &mut String) -> Result<(), RegistryError> {
        let node = self.list_children(path)?;
        let indent = "  ".repeat(depth);
        for tool in &node.tools {
            let dir = self.root.join(path.to_relative());
            let entry = self.load_entry(&dir.join(format!("{tool}{MANIFEST_SUFFIX}")))?;
            out.push_str(&format!(
                "{indent}- `{tool}`: {}\n",
                entry.manifest.first_line_description()
            ));
        }
        for sub in &node.subcategories {
            out.push_str(&format!("{indent}- {sub}/\n"));
            self.render_node(&path.child(sub), depth + 1, out)?;
        }
        Ok(())
    }

    /// Writes `INDEX.md` at the root and returns its contents.
    pub fn generate_index(&self) -> Result<String, RegistryError> {
        let text = self.render_index()?;
        write_atomic(&self.root.join(INDEX_FILE), text.as_bytes())?;
        Ok(text)
    }
}

/// Exclusive access to a toolset for the lifetime of the value.
pub struct RegistryWriter<'a> {
    registry: &'a Registry,
    _guard: MutexGuard<'a, ()>,
}

impl<'a> RegistryWriter<'a> {
    pub fn registry(&self) -> &'a Registry {
        self.registry
    }

    pub fn register(
        &self,
        manifest: &ToolManifest,
        source: &[u8],
        policy: CollisionPolicy,
    ) -> Result<RegisterOutcome, RegistryError> {
        let mut violations = validate_manifest(manifest);
        if !manifest.tests_passed {
            violations.push("tests_passed: tools must pass their tests before registration".into());
        }
        if !violations.is_empty() {
            return Err(RegistryError::ValidationFailed(violations));
        }

        let existing = match self.registry.resolve(&manifest.name) {
            Ok(entry) => Some(entry),
            Err(RegistryError::NotFound(_)) => None,
            Err(e) => return Err(e),
        };

        let Some(existing) = existing else {
            let dir = self.registry.root.join(manifest.category_path.to_relative());
            fs::create_dir_all(&dir)?;
            self.write_tool(&dir, manifest, source)?;
            return Ok(RegisterOutcome::Created {
                version: manifest.version,
            });
        };

        let old_source = fs::read(&existing.source_path).unwrap_or_default();
        if existing.manifest.same_contract(manifest) && old_source == source {
            return Ok(RegisterOutcome::Unchanged {
                version: existing.manifest.version,
            });
        }
        let from = existing.manifest.version;
        let to = match policy {
            _ if manifest.version > from => manifest.version,
            CollisionPolicy::AutoBump => from + 1,
            CollisionPolicy::Strict => {
                return Err(RegistryError::NameConflict {
                    name: manifest.name.clone(),
                    version: manifest.version,
                })
            }
        };
        let mut stored = manifest.clone();
        stored.version = to;
        stored.category_path = existing.location.clone();
        let dir = existing
            .manifest_path
            .parent()
            .unwrap_or(self.registry.root())
            .to_path_buf();
        if existing.manifest.entrypoint.source != stored.entrypoint.source {
            remove_if_exists(&existing.source_path)?;
        }
        self.write_tool(&dir, &stored, source)?;
        Ok(RegisterOutcome::Replaced { from, to })
    }

    fn write_tool(&self, dir: &Path, manifest: &ToolManifest, source: &[u8]) -> io::Result<()> {
        write_atomic(&dir.join(&manifest.entrypoint.source), source)?;
        write_atomic(
            &dir.join(format!("{}{MANIFEST_SUFFIX}", manifest.name)),
            manifest.to_json().as_bytes(),
        )
    }

    /// Deletes a tool's source and manifest.
    pub fn remove(&self, name: &str) -> Result<ToolEntry, RegistryError> {
        let entry = self.registry.resolve(name)?;
        remove_if_exists(&entry.source_path)?;
        fs::remove_file(&entry.manifest_path)?;
        Ok(entry)
    }

    pub fn generate_index(&self) -> Result<String, RegistryError> {
        self.registry.generate_index()
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path.parent().unwrap_or(Path::new("."));
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name().unwrap_or_default().to_string_lossy()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn remove_if_exists(path: &Path) -> io::Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        other => other,
    }
}
