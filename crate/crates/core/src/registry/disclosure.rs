//! One-level-at-a-time toolset browsing.
//!
//! A [`Disclosure`] starts with only the root listable. Listing a directory
//! reveals its immediate subcategories, which become listable in turn. Tools
//! are never shown except as direct children of a listed directory.

use std::collections::BTreeSet;
use std::sync::Mutex;

use super::{CategoryNode, CategoryPath, Registry, RegistryError};

#[derive(Debug)]
pub struct Disclosure {
    registry: Registry,
    listed: Mutex<Vec<CategoryNode>>,
}

impl Disclosure {
    pub fn new(registry: Registry) -> Self {
        Self {
            registry,
            listed: Mutex::new(Vec::new()),
        }
    }

    fn revealed(&self, path: &CategoryPath) -> bool {
        if path.is_root() {
            return true;
        }
        let parent = CategoryPath(path.0[..path.0.len() - 1].to_vec());
        let last = path.0.last().expect("non-root path");
        self.listed
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .any(|n| n.path == parent && n.subcategories.contains(last))
    }

    /// Lists `path`, which must be the root or a subcategory already revealed
    /// by listing its parent.
    pub fn list(&self, path: &CategoryPath) -> Result<CategoryNode, RegistryError> {
        if !self.revealed(path) {
            return Err(RegistryError::NoSuchCategory(path.clone()));
        }
        let node = self.registry.list_children(path)?;
        self.listed
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(node.clone());
        Ok(node)
    }

    /// Every directory listed so far, in listing order.
    pub fn visited(&self) -> Vec<CategoryPath> {
        self.listed
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .map(|n| n.path.clone())
            .collect()
    }

    /// Tool names shown so far.
    pub fn shown_tools(&self) -> BTreeSet<String> {
        self.listed
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .flat_map(|n| n.tools.iter().cloned())
            .collect()
    }
}
