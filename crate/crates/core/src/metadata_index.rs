//! In-memory page metadata: one universe map plus indexed subsets by file,
//! storage directory and scope.
//!
//! Scope queries walk a tree of per-scope nodes. Each node keeps the pages
//! scoped directly at it, the labels of its non-empty children, and subtree
//! byte/page counters, so `usage` is O(1) and `pages_by_scope` costs
//! O(result) rather than O(universe).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::time::Duration;

use crate::page_store::{DirId, FileId, PageId};
use crate::scope::Scope;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageMetadata {
    pub page_id: PageId,
    pub length: u64,
    pub scope: Scope,
    pub dir: DirId,
    pub created_at_ms: u64,
    pub last_access_ms: u64,
    pub ttl: Option<Duration>,
}

impl PageMetadata {
    pub fn new(page_id: PageId, length: u64, scope: Scope, dir: DirId, now_ms: u64) -> Self {
        PageMetadata {
            page_id,
            length,
            scope,
            dir,
            created_at_ms: now_ms,
            last_access_ms: now_ms,
            ttl: None,
        }
    }

    pub fn with_ttl(mut self, ttl: Option<Duration>) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn expires_at_ms(&self) -> Option<u64> {
        self.ttl
            .map(|t| self.created_at_ms.saturating_add(t.as_millis() as u64))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("page {0} is already indexed")]
    DuplicatePage(PageId),
    #[error("page {0} has zero length")]
    EmptyPage(PageId),
}

#[derive(Debug, Default)]
struct ScopeNode {
    direct: HashSet<PageId>,
    children: BTreeSet<String>,
    bytes: u64,
    pages: u64,
}

#[derive(Debug)]
pub struct MetadataIndex {
    universe: HashMap<PageId, PageMetadata>,
    by_file: HashMap<FileId, HashSet<PageId>>,
    by_dir: HashMap<DirId, HashSet<PageId>>,
    dir_bytes: HashMap<DirId, u64>,
    scopes: HashMap<Scope, ScopeNode>,
}

impl Default for MetadataIndex {
    fn default() -> Self {
        Self::new()
    }
}

impl MetadataIndex {
    pub fn new() -> Self {
        let mut scopes = HashMap::new();
        scopes.insert(Scope::global(), ScopeNode::default());
        MetadataIndex {
            universe: HashMap::new(),
            by_file: HashMap::new(),
            by_dir: HashMap::new(),
            dir_bytes: HashMap::new(),
            scopes,
        }
    }

    pub fn len(&self) -> usize {
        self.universe.len()
    }

    pub fn is_empty(&self) -> bool {
        self.universe.is_empty()
    }

    pub fn contains(&self, page_id: &PageId) -> bool {
        self.universe.contains_key(page_id)
    }

    pub fn get(&self, page_id: &PageId) -> Option<&PageMetadata> {
        self.universe.get(page_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PageMetadata> {
        self.universe.values()
    }

    pub fn add(&mut self, meta: PageMetadata) -> Result<(), IndexError> {
        if self.universe.contains_key(&meta.page_id) {
            return Err(IndexError::DuplicatePage(meta.page_id));
        }
        if meta.length == 0 {
            return Err(IndexError::EmptyPage(meta.page_id));
        }
        let id = meta.page_id.clone();
        self.by_file
            .entry(id.file_id.clone())
            .or_default()
            .insert(id.clone());
        self.by_dir.entry(meta.dir).or_default().insert(id.clone());
        *self.dir_bytes.entry(meta.dir).or_default() += meta.length;

        let mut child_label: Option<String> = None;
        for scope in meta.scope.lineage() {
            let node = self.scopes.entry(scope.clone()).or_default();
            node.bytes += meta.length;
            node.pages += 1;
            match child_label.take() {
                None => {
                    node.direct.insert(id.clone());
                }
                Some(label) => {
                    node.children.insert(label);
                }
            }
            child_label = scope.labels().last().cloned();
        }
        self.universe.insert(id, meta);
        Ok(())
    }

    pub fn remove(&mut self, page_id: &PageId) -> Option<PageMetadata> {
        let meta = self.universe.remove(page_id)?;
        if let Some(set) = self.by_file.get_mut(&page_id.file_id) {
            set.remove(page_id);
            if set.is_empty() {
                self.by_file.remove(&page_id.file_id);
            }
        }
        if let Some(set) = self.by_dir.get_mut(&meta.dir) {
            set.remove(page_id);
            if set.is_empty() {
                self.by_dir.remove(&meta.dir);
            }
        }
        if let Some(b) = self.dir_bytes.get_mut(&meta.dir) {
            *b -= meta.length;
            if *b == 0 {
                self.dir_bytes.remove(&meta.dir);
            }
        }

        let mut emptied_child: Option<String> = None;
        for scope in meta.scope.lineage() {
            let node = self
                .scopes
                .get_mut(&scope)
                .expect("every ancestor scope of an indexed page has a node");
            node.bytes -= meta.length;
            node.pages -= 1;
            if scope == meta.scope {
                node.direct.remove(page_id);
            }
            if let Some(label) = emptied_child.take() {
                node.children.remove(&label);
            }
            if node.pages == 0 && !scope.is_global() {
                emptied_child = scope.labels().last().cloned();
                self.scopes.remove(&scope);
            }
        }
        Some(meta)
    }

    /// Records an access; the index itself never updates access times.
    pub fn touch(&mut self, page_id: &PageId, now_ms: u64) -> bool {
        match self.universe.get_mut(page_id) {
            Some(m) => {
                m.last_access_ms = m.last_access_ms.max(now_ms);
                true
            }
            None => false,
        }
    }

    /// Pages whose scope has `scope` as a (non-strict) prefix.
    pub fn pages_by_scope(&self, scope: &Scope) -> Vec<&PageMetadata> {
        let mut out = Vec::new();
        let mut stack = vec![scope.clone()];
        while let Some(s) = stack.pop() {
            let Some(node) = self.scopes.get(&s) else {
                continue;
            };
            out.extend(node.direct.iter().map(|id| &self.universe[id]));
            for label in &node.children {
                if let Ok(child) = s.child(label) {
                    stack.push(child);
                }
            }
        }
        out
    }

    pub fn pages_by_file(&self, file_id: &FileId) -> Vec<&PageMetadata> {
        self.by_file
            .get(file_id)
            .map(|set| set.iter().map(|id| &self.universe[id]).collect())
            .unwrap_or_default()
    }

    pub fn pages_by_dir(&self, dir: DirId) -> Vec<&PageMetadata> {
        self.by_dir
            .get(&dir)
            .map(|set| set.iter().map(|id| &self.universe[id]).collect())
            .unwrap_or_default()
    }

    /// Total bytes of pages at or below `scope`.
    pub fn usage(&self, scope: &Scope) -> u64 {
        self.scopes.get(scope).map_or(0, |n| n.bytes)
    }

    pub fn page_count(&self, scope: &Scope) -> u64 {
        self.scopes.get(scope).map_or(0, |n| n.pages)
    }

    /// Bytes scoped exactly at `scope`, excluding descendants.
    pub fn direct_usage(&self, scope: &Scope) -> u64 {
        self.scopes.get(scope).map_or(0, |n| {
            n.direct.iter().map(|id| self.universe[id].length).sum()
        })
    }

    pub fn dir_usage(&self, dir: DirId) -> u64 {
        self.dir_bytes.get(&dir).copied().unwrap_or(0)
    }

    /// Non-empty direct children of `scope`.
    pub fn child_scopes(&self, scope: &Scope) -> Vec<Scope> {
        self.scopes
            .get(scope)
            .map(|n| {
                n.children
                    .iter()
                    .filter_map(|l| scope.child(l).ok())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Whether any page lives at or below `scope`.
    pub fn has_scope(&self, scope: &Scope) -> bool {
        self.page_count(scope) > 0
    }

    pub fn files(&self) -> impl Iterator<Item = &FileId> {
        self.by_file.keys()
    }
}
