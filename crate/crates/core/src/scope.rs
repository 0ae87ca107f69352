//! Hierarchical tenant scopes: global, schema, table, partition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Deepest scope we model: schema / table / partition.
pub const MAX_SCOPE_DEPTH: usize = 3;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScopeError {
    #[error("scope `{0}` is deeper than schema.table.partition")]
    TooDeep(String),
    #[error("scope `{0}` has an empty component")]
    EmptyLabel(String),
    #[error("scope label `{0}` contains a reserved character")]
    BadLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeLevel {
    Global,
    Schema,
    Table,
    Partition,
}

impl ScopeLevel {
    pub fn depth(self) -> usize {
        match self {
            ScopeLevel::Global => 0,
            ScopeLevel::Schema => 1,
            ScopeLevel::Table => 2,
            ScopeLevel::Partition => 3,
        }
    }

    fn from_depth(depth: usize) -> Self {
        match depth {
            0 => ScopeLevel::Global,
            1 => ScopeLevel::Schema,
            2 => ScopeLevel::Table,
            _ => ScopeLevel::Partition,
        }
    }
}

/// A path of up to three labels. The empty path is the global scope.
///
/// Textual form joins labels with `.`, so `"sales.orders.ds=2024-01-01"` is a
/// partition and `""` is global.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Scope(Vec<String>);

impl Scope {
    pub fn global() -> Self {
        Scope(Vec::new())
    }

    pub fn new<I, S>(labels: I) -> Result<Self, ScopeError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() > MAX_SCOPE_DEPTH {
            return Err(ScopeError::TooDeep(labels.join(".")));
        }
        for label in &labels {
            if label.is_empty() {
                return Err(ScopeError::EmptyLabel(labels.join(".")));
            }
            if label.contains(['.', ',', '\n', '\r', '/']) {
                return Err(ScopeError::BadLabel(label.clone()));
            }
        }
        Ok(Scope(labels))
    }

    pub fn schema(schema: &str) -> Result<Self, ScopeError> {
        Scope::new([schema])
    }

    pub fn table(schema: &str, table: &str) -> Result<Self, ScopeError> {
        Scope::new([schema, table])
    }

    pub fn partition(schema: &str, table: &str, partition: &str) -> Result<Self, ScopeError> {
        Scope::new([schema, table, partition])
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn level(&self) -> ScopeLevel {
        ScopeLevel::from_depth(self.0.len())
    }

    pub fn is_global(&self) -> bool {
        self.0.is_empty()
    }

    pub fn schema_name(&self) -> Option<&str> {
        self.0.first().map(String::as_str)
    }

    pub fn table_name(&self) -> Option<&str> {
        self.0.get(1).map(String::as_str)
    }

    pub fn partition_name(&self) -> Option<&str> {
        self.0.get(2).map(String::as_str)
    }

    pub fn parent(&self) -> Option<Scope> {
        if self.0.is_empty() {
            None
        } else {
            Some(Scope(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// Non-strict prefix test.
    pub fn contains(&self, other: &Scope) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }

    /// Strict prefix test.
    pub fn is_ancestor_of(&self, other: &Scope) -> bool {
        self.0.len() < other.0.len() && self.contains(other)
    }

    /// This scope followed by every ancestor, most specific first.
    pub fn lineage(&self) -> impl Iterator<Item = Scope> + '_ {
        (0..=self.0.len())
            .rev()
            .map(move |d| Scope(self.0[..d].to_vec()))
    }

    /// Cuts the path down to at most `level`.
    pub fn truncate(&self, level: ScopeLevel) -> Scope {
        let d = level.depth().min(self.0.len());
        Scope(self.0[..d].to_vec())
    }

    pub fn child(&self, label: &str) -> Result<Scope, ScopeError> {
        let mut labels = self.0.clone();
        labels.push(label.to_string());
        Scope::new(labels)
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("."))
    }
}

impl FromStr for Scope {
    type Err = ScopeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Scope::global());
        }
        Scope::new(s.split('.'))
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
