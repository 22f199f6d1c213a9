use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive token span `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(self) -> usize {
        self.0
    }

    pub fn end(self) -> usize {
        self.1
    }

    pub fn len(self) -> usize {
        self.1 + 1 - self.0
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 <= i && i <= self.1
    }

    pub fn overlaps(self, other: Span) -> bool {
        self.0 <= other.1 && other.0 <= self.1
    }
}

/// A sentence with a head and a tail entity mention and its relation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub tokens: Vec<String>,
    #[serde(rename = "h")]
    pub head: Span,
    #[serde(rename = "t")]
    pub tail: Span,
    pub relation: String,
}

impl Instance {
    /// Checks span ordering, range, and disjointness.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.tokens.len();
        if n == 0 {
            return Err("instance has no tokens".into());
        }
        for (name, span) in [("head", self.head), ("tail", self.tail)] {
            if span.0 > span.1 {
                return Err(format!("{name} span [{}, {}] has start after end", span.0, span.1));
            }
            if span.1 >= n {
                return Err(format!("{name} span [{}, {}] exceeds {n} tokens", span.0, span.1));
            }
        }
        if self.head.overlaps(self.tail) {
            return Err("head and tail spans overlap".into());
        }
        if self.relation.is_empty() {
            return Err("relation id is empty".into());
        }
        Ok(())
    }

    pub fn head_tokens(&self) -> &[String] {
        &self.tokens[self.head.0..=self.head.1]
    }

    pub fn tail_tokens(&self) -> &[String] {
        &self.tokens[self.tail.0..=self.tail.1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationEntry {
    pub label: Vec<String>,
    pub signature: Vec<String>,
}

/// Relation id → label and signature tokens, ordered by id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationCatalog {
    relations: BTreeMap<String, RelationEntry>,
}

impl RelationCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, entry: RelationEntry) -> Result<()> {
        let id = id.into();
        if entry.label.is_empty() {
            return Err(Error::Corpus(format!("relation `{id}` has an empty label")));
        }
        if self.relations.contains_key(&id) {
            return Err(Error::Corpus(format!("duplicate relation id `{id}`")));
        }
        self.relations.insert(id, entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.relations.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&RelationEntry> {
        self.relations.get(id)
    }

    pub fn label(&self, id: &str) -> Result<&[String]> {
        self.relations
            .get(id)
            .map(|e| e.label.as_slice())
            .ok_or_else(|| Error::Corpus(format!("unknown relation `{id}`")))
    }

    /// Relation ids in sorted order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.relations.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RelationEntry)> {
        self.relations.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Sub-catalog restricted to `ids`.
    pub fn restrict<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut out = Self::new();
        for id in ids {
            let e = self.get(id).ok_or_else(|| Error::Corpus(format!("unknown relation `{id}`")))?;
            out.insert(id, e.clone())?;
        }
        Ok(out)
    }

    pub fn check_instances(&self, instances: &[Instance]) -> Result<()> {
        for (i, inst) in instances.iter().enumerate() {
            if !self.contains(&inst.relation) {
                return Err(Error::Corpus(format!(
                    "instance {i} has relation `{}` not present in the catalog",
                    inst.relation
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Path { path: path.to_path_buf(), message: e.to_string() })?;
        let cat: Self = serde_json::from_str(&text)?;
        for (id, e) in cat.iter() {
            if e.label.is_empty() {
                return Err(Error::Corpus(format!("relation `{id}` has an empty label")));
            }
        }
        Ok(cat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Instances partitioned by relation into train/validation/test.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
    pub train_relations: BTreeSet<String>,
    pub validation_relations: BTreeSet<String>,
    pub test_relations: BTreeSet<String>,
}
