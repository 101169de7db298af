//! Knowledge-graph construction: entity extraction from a report corpus,
//! localization-description lookup, triple assembly, and (de)serialization.
//!
//! Entity extraction and description lookup are both pluggable. The shipped
//! defaults are a deterministic lexicon matcher and a fixture-directory
//! client, so the whole pipeline runs offline; a REST client with on-disk
//! caching covers the remote case.

pub mod client;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
pub use client::{CachedClient, FixtureClient, KnowledgeClient, RemoteClient, RemoteOptions};

/// One corpus row: a question/report text and an optional answer text.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub record_id: String,
    #[serde(default)]
    pub question_text: String,
    #[serde(default)]
    pub answer_text: String,
}

impl CorpusRecord {
    pub fn validate(&self) -> Result<()> {
        if self.question_text.trim().is_empty() && self.answer_text.trim().is_empty() {
            return Err(Error::Kg(format!(
                "corpus record `{}` has no text",
                self.record_id
            )));
        }
        Ok(())
    }
}

/// Ordered, deduplicated, normalized entity mentions. Iteration order is
/// first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EntitySet {
    entities: Vec<String>,
}

impl EntitySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert an already-normalized entity, keeping first-occurrence order.
    pub fn insert(&mut self, entity: impl Into<String>) {
        let entity = entity.into();
        debug_assert_eq!(entity, normalize_text(&entity), "entity not normalized");
        if !self.entities.iter().any(|e| *e == entity) {
            self.entities.push(entity);
        }
    }

    pub fn extend(&mut self, other: &EntitySet) {
        for e in &other.entities {
            self.insert(e.clone());
        }
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.entities.iter().any(|e| e == entity)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(|s| s.as_str())
    }
}

/// Localization descriptions retrieved for one entity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizationSet {
    pub entity: String,
    pub descriptions: Vec<String>,
}

impl LocalizationSet {
    /// Deduplicates and drops empty descriptions.
    pub fn new(entity: impl Into<String>, raw: Vec<String>) -> Self {
        let mut descriptions = Vec::new();
        for d in raw {
            let d = d.trim().to_string();
            if !d.is_empty() && !descriptions.contains(&d) {
                descriptions.push(d);
            }
        }
        LocalizationSet {
            entity: entity.into(),
            descriptions,
        }
    }
}

/// Load a JSONL corpus file, one record per line, skipping blank lines.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Kg(format!("cannot read corpus {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: CorpusRecord = serde_json::from_str(line).map_err(|e| {
            Error::Kg(format!("{}:{}: malformed corpus record: {e}", path.display(), i + 1))
        })?;
        records.push(r);
    }
    Ok(records)
}

/// Lowercase, strip punctuation to spaces, collapse whitespace.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for ch in text.chars() {
        let ch = ch.to_ascii_lowercase();
        if ch.is_alphanumeric() {
            out.push(ch);
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Pluggable entity extraction.
pub trait EntityProvider {
    fn extract(&self, text: &str) -> Result<EntitySet>;
}

/// Deterministic whole-word matcher over a fixed term list. Multi-word terms
/// are supported; matches are reported in first-occurrence order.
#[derive(Clone, Debug)]
pub struct LexiconProvider {
    terms: Vec<String>,
}

impl LexiconProvider {
    pub fn new(terms: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut seen = Vec::new();
        for t in terms {
            let t = normalize_text(&t.into());
            if !t.is_empty() && !seen.contains(&t) {
                seen.push(t);
            }
        }
        LexiconProvider { terms: seen }
    }

    /// One term per line; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
                .filter(|l| !l.is_empty()),
        ))
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    fn find_word_boundary(haystack: &str, needle: &str) -> Option<usize> {
        let mut from = 0;
        while let Some(rel) = haystack[from..].find(needle) {
            let at = from + rel;
            let end = at + needle.len();
            let ok_left = at == 0 || haystack.as_bytes()[at - 1] == b' ';
            let ok_right = end == haystack.len() || haystack.as_bytes()[end] == b' ';
            if ok_left && ok_right {
                return Some(at);
            }
            from = at + 1;
        }
        None
    }
}

impl EntityProvider for LexiconProvider {
    fn extract(&self, text: &str) -> Result<EntitySet> {
        let normalized = normalize_text(text);
        let mut hits: Vec<(usize, &str)> = Vec::new();
        for term in &self.terms {
            if let Some(at) = Self::find_word_boundary(&normalized, term) {
                hits.push((at, term));
            }
        }
        hits.sort_by_key(|&(at, term)| (at, std::cmp::Reverse(term.len())));
        let mut set = EntitySet::new();
        for (_, term) in hits {
            set.insert(term);
        }
        Ok(set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Entity,
    Localization,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::Entity => write!(f, "entity"),
            NodeKind::Localization => write!(f, "localization"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: usize,
    pub text: String,
    pub kind: NodeKind,
}

impl KgNode {
    pub fn entity(id: usize, text: impl Into<String>) -> Self {
        KgNode {
            id,
            text: text.into(),
            kind: NodeKind::Entity,
        }
    }

    pub fn localization(id: usize, text: impl Into<String>) -> Self {
        KgNode {
            id,
            text: text.into(),
            kind: NodeKind::Localization,
        }
    }
}

pub const RELATION_LOCALIZED_IN: &str = "localized_in";

/// Entity/localization nodes plus (head, relation, tail) triples. The
/// adjacency matrix is derived state: symmetric, zero diagonal, recomputed
/// from the triples on construction and on load, never serialized.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    nodes: Vec<KgNode>,
    triples: Vec<(usize, String, usize)>,
    adjacency: Vec<bool>, // n×n row-major
}

impl KnowledgeGraph {
    pub fn from_parts(nodes: Vec<KgNode>, triples: Vec<(usize, String, usize)>) -> Result<Self> {
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Kg(format!(
                    "node ids must be dense 0..{}: found id {} at position {i}",
                    n, node.id
                )));
            }
        }
        for (h, r, t) in &triples {
            if *h >= n || *t >= n {
                return Err(Error::Kg(format!(
                    "triple references unknown node: ({h}, {r}, {t}) with {n} nodes"
                )));
            }
            if nodes[*h].kind != NodeKind::Entity {
                return Err(Error::Kg(format!(
                    "triple head {h} (`{}`) is not an entity node",
                    nodes[*h].text
                )));
            }
            if nodes[*t].kind != NodeKind::Localization {
                return Err(Error::Kg(format!(
                    "triple tail {t} (`{}`) is not a localization node",
                    nodes[*t].text
                )));
            }
            if r.is_empty() {
                return Err(Error::Kg("triple with empty relation".into()));
            }
        }
        let mut adjacency = vec![false; n * n];
        for (h, _, t) in &triples {
            adjacency[h * n + t] = true;
            adjacency[t * n + h] = true;
        }
        Ok(KnowledgeGraph {
            nodes,
            triples,
            adjacency,
        })
    }

    pub fn empty() -> Self {
        KnowledgeGraph {
            nodes: Vec::new(),
            triples: Vec::new(),
            adjacency: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[KgNode] {
        &self.nodes
    }

    pub fn triples(&self) -> &[(usize, String, usize)] {
        &self.triples
    }

    pub fn linked(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.nodes.len() + j]
    }

    /// Dense binary adjacency as a numeric matrix.
    pub fn adjacency_matrix<T: Real>(&self) -> Tensor<T> {
        let n = self.nodes.len();
        let data = self
            .adjacency
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Tensor::new(n, n, data).expect("adjacency is square by construction")
    }

    pub fn node_texts(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.text.as_str()).collect()
    }
}

/// Build the graph: one node per unique entity across the corpus, one node
/// per unique localization description (shared globally), one
/// `localized_in` triple per (entity, description) pair.
pub fn build_graph(
    corpus: &[CorpusRecord],
    provider: &dyn EntityProvider,
    client: &dyn KnowledgeClient,
) -> Result<KnowledgeGraph> {
    if corpus.is_empty() {
        return Err(Error::contract("build_graph: empty corpus"));
    }
    let mut entities = EntitySet::new();
    for record in corpus {
        record.validate()?;
        entities.extend(&provider.extract(&record.question_text)?);
        entities.extend(&provider.extract(&record.answer_text)?);
    }
    if entities.is_empty() {
        log::warn!("no entities extracted from {} corpus records: emitting an empty graph (knowledge prompting will be skipped)", corpus.len());
        return Ok(KnowledgeGraph::empty());
    }

    let mut nodes: Vec<KgNode> = Vec::new();
    let mut triples: Vec<(usize, String, usize)> = Vec::new();
    let mut description_ids: BTreeMap<String, usize> = BTreeMap::new();
    for entity in entities.iter() {
        let head = nodes.len();
        nodes.push(KgNode {
            id: head,
            text: entity.to_string(),
            kind: NodeKind::Entity,
        });
        let found = client.lookup(entity)?;
        if found.descriptions.is_empty() {
            log::warn!("entity `{entity}` has no localization descriptions");
        }
        for desc in found.descriptions {
            let tail = *description_ids.entry(desc.clone()).or_insert_with(|| {
                let id = nodes.len();
                nodes.push(KgNode {
                    id,
                    text: desc.clone(),
                    kind: NodeKind::Localization,
                });
                id
            });
            triples.push((head, RELATION_LOCALIZED_IN.to_string(), tail));
        }
    }
    KnowledgeGraph::from_parts(nodes, triples)
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<KgNode>,
    triples: Vec<(usize, String, usize)>,
}

pub fn save_graph(kg: &KnowledgeGraph, path: &Path) -> Result<()> {
    let file = GraphFile {
        nodes: kg.nodes.clone(),
        triples: kg.triples.clone(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_graph(path: &Path) -> Result<KnowledgeGraph> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Kg(format!("cannot read graph file {}: {e}", path.display())))?;
    let file: GraphFile = serde_json::from_str(&text)
        .map_err(|e| Error::Kg(format!("malformed graph file {}: {e}", path.display())))?;
    KnowledgeGraph::from_parts(file.nodes, file.triples)
}
