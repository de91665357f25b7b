//! Embedding-based candidate retrieval: entity and mention representations,
//! index building and exhaustive top-k search.

mod index;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, ModelGateway};
use crate::kb::{Entity, Mention};
pub use index::{normalize, VectorIndex, MAGIC};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("entity {0} has no summary")]
    MissingSummary(String),
    #[error("mention {0} has no description")]
    MissingDescription(String),
    #[error("zero or non-finite vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("unknown entity id {0}")]
    UnknownEntityId(String),
    #[error("duplicate entity id {0}")]
    DuplicateId(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index has no rows")]
    EmptyIndex,
    #[error("not an index file (bad magic bytes)")]
    BadMagic,
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Which entity text fills the slot after the name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityText {
    #[default]
    Summary,
    /// Raw description, for runs without entity augmentation.
    Description,
}

impl fmt::Display for EntityText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityText::Summary => "summary",
            EntityText::Description => "description",
        })
    }
}

pub fn entity_repr(entity: &Entity, text: EntityText) -> Result<String, RetrievalError> {
    let body = match text {
        EntityText::Summary => entity
            .summary
            .as_deref()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| RetrievalError::MissingSummary(entity.id.clone()))?,
        EntityText::Description => entity.description.as_str(),
    };
    Ok(format!("{}: {}", entity.name, body))
}

/// `<name>: <context> <description>`, or `<name>: <context>` when mention
/// augmentation is off.
pub fn mention_repr(mention: &Mention, with_description: bool) -> Result<String, RetrievalError> {
    if !with_description {
        return Ok(format!("{}: {}", mention.name, mention.context));
    }
    let d = mention
        .description
        .as_deref()
        .ok_or_else(|| RetrievalError::MissingDescription(mention.id.clone()))?;
    Ok(format!("{}: {} {}", mention.name, mention.context, d))
}

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimMismatch { expected: u.len(), got: v.len() });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 || !(nu.is_finite() && nv.is_finite()) {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Embeds every entity representation and builds the index. The model tag
/// records both the embedder and which entity text was embedded.
pub fn build_index(
    entities: &[Entity],
    gateway: &dyn ModelGateway,
    text: EntityText,
) -> Result<VectorIndex, RetrievalError> {
    if entities.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let reprs = entities
        .iter()
        .map(|e| entity_repr(e, text))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = gateway.embed(&reprs)?;
    let ids = entities.iter().map(|e| e.id.clone()).collect();
    VectorIndex::from_embeddings(ids, &rows, format!("{}|{}", gateway.model_tag(), text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub entity_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention_id: String,
    pub entries: Vec<ScoredCandidate>,
    pub k: usize,
}

impl CandidateSet {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|c| c.entity_id.as_str()).collect()
    }
}

/// Total ranking order: higher score first, then id ascending.
pub fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.entity_id.cmp(&b.entity_id))
}

/// Heap entry whose `Ord` puts the worst-ranked candidate on top.
struct Worst<'a> {
    score: f64,
    id: &'a str,
    row: usize,
}

impl Ord for Worst<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then_with(|| self.id.cmp(other.id))
    }
}
impl PartialOrd for Worst<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl PartialEq for Worst<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst<'_> {}

/// Normalized query in f64.
pub fn query_vector(query: &[f32], dim: usize) -> Result<Vec<f64>, RetrievalError> {
    if query.len() != dim {
        return Err(RetrievalError::DimMismatch { expected: dim, got: query.len() });
    }
    let norm = query.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(query.iter().map(|&x| x as f64 / norm).collect())
}

/// Score of one stored row against a normalized query: sequential f64 dot
/// product, clamped into [-1, 1].
pub fn row_score(row: &[f32], q: &[f64]) -> f64 {
    let mut s = 0.0f64;
    for (&r, &x) in row.iter().zip(q) {
        s += r as f64 * x;
    }
    s.clamp(-1.0, 1.0)
}

/// Exhaustive top-k over the index, or over `restrict_to` when given.
pub fn retrieve_topk(
    mention_id: &str,
    query: &[f32],
    index: &VectorIndex,
    k: usize,
    restrict_to: Option<&[String]>,
) -> Result<CandidateSet, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let q = query_vector(query, index.dim())?;
    let rows: Vec<usize> = match restrict_to {
        None => (0..index.len()).collect(),
        Some(ids) => {
            let mut seen = HashSet::with_capacity(ids.len());
            let mut rows = Vec::with_capacity(ids.len());
            for id in ids {
                let pos = index
                    .position(id)
                    .ok_or_else(|| RetrievalError::UnknownEntityId(id.clone()))?;
                if seen.insert(pos) {
                    rows.push(pos);
                }
            }
            rows
        }
    };
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
    for row in rows {
        let cand = Worst { score: row_score(index.row(row), &q), id: &index.ids()[row], row };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(mut top) = heap.peek_mut() {
            if cand < *top {
                *top = cand;
            }
        }
    }
    // into_sorted_vec is ascending under `Worst`, i.e. best first.
    let entries = heap
        .into_sorted_vec()
        .into_iter()
        .map(|w| ScoredCandidate { entity_id: index.ids()[w.row].clone(), score: w.score })
        .collect();
    Ok(CandidateSet { mention_id: mention_id.to_string(), entries, k })
}
