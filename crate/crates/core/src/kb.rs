//! Knowledge-base and mention records, JSONL ingestion and dataset splits.
//!
//! Records are stored one JSON object per line. Keys are written in a fixed
//! canonical order; keys the pipeline does not know about are kept in
//! `extra` and written back after the canonical ones.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed JSON record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("line {line}: missing required field {field:?}")]
    MissingField { field: &'static str, line: usize },
    #[error("line {line}: invalid field {field:?}: {reason}")]
    InvalidField {
        field: &'static str,
        line: usize,
        reason: String,
    },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("split labels do not partition the mention ids: {0}")]
    BadSplitLabels(String),
}

impl KbError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        KbError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A knowledge-base entity: name, description, optional image and the
/// LLM-generated summary once augmented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Entity {
    pub fn new(id: impl Into<String>, name: impl Into<String>, description: impl Into<String>) -> Self {
        Entity {
            id: id.into(),
            name: name.into(),
            description: description.into(),
            image_ref: None,
            summary: None,
            extra: Map::new(),
        }
    }
}

/// A mention to be linked: surface name, textual context, optional image,
/// optional gold entity and the MLLM-generated description once augmented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mention {
    pub id: String,
    pub name: String,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_entity_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Mention {
    pub fn new(id: impl Into<String>, name: impl Into<String>, context: impl Into<String>) -> Self {
        Mention {
            id: id.into(),
            name: name.into(),
            context: context.into(),
            image_ref: None,
            gold_entity_id: None,
            description: None,
            extra: Map::new(),
        }
    }

    /// Entity category carried by the input record under the `category` key.
    pub fn category(&self) -> Option<&str> {
        self.extra.get("category").and_then(Value::as_str)
    }

    /// Candidate ids supplied with the dataset under the `candidates` key.
    pub fn provided_candidates(&self) -> Vec<String> {
        match self.extra.get("candidates") {
            Some(Value::Array(items)) => items
                .iter()
                .filter_map(|v| v.as_str().map(str::to_owned))
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

pub type SplitLabels = BTreeMap<String, Split>;

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub entities: Vec<Entity>,
    pub mentions: Vec<Mention>,
    pub split_labels: Option<SplitLabels>,
}

impl Dataset {
    pub fn new(entities: Vec<Entity>, mentions: Vec<Mention>) -> Self {
        Dataset {
            entities,
            mentions,
            split_labels: None,
        }
    }

    pub fn with_split_labels(mut self, labels: SplitLabels) -> Result<Self, KbError> {
        check_partition(&self.mentions, &labels)?;
        self.split_labels = Some(labels);
        Ok(self)
    }

    /// Mentions of one split, in file order. `None` selects every mention.
    pub fn mentions_in(&self, split: Option<Split>) -> Vec<&Mention> {
        match (split, &self.split_labels) {
            (None, _) => self.mentions.iter().collect(),
            (Some(_), None) => Vec::new(),
            (Some(s), Some(labels)) => self
                .mentions
                .iter()
                .filter(|m| labels.get(&m.id) == Some(&s))
                .collect(),
        }
    }

    /// Removes mentions whose gold id is missing from the entity collection.
    /// Returns how many were dropped.
    pub fn drop_unlinkable(&mut self) -> usize {
        let ids: HashSet<&str> = self.entities.iter().map(|e| e.id.as_str()).collect();
        let before = self.mentions.len();
        let keep: Vec<Mention> = self
            .mentions
            .drain(..)
            .filter(|m| match &m.gold_entity_id {
                Some(g) => ids.contains(g.as_str()),
                None => true,
            })
            .collect();
        self.mentions = keep;
        if let Some(labels) = &mut self.split_labels {
            let live: HashSet<&str> = self.mentions.iter().map(|m| m.id.as_str()).collect();
            labels.retain(|id, _| live.contains(id.as_str()));
        }
        before - self.mentions.len()
    }
}

fn check_partition(mentions: &[Mention], labels: &SplitLabels) -> Result<(), KbError> {
    if labels.len() != mentions.len() {
        return Err(KbError::BadSplitLabels(format!(
            "{} labels for {} mentions",
            labels.len(),
            mentions.len()
        )));
    }
    for m in mentions {
        if !labels.contains_key(&m.id) {
            return Err(KbError::BadSplitLabels(format!("mention {:?} is unlabeled", m.id)));
        }
    }
    Ok(())
}

fn required_str<'a>(
    obj: &'a Map<String, Value>,
    field: &'static str,
    line: usize,
) -> Result<&'a str, KbError> {
    match obj.get(field) {
        None => Err(KbError::MissingField { field, line }),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(KbError::InvalidField {
            field,
            line,
            reason: format!("expected a string, found {other}"),
        }),
    }
}

fn optional_str(obj: &Map<String, Value>, field: &'static str, line: usize) -> Result<(), KbError> {
    match obj.get(field) {
        None | Some(Value::String(_)) => Ok(()),
        Some(other) => Err(KbError::InvalidField {
            field,
            line,
            reason: format!("expected a string, found {other}"),
        }),
    }
}

/// JSON objects of a JSON-lines file, with their 1-based line numbers.
type NumberedObjects = Vec<(usize, Map<String, Value>)>;

fn read_objects(path: &Path) -> Result<NumberedObjects, KbError> {
    let file = File::open(path).map_err(|e| KbError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| KbError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(obj)) => out.push((line_no, obj)),
            Ok(_) => {
                return Err(KbError::MalformedLine {
                    line: line_no,
                    reason: "expected a JSON object".into(),
                })
            }
            Err(e) => {
                return Err(KbError::MalformedLine {
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn check_name(name: &str, line: usize) -> Result<(), KbError> {
    if name.trim().is_empty() {
        return Err(KbError::InvalidField {
            field: "name",
            line,
            reason: "name is empty".into(),
        });
    }
    Ok(())
}

pub fn parse_entity(obj: Map<String, Value>, line: usize) -> Result<Entity, KbError> {
    required_str(&obj, "id", line)?;
    check_name(required_str(&obj, "name", line)?, line)?;
    required_str(&obj, "description", line)?;
    optional_str(&obj, "image_ref", line)?;
    optional_str(&obj, "summary", line)?;
    if let Some(Value::String(s)) = obj.get("summary") {
        if s.trim().is_empty() {
            return Err(KbError::InvalidField {
                field: "summary",
                line,
                reason: "summary is present but empty".into(),
            });
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| KbError::MalformedLine {
        line,
        reason: e.to_string(),
    })
}

pub fn parse_mention(obj: Map<String, Value>, line: usize) -> Result<Mention, KbError> {
    required_str(&obj, "id", line)?;
    check_name(required_str(&obj, "name", line)?, line)?;
    required_str(&obj, "context", line)?;
    for field in ["image_ref", "gold_entity_id", "description"] {
        optional_str(&obj, field, line)?;
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| KbError::MalformedLine {
        line,
        reason: e.to_string(),
    })
}

pub fn load_entities(path: impl AsRef<Path>) -> Result<Vec<Entity>, KbError> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, obj) in read_objects(path)? {
        let e = parse_entity(obj, line)?;
        if !seen.insert(e.id.clone()) {
            return Err(KbError::DuplicateId(e.id));
        }
        out.push(e);
    }
    log::debug!("loaded {} entities from {}", out.len(), path.display());
    Ok(out)
}

pub fn load_mentions(path: impl AsRef<Path>) -> Result<Vec<Mention>, KbError> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, obj) in read_objects(path)? {
        let m = parse_mention(obj, line)?;
        if !seen.insert(m.id.clone()) {
            return Err(KbError::DuplicateId(m.id));
        }
        out.push(m);
    }
    log::debug!("loaded {} mentions from {}", out.len(), path.display());
    Ok(out)
}

/// Writes records as JSONL to `path` through a sibling temp file and an
/// atomic rename.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), KbError> {
    let path = path.as_ref();
    let tmp = tmp_path(path);
    let file = File::create(&tmp).map_err(|e| KbError::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize to JSON");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| KbError::io(&tmp, e))?;
    }
    w.flush().map_err(|e| KbError::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| KbError::io(path, e))
}

pub fn save_entities(path: impl AsRef<Path>, entities: &[Entity]) -> Result<(), KbError> {
    write_jsonl(path, entities)
}

pub fn save_mentions(path: impl AsRef<Path>, mentions: &[Mention]) -> Result<(), KbError> {
    write_jsonl(path, mentions)
}

pub(crate) fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn save_split_labels(path: impl AsRef<Path>, labels: &SplitLabels) -> Result<(), KbError> {
    let path = path.as_ref();
    let body = serde_json::to_string_pretty(labels).expect("split labels serialize");
    std::fs::write(path, body + "\n").map_err(|e| KbError::io(path, e))
}

pub fn load_split_labels(path: impl AsRef<Path>) -> Result<SplitLabels, KbError> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|e| KbError::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| KbError::MalformedLine {
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Partition sizes for `n` items: validation and test take the floor of
/// their share, training takes the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], KbError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(KbError::BadRatios(ratios));
    }
    // The epsilon absorbs products such as 10 * 0.7 = 7.000000000000001
    // landing a hair under an integer in the other direction.
    let share = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
    let val = share(ratios[1]).min(n);
    let test = share(ratios[2]).min(n - val);
    Ok([n - val - test, val, test])
}

/// Seeded shuffle followed by contiguous slicing into train/val/test.
pub fn split_dataset(mentions: &[Mention], ratios: [f64; 3], seed: u64) -> Result<SplitLabels, KbError> {
    let [train, val, _test] = split_sizes(mentions.len(), ratios)?;
    let mut order: Vec<usize> = (0..mentions.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut labels = SplitLabels::new();
    for (pos, &idx) in order.iter().enumerate() {
        let split = if pos < train {
            Split::Train
        } else if pos < train + val {
            Split::Val
        } else {
            Split::Test
        };
        labels.insert(mentions[idx].id.clone(), split);
    }
    Ok(labels)
}
