//! Multi-choice selection: prompt rendering, reply parsing and fine-tune
//! record construction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::kb::{Entity, Mention};
use crate::prompt::{one_line, MULTI_CHOICE, SELECTION_DIRECTIVE, SELECTION_PREAMBLE};
use crate::retrieval::{CandidateSet, EntityText};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectionError {
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("model reply is blank")]
    EmptyReply,
    #[error("candidate {0} is not in the knowledge base")]
    UnknownEntityId(String),
}

/// One line of the entity table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub entity_id: String,
    pub name: String,
    /// Summary, or the raw description when entity augmentation is off.
    /// Empty text renders the name alone.
    pub text: String,
}

impl TableRow {
    pub fn from_entity(entity: &Entity, text: EntityText) -> Self {
        let text = match text {
            EntityText::Summary => entity.summary.clone().unwrap_or_default(),
            EntityText::Description => entity.description.clone(),
        };
        TableRow { entity_id: entity.id.clone(), name: entity.name.clone(), text }
    }
}

/// Table rows for a candidate set, in candidate rank order.
pub fn table_rows(
    candidates: &CandidateSet,
    entities: &HashMap<&str, &Entity>,
    text: EntityText,
) -> Result<Vec<TableRow>, SelectionError> {
    candidates
        .entries
        .iter()
        .map(|c| {
            entities
                .get(c.entity_id.as_str())
                .map(|e| TableRow::from_entity(e, text))
                .ok_or_else(|| SelectionError::UnknownEntityId(c.entity_id.clone()))
        })
        .collect()
}

pub fn mention_block(mention: &Mention) -> String {
    let mut s = format!("Name: {}\nContext: {}\n", one_line(&mention.name), one_line(&mention.context));
    if let Some(c) = mention.category() {
        s.push_str(&format!("Category: {}\n", one_line(c)));
    }
    if let Some(d) = &mention.description {
        s.push_str(&format!("Description: {}\n", one_line(d)));
    }
    s.pop();
    s
}

pub fn entity_table(rows: &[TableRow]) -> String {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let text = one_line(&r.text);
            if text.trim().is_empty() {
                format!("{i}. {}", one_line(&r.name))
            } else {
                format!("{i}. {}: {text}", one_line(&r.name))
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// The text input: mention block followed by the entity table.
pub fn selection_input(mention: &Mention, rows: &[TableRow]) -> Result<String, SelectionError> {
    if rows.is_empty() {
        return Err(SelectionError::EmptyCandidates);
    }
    Ok(format!(
        "### Mention\n{}\n\n### Entity table\n{}",
        mention_block(mention),
        entity_table(rows)
    ))
}

pub fn render_selection_prompt(mention: &Mention, rows: &[TableRow]) -> Result<String, SelectionError> {
    let input = selection_input(mention, rows)?;
    Ok(MULTI_CHOICE
        .render(&[
            ("preamble", SELECTION_PREAMBLE),
            ("input", &input),
            ("directive", SELECTION_DIRECTIVE),
        ])
        .expect("selection template binds all placeholders"))
}

/// The instruction half of a fine-tune record: everything in the prompt
/// except the per-mention input.
pub fn selection_instruction() -> String {
    format!("{SELECTION_PREAMBLE}\n\n{SELECTION_DIRECTIVE}")
}

/// The format block of the prompt, filled in with candidate `index`.
pub fn format_answer(index: usize, name: &str) -> String {
    format!(
        "```json\n{{\n    \"id\": \"{index}\",\n    \"name\": {}\n}}\n```",
        serde_json::to_string(name).expect("strings serialize")
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    NameMatch,
    Top1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub mention_id: String,
    pub chosen_index: usize,
    pub chosen_entity_id: String,
    pub raw_reply: String,
    pub fallback_used: Fallback,
}

/// End index (inclusive) of the brace-balanced object starting at `start`,
/// skipping braces inside JSON strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn as_object(text: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

/// First JSON object in `reply` with both `id` and `name` keys. Objects
/// written with doubled braces (`{{ ... }}`) are accepted too.
pub fn find_answer_object(reply: &str) -> Option<Map<String, Value>> {
    let bytes = reply.as_bytes();
    for (start, _) in reply.match_indices('{') {
        let Some(end) = balanced_end(bytes, start) else {
            continue;
        };
        let slice = &reply[start..=end];
        let obj = as_object(slice).or_else(|| as_object(&slice.replace("{{", "{").replace("}}", "}")));
        if let Some(obj) = obj {
            if obj.contains_key("id") && obj.contains_key("name") {
                return Some(obj);
            }
        }
    }
    None
}

fn id_index(v: &Value) -> Option<usize> {
    match v {
        Value::String(s) => s.trim().parse().ok(),
        Value::Number(n) => n.as_u64().and_then(|n| usize::try_from(n).ok()),
        _ => None,
    }
}

/// Resolves a reply to a candidate: by table index, then by exact name,
/// then the top-ranked candidate.
pub fn parse_selection(raw_reply: &str, mention_id: &str, rows: &[TableRow]) -> Result<SelectionResult, SelectionError> {
    if rows.is_empty() {
        return Err(SelectionError::EmptyCandidates);
    }
    if raw_reply.trim().is_empty() {
        return Err(SelectionError::EmptyReply);
    }
    let mut chosen = (0, Fallback::Top1);
    if let Some(obj) = find_answer_object(raw_reply) {
        if let Some(i) = obj.get("id").and_then(id_index).filter(|&i| i < rows.len()) {
            chosen = (i, Fallback::None);
        } else if let Some(name) = obj.get("name").and_then(Value::as_str) {
            let name = name.trim();
            if let Some(i) = rows.iter().position(|r| r.name == name || one_line(&r.name) == name) {
                chosen = (i, Fallback::NameMatch);
            }
        }
    }
    Ok(SelectionResult {
        mention_id: mention_id.to_string(),
        chosen_index: chosen.0,
        chosen_entity_id: rows[chosen.0].entity_id.clone(),
        raw_reply: raw_reply.to_string(),
        fallback_used: chosen.1,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

pub fn gold_output(index: usize, name: &str) -> String {
    format!(
        "{{\"id\": \"{index}\", \"name\": {}}}",
        serde_json::to_string(name).expect("strings serialize")
    )
}

/// Fine-tune triplet for `mention`, or `None` when the gold entity is not
/// among the rows.
pub fn finetune_record(mention: &Mention, rows: &[TableRow], gold_id: &str) -> Option<FinetuneRecord> {
    let idx = rows.iter().position(|r| r.entity_id == gold_id)?;
    Some(FinetuneRecord {
        instruction: selection_instruction(),
        input: selection_input(mention, rows).ok()?,
        output: gold_output(idx, &rows[idx].name),
    })
}
