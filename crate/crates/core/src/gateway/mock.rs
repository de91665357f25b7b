//! Deterministic offline backend.
//!
//! Chat replies are templates keyed on which pipeline prompt is detected:
//!
//! * entity summary prompt: `SUMMARY(<hash8 of name>): <first 12 words of description>`
//! * mention prompt: `The <name> refer to MOCK-<hash8 of prompt and image>`
//! * selection prompt: a fenced JSON answer. In hash-choice mode the index is
//!   a hash of the mention block modulo the candidate count; in always-gold
//!   mode the registered gold entity is chosen when it is in the table.
//!
//! Embeddings are signed character-trigram bags hashed onto `dim` buckets
//! and L2-normalized. Every output is a pure function of the input bytes and
//! the seed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_dims, validate_texts, ChatRequest, Embedding, GatewayConfig, GatewayError, ModelGateway,
    Telemetry, TelemetrySnapshot,
};
use crate::prompt;

pub const DEFAULT_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockSelection {
    #[default]
    HashChoice,
    AlwaysGold,
}

impl std::str::FromStr for MockSelection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hash-choice" => Ok(MockSelection::HashChoice),
            "always-gold" => Ok(MockSelection::AlwaysGold),
            other => Err(format!("unknown mock selection mode {other:?}")),
        }
    }
}

pub struct MockGateway {
    seed: u64,
    dim: usize,
    selection: MockSelection,
    /// (mention name, mention context) -> gold entity name
    gold: HashMap<(String, String), String>,
    max_inflight: usize,
    telemetry: Telemetry,
}

impl MockGateway {
    pub fn new(seed: u64, dim: usize) -> Self {
        MockGateway {
            seed,
            dim: dim.max(1),
            selection: MockSelection::HashChoice,
            gold: HashMap::new(),
            max_inflight: 4,
            telemetry: Telemetry::default(),
        }
    }

    pub fn from_config(config: &GatewayConfig) -> Self {
        let mut g = MockGateway::new(config.mock_seed, config.mock_dim);
        g.selection = config.mock_selection;
        g.max_inflight = config.max_inflight.max(1);
        g
    }

    pub fn with_selection(mut self, selection: MockSelection) -> Self {
        self.selection = selection;
        self
    }

    /// Registers the gold answer used in always-gold mode.
    pub fn with_gold(
        mut self,
        mention_name: impl Into<String>,
        mention_context: impl Into<String>,
        gold_entity_name: impl Into<String>,
    ) -> Self {
        // Keys are stored as they appear in the single-line mention block.
        let key = (prompt::one_line(&mention_name.into()), prompt::one_line(&mention_context.into()));
        self.gold.insert(key, gold_entity_name.into());
        self
    }

    fn digest(&self, domain: &str, parts: &[&[u8]]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(domain.as_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        h.finalize().into()
    }

    fn hash8(&self, domain: &str, parts: &[&[u8]]) -> String {
        hex::encode(&self.digest(domain, parts)[..4])
    }

    fn hash_u64(&self, domain: &str, parts: &[&[u8]]) -> u64 {
        let d = self.digest(domain, parts);
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    fn reply(&self, request: &ChatRequest) -> String {
        let text = request.user.as_str();
        let image: &[u8] = request.image.as_ref().map(|i| i.bytes.as_slice()).unwrap_or(&[]);
        if let Some((name, description)) = parse_entity_prompt(text) {
            let words: Vec<&str> = description.split_whitespace().take(12).collect();
            return format!(
                "SUMMARY({}): {}",
                self.hash8("summary", &[name.as_bytes()]),
                words.join(" ")
            );
        }
        if let Some(name) = parse_mention_prompt(text) {
            return format!(
                "The {name} refer to MOCK-{}",
                self.hash8("mention", &[text.as_bytes(), image])
            );
        }
        if let Some(sel) = parse_selection_prompt(text) {
            return self.select(&sel);
        }
        format!("MOCK-{}", self.hash8("chat", &[text.as_bytes(), image]))
    }

    fn select(&self, sel: &SelectionView<'_>) -> String {
        let count = sel.table.len();
        let gold_idx = match self.selection {
            MockSelection::AlwaysGold => self
                .gold
                .get(&(sel.name.to_string(), sel.context.to_string()))
                .and_then(|gold| {
                    let gold = prompt::one_line(gold);
                    sel.table.iter().position(|(_, line)| {
                        line.strip_prefix(gold.as_str())
                            .is_some_and(|rest| rest.is_empty() || rest.starts_with(": "))
                    })
                }),
            MockSelection::HashChoice => None,
        };
        let idx = gold_idx.unwrap_or_else(|| {
            let h = self.hash_u64("select", &[sel.name.as_bytes(), sel.context.as_bytes()]);
            (h % count as u64) as usize
        });
        let (id, line) = &sel.table[idx];
        let name = line.split(": ").next().unwrap_or(line);
        format!(
            "```json\n{{\n    \"id\": \"{id}\",\n    \"name\": {}\n}}\n```",
            serde_json::to_string(name).unwrap()
        )
    }

    fn embed_one(&self, text: &str) -> Embedding {
        let mut chars = vec!['\u{2}'];
        chars.extend(text.chars());
        chars.push('\u{3}');
        let mut acc = vec![0f64; self.dim];
        let mut buf = [0u8; 12];
        for w in chars.windows(3) {
            let mut n = 0;
            for c in w {
                n += c.encode_utf8(&mut buf[n..]).len();
            }
            let h = self.hash_u64("trigram", &[&buf[..n]]);
            let bucket = (h % self.dim as u64) as usize;
            acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let mut norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            let h = self.hash_u64("fallback", &[text.as_bytes()]);
            acc[(h % self.dim as u64) as usize] = 1.0;
            norm = 1.0;
        }
        Embedding(acc.iter().map(|x| (x / norm) as f32).collect())
    }
}

struct SelectionView<'a> {
    name: &'a str,
    context: &'a str,
    /// (index label, text after "<i>. ")
    table: Vec<(usize, &'a str)>,
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let to = text[from..].find(end)? + from;
    Some(&text[from..to])
}

fn parse_entity_prompt(text: &str) -> Option<(&str, &str)> {
    if !text.starts_with(prompt::ENTITY_SUMMARY_HEAD) {
        return None;
    }
    let name = between(text, "\nEntity name: ", "\nEntity description: ")?;
    let description = between(text, "\nEntity description: ", "\n\nTry your best")?;
    Some((name, description))
}

fn parse_mention_prompt(text: &str) -> Option<&str> {
    if !text.starts_with(prompt::MENTION_HEAD) || !text.contains(prompt::MENTION_DIRECTIVE) {
        return None;
    }
    between(text, prompt::MENTION_HEAD, ".\nThe image describes ")
}

fn parse_selection_prompt(text: &str) -> Option<SelectionView<'_>> {
    if !text.starts_with(prompt::SELECTION_PREAMBLE) {
        return None;
    }
    let block = between(text, "### Mention\n", "\n\n### Entity table\n")?;
    let name = between(block, "Name: ", "\nContext: ")?;
    let ctx_start = block.find("\nContext: ")? + "\nContext: ".len();
    let rest = &block[ctx_start..];
    let ctx_end = ["\nCategory: ", "\nDescription: "]
        .iter()
        .filter_map(|m| rest.find(m))
        .min()
        .unwrap_or(rest.len());
    let context = &rest[..ctx_end];
    let table_text = between(text, "\n\n### Entity table\n", "\n\n")?;
    let mut table = Vec::new();
    for (i, line) in table_text.lines().enumerate() {
        let label = format!("{i}. ");
        table.push((i, line.strip_prefix(label.as_str())?));
    }
    if table.is_empty() {
        return None;
    }
    Some(SelectionView { name, context, table })
}

impl ModelGateway for MockGateway {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate(false)?;
        self.telemetry.request();
        Ok(self.reply(request))
    }

    fn chat_multimodal(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        request.validate(true)?;
        self.telemetry.request();
        Ok(self.reply(request))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>, GatewayError> {
        validate_texts(texts)?;
        self.telemetry.request();
        let out: Vec<Embedding> = texts.iter().map(|t| self.embed_one(t)).collect();
        check_dims(&out)?;
        Ok(out)
    }

    fn model_tag(&self) -> String {
        format!("mock:seed={}:dim={}", self.seed, self.dim)
    }

    fn telemetry(&self) -> TelemetrySnapshot {
        self.telemetry.snapshot()
    }

    fn max_inflight(&self) -> usize {
        self.max_inflight
    }
}
