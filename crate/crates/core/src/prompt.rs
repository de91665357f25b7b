//! Prompt templates for entity summarization, mention description and
//! multi-choice selection.
//!
//! Placeholders are written `{{name}}`. Rendering is a single pass, so bound
//! values are never re-scanned for placeholders.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::{Entity, Mention};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template:?} has no binding for placeholder {name:?}")]
    Unbound { template: TemplateId, name: String },
    #[error("template {template:?} has an unterminated placeholder")]
    Unterminated { template: TemplateId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    /// Entity summary.
    EntityAugment,
    /// Mention description from image and context.
    MentionAugment,
    /// Multi-choice selection over the candidate table.
    MultiChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: &'static str,
}

pub const ENTITY_SUMMARY_HEAD: &str =
    "Please generate a one-sentence summary for the given entity, including entity name and description.";

pub const ENTITY_AUGMENT: PromptTemplate = PromptTemplate {
    id: TemplateId::EntityAugment,
    body: "Please generate a one-sentence summary for the given entity, including entity name and description.\n\
Entity name: {{name}}\n\
Entity description: {{description}}\n\
\n\
Try your best to summarize the main content of the given entity. And generate a short summary in 1 sentence.\n\
Summary:",
};

pub const MENTION_HEAD: &str = "The target entity named ";
pub const MENTION_DIRECTIVE: &str =
    "Only generate an introduction to the target entity, not a description of the image.";

pub const MENTION_AUGMENT: PromptTemplate = PromptTemplate {
    id: TemplateId::MentionAugment,
    body: "The target entity named {{name}}.\n\
The image describes {{context}}\n\
Introduce the entity named {{name}}. Answer follow the format: \"The {{name}} refer to...\"\n\
Only generate an introduction to the target entity, not a description of the image.",
};

pub const SELECTION_PREAMBLE: &str = "You are an expert in knowledge graph, and matching at top k specifically. \
Your task is to create matches between mention and entity tables to select the best-matched entity to match the given mention.";

pub const SELECTION_DIRECTIVE: &str = "Just give the most matched entity and do not give me any other information.\n\
Output a json following the format:\n\
```json\n\
{\n    \"id\": \"\",\n    \"name\": \"\"\n}\n\
```";

pub const MULTI_CHOICE: PromptTemplate = PromptTemplate {
    id: TemplateId::MultiChoice,
    body: "{{preamble}}\n\n{{input}}\n\n{{directive}}",
};

impl PromptTemplate {
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or(TemplateError::Unterminated { template: self.id })?;
            let key = &after[..end];
            let value = bindings
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::Unbound {
                    template: self.id,
                    name: key.to_string(),
                })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Short stable hash of the template text, used in cache keys.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.body.as_bytes());
        if self.id == TemplateId::MultiChoice {
            h.update(SELECTION_PREAMBLE.as_bytes());
            h.update(SELECTION_DIRECTIVE.as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Collapses line breaks to single spaces so a value fits on one table line.
pub fn one_line(s: &str) -> String {
    s.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

pub fn render_entity_summary_prompt(entity: &Entity) -> String {
    ENTITY_AUGMENT
        .render(&[("name", &entity.name), ("description", &entity.description)])
        .expect("entity template binds all placeholders")
}

/// Renders the mention prompt. The flag reports whether the mention carries
/// an image to send alongside the text.
pub fn render_mention_prompt(mention: &Mention) -> (String, bool) {
    let text = MENTION_AUGMENT
        .render(&[("name", &mention.name), ("context", &mention.context)])
        .expect("mention template binds all placeholders");
    (text, mention.image_ref.is_some())
}
