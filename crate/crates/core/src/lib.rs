//! Multimodal entity linking: knowledge-base records, fuzzy pre-filtering,
//! model gateways, LLM augmentation, embedding retrieval, multi-choice
//! selection and evaluation.

pub mod augment;
pub mod cache;
pub mod eval;
pub mod fuzzy;
pub mod gateway;
pub mod kb;
pub mod pipeline;
pub mod pool;
pub mod prompt;
pub mod retrieval;
pub mod selection;
pub mod synthetic;

#[cfg(feature = "test-util")]
pub mod testing;
