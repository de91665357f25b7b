//! Entity summaries and mention descriptions generated by the language
//! models, with on-disk caching and resumable batch runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::cache::{AugmentCache, CacheKey};
use crate::gateway::{ChatRequest, GatewayError, MediaType, ModelGateway};
use crate::kb::{self, Entity, KbError, Mention};
use crate::pool::parallel_map;
pub use crate::prompt::{render_entity_summary_prompt, render_mention_prompt};
use crate::prompt::{ENTITY_AUGMENT, MENTION_AUGMENT};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("{id}: {source}")]
    Gateway {
        id: String,
        #[source]
        source: GatewayError,
    },
    #[error("{id}: model returned an empty reply")]
    EmptyAugmentation { id: String },
    #[error("{id}: cannot read image {path}: {reason}")]
    ImageUnreadable { id: String, path: String, reason: String },
    #[error("{id}: image {path} is neither png nor jpeg")]
    UnsupportedImage { id: String, path: String },
    #[error("cache write failed: {0}")]
    Cache(#[from] std::io::Error),
    #[error(transparent)]
    Kb(#[from] KbError),
}

#[derive(Debug, Clone, Default)]
pub struct AugmentOptions {
    /// Leave records that already carry a summary/description untouched.
    pub skip_existing: bool,
    /// Text-only mention prompts even when an image is available.
    pub no_visual: bool,
    /// Augment at most this many records; the rest pass through unchanged.
    pub limit: Option<usize>,
    /// Base directory for relative image paths.
    pub image_root: Option<PathBuf>,
    /// Worker threads; capped by the gateway's inflight bound.
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BatchStats {
    pub augmented: usize,
    pub skipped: usize,
    pub total: usize,
}

fn trimmed_reply(id: &str, reply: String) -> Result<String, AugmentError> {
    let t = reply.trim();
    if t.is_empty() {
        return Err(AugmentError::EmptyAugmentation { id: id.to_string() });
    }
    Ok(t.to_string())
}

fn cached_call(
    cache: Option<&AugmentCache>,
    key: CacheKey,
    id: &str,
    call: impl FnOnce() -> Result<String, GatewayError>,
) -> Result<String, AugmentError> {
    if let Some(hit) = cache.and_then(|c| c.get(&key)) {
        return Ok(hit);
    }
    let reply = call().map_err(|source| AugmentError::Gateway { id: id.to_string(), source })?;
    let text = trimmed_reply(id, reply)?;
    if let Some(c) = cache {
        c.put(key, text.clone())?;
    }
    Ok(text)
}

/// Summary for one entity from the text model.
pub fn entity_summary(
    entity: &Entity,
    gateway: &dyn ModelGateway,
    cache: Option<&AugmentCache>,
) -> Result<String, AugmentError> {
    let prompt = render_entity_summary_prompt(entity);
    let key = CacheKey::new(
        "entity",
        &entity.id,
        &ENTITY_AUGMENT.hash(),
        &[prompt.as_bytes()],
        &gateway.model_tag(),
    );
    cached_call(cache, key, &entity.id, || gateway.chat(&ChatRequest::new(prompt.clone())))
}

pub fn augment_entity(entity: &Entity, gateway: &dyn ModelGateway) -> Result<Entity, AugmentError> {
    augment_entity_cached(entity, gateway, None)
}

pub fn augment_entity_cached(
    entity: &Entity,
    gateway: &dyn ModelGateway,
    cache: Option<&AugmentCache>,
) -> Result<Entity, AugmentError> {
    let mut out = entity.clone();
    out.summary = Some(entity_summary(entity, gateway, cache)?);
    Ok(out)
}

fn resolve_image(image_ref: &str, root: Option<&Path>) -> PathBuf {
    let p = Path::new(image_ref);
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn load_image(id: &str, image_ref: &str, root: Option<&Path>) -> Result<(Vec<u8>, MediaType), AugmentError> {
    let path = resolve_image(image_ref, root);
    let bytes = std::fs::read(&path).map_err(|e| AugmentError::ImageUnreadable {
        id: id.to_string(),
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let media = MediaType::sniff(&bytes)
        .or_else(|| {
            path.extension()
                .and_then(|e| e.to_str())
                .and_then(|e| MediaType::parse(e).ok())
        })
        .ok_or_else(|| AugmentError::UnsupportedImage {
            id: id.to_string(),
            path: path.display().to_string(),
        })?;
    Ok((bytes, media))
}

/// Description for one mention. Uses the multimodal model when the mention
/// has an image and visual input is enabled, the text model otherwise.
pub fn mention_description(
    mention: &Mention,
    text_gateway: &dyn ModelGateway,
    vision_gateway: &dyn ModelGateway,
    options: &AugmentOptions,
    cache: Option<&AugmentCache>,
) -> Result<String, AugmentError> {
    let (prompt, wants_image) = render_mention_prompt(mention);
    let image = match (&mention.image_ref, wants_image && !options.no_visual) {
        (Some(r), true) => Some(load_image(&mention.id, r, options.image_root.as_deref())?),
        _ => None,
    };
    match image {
        Some((bytes, media)) => {
            let key = CacheKey::new(
                "mention",
                &mention.id,
                &MENTION_AUGMENT.hash(),
                &[prompt.as_bytes(), &bytes],
                &vision_gateway.model_tag(),
            );
            cached_call(cache, key, &mention.id, || {
                vision_gateway.chat_multimodal(&ChatRequest::new(prompt.clone()).with_image(bytes, media))
            })
        }
        None => {
            let key = CacheKey::new(
                "mention",
                &mention.id,
                &MENTION_AUGMENT.hash(),
                &[prompt.as_bytes()],
                &text_gateway.model_tag(),
            );
            cached_call(cache, key, &mention.id, || text_gateway.chat(&ChatRequest::new(prompt.clone())))
        }
    }
}

/// Augments a mention through one gateway, used for both text-only and
/// image-bearing prompts.
pub fn augment_mention(
    mention: &Mention,
    gateway: &dyn ModelGateway,
    options: &AugmentOptions,
) -> Result<Mention, AugmentError> {
    let mut out = mention.clone();
    out.description = Some(mention_description(mention, gateway, gateway, options, None)?);
    Ok(out)
}

/// Runs `work` over the records that need it, in chunks, streaming finished
/// chunks to `sink` in input order. Stops after the first failing chunk.
fn run_batch<T, N, W>(
    records: &[T],
    needs_work: N,
    work: W,
    options: &AugmentOptions,
    jobs_cap: usize,
    mut sink: Option<&mut dyn Write>,
) -> Result<(Vec<T>, BatchStats), AugmentError>
where
    T: Clone + Serialize + Send + Sync,
    N: Fn(&T) -> bool,
    W: Fn(&T) -> Result<T, AugmentError> + Sync,
{
    let mut budget = options.limit.unwrap_or(usize::MAX);
    let plan: Vec<bool> = records
        .iter()
        .map(|r| {
            let go = needs_work(r) && budget > 0;
            if go {
                budget -= 1;
            }
            go
        })
        .collect();
    let jobs = options.jobs.max(1).min(jobs_cap.max(1));
    let chunk = (jobs * 4).max(1);
    let mut stats = BatchStats { total: records.len(), ..Default::default() };
    let mut out = Vec::with_capacity(records.len());
    let indexed: Vec<(usize, &T)> = records.iter().enumerate().collect();
    for part in indexed.chunks(chunk) {
        let results = parallel_map(part, jobs, |_, (i, r)| {
            if plan[*i] {
                work(r).map(Some)
            } else {
                Ok(None)
            }
        });
        let mut done = Vec::with_capacity(part.len());
        for ((_, r), res) in part.iter().zip(results) {
            match res? {
                Some(new) => {
                    stats.augmented += 1;
                    done.push(new);
                }
                None => {
                    stats.skipped += 1;
                    done.push((*r).clone());
                }
            }
        }
        if let Some(w) = sink.as_deref_mut() {
            for r in &done {
                serde_json::to_writer(&mut *w, r).expect("records serialize");
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        out.extend(done);
    }
    Ok((out, stats))
}

pub fn augment_entities(
    entities: &[Entity],
    gateway: &dyn ModelGateway,
    cache: Option<&AugmentCache>,
    options: &AugmentOptions,
) -> Result<(Vec<Entity>, BatchStats), AugmentError> {
    augment_entities_to(entities, gateway, cache, options, None)
}

fn augment_entities_to(
    entities: &[Entity],
    gateway: &dyn ModelGateway,
    cache: Option<&AugmentCache>,
    options: &AugmentOptions,
    sink: Option<&mut dyn Write>,
) -> Result<(Vec<Entity>, BatchStats), AugmentError> {
    run_batch(
        entities,
        |e| !(options.skip_existing && e.summary.is_some()),
        |e| augment_entity_cached(e, gateway, cache),
        options,
        gateway.max_inflight(),
        sink,
    )
}

pub fn augment_mentions(
    mentions: &[Mention],
    text_gateway: &dyn ModelGateway,
    vision_gateway: &dyn ModelGateway,
    cache: Option<&AugmentCache>,
    options: &AugmentOptions,
) -> Result<(Vec<Mention>, BatchStats), AugmentError> {
    augment_mentions_to(mentions, text_gateway, vision_gateway, cache, options, None)
}

fn augment_mentions_to(
    mentions: &[Mention],
    text_gateway: &dyn ModelGateway,
    vision_gateway: &dyn ModelGateway,
    cache: Option<&AugmentCache>,
    options: &AugmentOptions,
    sink: Option<&mut dyn Write>,
) -> Result<(Vec<Mention>, BatchStats), AugmentError> {
    let cap = if options.no_visual {
        text_gateway.max_inflight()
    } else {
        text_gateway.max_inflight().min(vision_gateway.max_inflight())
    };
    run_batch(
        mentions,
        |m| !(options.skip_existing && m.description.is_some()),
        |m| {
            let mut out = m.clone();
            out.description = Some(mention_description(m, text_gateway, vision_gateway, options, cache)?);
            Ok(out)
        },
        options,
        cap,
        sink,
    )
}

fn with_streamed_output<T>(
    output: &Path,
    f: impl FnOnce(&mut dyn Write) -> Result<T, AugmentError>,
) -> Result<T, AugmentError> {
    let tmp = kb::tmp_path(output);
    let mut w = BufWriter::new(File::create(&tmp)?);
    let result = f(&mut w)?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, output)?;
    Ok(result)
}

/// Augments an entity file into `output`. Finished chunks are appended to a
/// temp file which is renamed over `output` once every record is written.
pub fn augment_entity_file(
    input: &Path,
    output: &Path,
    gateway: &dyn ModelGateway,
    cache: Option<&AugmentCache>,
    options: &AugmentOptions,
) -> Result<BatchStats, AugmentError> {
    let entities = kb::load_entities(input)?;
    with_streamed_output(output, |w| {
        augment_entities_to(&entities, gateway, cache, options, Some(w)).map(|(_, s)| s)
    })
}

pub fn augment_mention_file(
    input: &Path,
    output: &Path,
    text_gateway: &dyn ModelGateway,
    vision_gateway: &dyn ModelGateway,
    cache: Option<&AugmentCache>,
    options: &AugmentOptions,
) -> Result<BatchStats, AugmentError> {
    let mentions = kb::load_mentions(input)?;
    with_streamed_output(output, |w| {
        augment_mentions_to(&mentions, text_gateway, vision_gateway, cache, options, Some(w)).map(|(_, s)| s)
    })
}
