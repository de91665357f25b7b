//! A small deterministic knowledge base and mention set for demos and
//! end-to-end tests against the mock backend.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::{evaluate, EvalError, EvalReport, DEFAULT_KS};
use crate::gateway::{GatewayConfig, MockSelection};
use crate::kb::{self, Dataset, Entity, KbError, Mention};
use crate::pipeline::{Ablation, Gateways, Paths, Pipeline, PipelineConfig, PipelineError};

const PLACES: [(&str, &str); 10] = [
    ("Arden", "the northern fens"),
    ("Belmar", "the chalk uplands"),
    ("Corvin", "the western marches"),
    ("Dunmore", "the salt coast"),
    ("Elsworth", "the vale of reeds"),
    ("Fenwick", "the granite moors"),
    ("Galloway", "the lake district"),
    ("Harrow", "the river plain"),
    ("Ivel", "the pine highlands"),
    ("Jarrow", "the eastern estuary"),
];

const KINDS: [(&str, &str); 5] = [
    ("River", "a river that floods the meadows each spring and drives old watermills"),
    ("Castle", "a ruined castle with a square keep, a moat and a gatehouse of red stone"),
    ("Railway", "a narrow gauge railway carrying slate wagons and steam locomotives"),
    ("Festival", "a summer festival of folk music, dancing and lantern parades"),
    ("Observatory", "an observatory with a brass telescope used to chart comets and stars"),
];

pub const N_ENTITIES: usize = 50;
pub const N_MENTIONS: usize = 20;

/// A valid 1×1 PNG.
pub const TINY_PNG: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52,
    0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1f, 0x15, 0xc4,
    0x89, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xf8, 0xcf, 0xc0, 0xf0,
    0x1f, 0x00, 0x05, 0x00, 0x01, 0xff, 0x89, 0x99, 0x3d, 0x1d, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45,
    0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

fn entity_id(i: usize) -> String {
    format!("E{i:03}")
}

pub fn entities() -> Vec<Entity> {
    (0..N_ENTITIES)
        .map(|i| {
            let (place, region) = PLACES[i / KINDS.len()];
            let (kind, what) = KINDS[i % KINDS.len()];
            Entity::new(
                entity_id(i),
                format!("{place} {kind}"),
                format!("The {place} {kind} is {what}, located near {place} in {region}."),
            )
        })
        .collect()
}

pub fn mentions() -> Vec<Mention> {
    (0..N_MENTIONS)
        .map(|j| {
            let gold = (j * 7 + 3) % N_ENTITIES;
            let (place, region) = PLACES[gold / KINDS.len()];
            let (kind, what) = KINDS[gold % KINDS.len()];
            // Every other mention uses the bare place name, which the fuzzy
            // stage cannot tell apart from the other four kinds.
            let name = if j % 2 == 0 { format!("{place} {kind}") } else { place.to_string() };
            let detail: Vec<&str> = what.split_whitespace().skip(1).take(6).collect();
            let mut m = Mention::new(
                format!("m{j:02}"),
                name,
                format!("Photo from {region}: the {place} {} {}.", kind.to_lowercase(), detail.join(" ")),
            );
            m.gold_entity_id = Some(entity_id(gold));
            if j % 3 == 0 {
                m.image_ref = Some(format!("images/m{j:02}.png"));
            }
            m
        })
        .collect()
}

pub fn dataset() -> Dataset {
    Dataset::new(entities(), mentions())
}

/// Writes entities, mentions and images under `dir`; returns the paths with
/// every file rooted there.
pub fn write_dataset(dir: &Path) -> Result<Paths, KbError> {
    let paths = Paths { image_root: Some(PathBuf::from(".")), ..Paths::default() }.rooted(dir);
    let io = |p: &Path, e| KbError::io(p, e);
    std::fs::create_dir_all(paths.entities.parent().unwrap_or(dir)).map_err(|e| io(dir, e))?;
    kb::save_entities(&paths.entities, &entities())?;
    let ms = mentions();
    kb::save_mentions(&paths.mentions, &ms)?;
    for m in &ms {
        if let Some(r) = &m.image_ref {
            let p = dir.join(r);
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
            }
            std::fs::write(&p, TINY_PNG).map_err(|e| io(&p, e))?;
        }
    }
    Ok(paths)
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
}

/// Mock configuration used by the demo.
pub fn demo_config(paths: Paths, selection: MockSelection, ablation: Ablation, jobs: usize) -> PipelineConfig {
    let llm = GatewayConfig { mock_selection: selection, ..GatewayConfig::mock() };
    PipelineConfig { paths, llm, ablation, jobs, ..PipelineConfig::mock() }
}

/// Writes the synthetic data under `dir` and evaluates every mention with
/// the mock backend.
pub fn run_demo(dir: &Path, selection: MockSelection, ablation: Ablation, jobs: usize) -> Result<EvalReport, DemoError> {
    let paths = write_dataset(dir)?;
    let config = demo_config(paths, selection, ablation, jobs);
    let data = Dataset::new(kb::load_entities(&config.paths.entities)?, kb::load_mentions(&config.paths.mentions)?);
    let gateways = Gateways::connect(&config, &data.entities, &data.mentions)?;
    let pipeline = Pipeline::open(config, data.entities, gateways)?;
    let all: Vec<&Mention> = data.mentions.iter().collect();
    Ok(evaluate(&pipeline, &all, &DEFAULT_KS, "synthetic")?)
}
