//! The linking pipeline: coarse fuzzy candidates, augmentation, embedding
//! rerank and multi-choice selection, with per-stage toggles.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{self, AugmentError, AugmentOptions};
use crate::cache::AugmentCache;
use crate::fuzzy::{seed_candidates, FuzzyError};
use crate::gateway::{
    Backend, ChatRequest, GatewayConfig, GatewayError, MockGateway, MockSelection, SharedGateway,
};
use crate::kb::{Entity, KbError, Mention};
use crate::retrieval::{
    build_index, mention_repr, retrieve_topk, CandidateSet, EntityText, RetrievalError,
    ScoredCandidate, VectorIndex,
};
use crate::selection::{
    finetune_record, parse_selection, render_selection_prompt, table_rows, FinetuneRecord,
    SelectionError, SelectionResult,
};

/// Pipeline variants, one per ablation row plus the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Rerank top-1 is the answer.
    Selection,
    /// Fuzzy top-k replaces embedding retrieval.
    Retrieval,
    /// Raw descriptions instead of summaries.
    EntityAug,
    /// Mentions keep only name and context.
    MentionAug,
    EmAug,
    /// Mention descriptions generated without the image.
    Visual,
    VisualSelection,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::None,
        Ablation::Selection,
        Ablation::Retrieval,
        Ablation::EntityAug,
        Ablation::MentionAug,
        Ablation::EmAug,
        Ablation::Visual,
        Ablation::VisualSelection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Selection => "selection",
            Ablation::Retrieval => "retrieval",
            Ablation::EntityAug => "entity-aug",
            Ablation::MentionAug => "mention-aug",
            Ablation::EmAug => "em-aug",
            Ablation::Visual => "visual",
            Ablation::VisualSelection => "visual-selection",
        }
    }

    pub fn toggles(self) -> StageToggles {
        let all = StageToggles::default();
        match self {
            Ablation::None => all,
            Ablation::Selection => StageToggles { selection: false, ..all },
            Ablation::Retrieval => StageToggles { retrieval: false, ..all },
            Ablation::EntityAug => StageToggles { entity_aug: false, ..all },
            Ablation::MentionAug => StageToggles { mention_aug: false, ..all },
            Ablation::EmAug => StageToggles { entity_aug: false, mention_aug: false, ..all },
            Ablation::Visual => StageToggles { visual: false, ..all },
            Ablation::VisualSelection => StageToggles { visual: false, selection: false, ..all },
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                format!("unknown ablation {s:?} (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageToggles {
    pub selection: bool,
    pub retrieval: bool,
    pub entity_aug: bool,
    pub mention_aug: bool,
    pub visual: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles { selection: true, retrieval: true, entity_aug: true, mention_aug: true, visual: true }
    }
}

impl StageToggles {
    pub fn entity_text(&self) -> EntityText {
        if self.entity_aug {
            EntityText::Summary
        } else {
            EntityText::Description
        }
    }
}

/// Whether embedding retrieval searches only the coarse fuzzy candidates or
/// the whole knowledge base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Restrict {
    #[default]
    Coarse,
    Full,
}

impl std::str::FromStr for Restrict {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coarse" => Ok(Restrict::Coarse),
            "full" => Ok(Restrict::Full),
            other => Err(format!("unknown restriction {other:?} (expected coarse or full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub entities: PathBuf,
    pub mentions: PathBuf,
    pub splits: PathBuf,
    pub index: PathBuf,
    pub cache_dir: PathBuf,
    /// Base directory for relative image references.
    pub image_root: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            entities: "data/entities.jsonl".into(),
            mentions: "data/mentions.jsonl".into(),
            splits: "data/splits.json".into(),
            index: "data/entities.melx".into(),
            cache_dir: "data/cache".into(),
            image_root: None,
        }
    }
}

impl Paths {
    /// All paths resolved against `base` (absolute paths are kept).
    pub fn rooted(&self, base: &Path) -> Paths {
        let j = |p: &Path| base.join(p);
        Paths {
            entities: j(&self.entities),
            mentions: j(&self.mentions),
            splits: j(&self.splits),
            index: j(&self.index),
            cache_dir: j(&self.cache_dir),
            image_root: self.image_root.as_deref().map(j),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub llm: GatewayConfig,
    pub mllm: GatewayConfig,
    pub embedder: GatewayConfig,
    pub coarse_n: usize,
    pub k: usize,
    pub ablation: Ablation,
    pub restrict: Restrict,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            llm: GatewayConfig::default(),
            mllm: GatewayConfig::default(),
            embedder: GatewayConfig::default(),
            coarse_n: 100,
            k: 5,
            ablation: Ablation::None,
            restrict: Restrict::Coarse,
            seed: 0,
            jobs: 4,
        }
    }
}

impl PipelineConfig {
    /// Every backend switched to the offline mock.
    pub fn mock() -> Self {
        PipelineConfig {
            llm: GatewayConfig::mock(),
            mllm: GatewayConfig::mock(),
            embedder: GatewayConfig::mock(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::Config("k must be at least 1".into()));
        }
        if self.coarse_n < self.k {
            return Err(PipelineError::Config(format!(
                "coarse_n ({}) must be at least k ({})",
                self.coarse_n, self.k
            )));
        }
        for (name, g) in [("llm", &self.llm), ("mllm", &self.mllm), ("embedder", &self.embedder)] {
            g.validate().map_err(|e| PipelineError::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Index file for the active entity text; the raw-description index is
    /// kept beside the summary one.
    pub fn index_path(&self) -> PathBuf {
        let base = &self.paths.index;
        match self.ablation.toggles().entity_text() {
            EntityText::Summary => base.clone(),
            EntityText::Description => base.with_extension("description.melx"),
        }
    }

    /// Hash of every setting that can change results. Paths and the worker
    /// count are left out.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
            obj.remove("jobs");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("unknown mention id {0}")]
    UnknownMention(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Augment,
    Retrieval,
    Selection,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Augment => "augment",
            Stage::Retrieval => "retrieval",
            Stage::Selection => "selection",
        })
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Coarse(#[from] FuzzyError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Error)]
#[error("mention {mention_id}: {stage} stage failed: {source}")]
pub struct LinkError {
    pub mention_id: String,
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkResult {
    pub mention_id: String,
    pub predicted: String,
    /// Full candidate ranking, best first, with scores whose order defines
    /// Top-k rank.
    pub ranking: Vec<ScoredCandidate>,
    pub selection: Option<SelectionResult>,
}

/// The three model endpoints.
#[derive(Clone)]
pub struct Gateways {
    pub llm: SharedGateway,
    pub mllm: SharedGateway,
    pub embedder: SharedGateway,
}

impl Gateways {
    pub fn single(g: SharedGateway) -> Self {
        Gateways { llm: g.clone(), mllm: g.clone(), embedder: g }
    }

    /// Connects all three. A mock LLM in always-gold mode is given the gold
    /// answers of `mentions`.
    pub fn connect(config: &PipelineConfig, entities: &[Entity], mentions: &[Mention]) -> Result<Self, GatewayError> {
        let llm = if config.llm.backend == Backend::Mock && config.llm.mock_selection == MockSelection::AlwaysGold {
            Arc::new(register_golds(MockGateway::from_config(&config.llm), entities, mentions)) as SharedGateway
        } else {
            config.llm.connect()?
        };
        Ok(Gateways { llm, mllm: config.mllm.connect()?, embedder: config.embedder.connect()? })
    }
}

pub fn register_golds(mut mock: MockGateway, entities: &[Entity], mentions: &[Mention]) -> MockGateway {
    let names: HashMap<&str, &str> = entities.iter().map(|e| (e.id.as_str(), e.name.as_str())).collect();
    for m in mentions {
        if let Some(name) = m.gold_entity_id.as_deref().and_then(|g| names.get(g)) {
            mock = mock.with_gold(m.name.clone(), m.context.clone(), *name);
        }
    }
    mock
}

/// Deterministic sample of at most `n` items, kept in input order.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if n < len {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
    }
    idx
}

pub struct Pipeline {
    config: PipelineConfig,
    toggles: StageToggles,
    gateways: Gateways,
    entities: Vec<Entity>,
    index: Option<VectorIndex>,
    cache: AugmentCache,
    augment_options: AugmentOptions,
}

impl Pipeline {
    /// In-memory pipeline; call [`Pipeline::prepare`] before linking.
    pub fn new(config: PipelineConfig, entities: Vec<Entity>, gateways: Gateways) -> Result<Self, PipelineError> {
        config.validate()?;
        let toggles = config.ablation.toggles();
        let augment_options = AugmentOptions {
            skip_existing: true,
            no_visual: !toggles.visual,
            limit: None,
            image_root: config.paths.image_root.clone(),
            jobs: config.jobs.max(1),
        };
        Ok(Pipeline {
            config,
            toggles,
            gateways,
            entities,
            index: None,
            cache: AugmentCache::in_memory(),
            augment_options,
        })
    }

    pub fn with_cache(mut self, cache: AugmentCache) -> Self {
        self.cache = cache;
        self
    }

    /// Pipeline backed by the configured cache directory and index file. A
    /// stored index is reused only when its model tag and ids still match.
    pub fn open(config: PipelineConfig, entities: Vec<Entity>, gateways: Gateways) -> Result<Self, PipelineError> {
        let cache = AugmentCache::open(config.paths.cache_dir.join("augment-cache.jsonl"))?;
        let mut p = Pipeline::new(config, entities, gateways)?.with_cache(cache);
        p.summarize_entities()?;
        if p.toggles.retrieval {
            let path = p.index_path();
            let expected = p.expected_index_tag();
            let stored = match VectorIndex::read(&path) {
                Ok(ix) if ix.model_tag() == expected && p.ids_match(&ix) => Some(ix),
                Ok(_) => {
                    log::info!("{}: stale index, rebuilding", path.display());
                    None
                }
                Err(RetrievalError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => None,
                Err(e) => {
                    log::warn!("{}: unreadable index ({e}), rebuilding", path.display());
                    None
                }
            };
            match stored {
                Some(ix) => p.index = Some(ix),
                None => {
                    let ix = p.build_index()?;
                    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                        std::fs::create_dir_all(dir)?;
                    }
                    ix.write(&path)?;
                    p.index = Some(ix);
                }
            }
        }
        Ok(p)
    }

    pub fn index_path(&self) -> PathBuf {
        self.config.index_path()
    }

    fn expected_index_tag(&self) -> String {
        format!("{}|{}", self.gateways.embedder.model_tag(), self.toggles.entity_text())
    }

    fn ids_match(&self, ix: &VectorIndex) -> bool {
        ix.len() == self.entities.len() && ix.ids().iter().zip(&self.entities).all(|(a, e)| *a == e.id)
    }

    fn summarize_entities(&mut self) -> Result<(), PipelineError> {
        if self.toggles.entity_aug && self.entities.iter().any(|e| e.summary.is_none()) {
            let (out, stats) = augment::augment_entities(
                &self.entities,
                self.gateways.llm.as_ref(),
                Some(&self.cache),
                &self.augment_options,
            )?;
            log::info!("summarized {} entities", stats.augmented);
            self.entities = out;
        }
        Ok(())
    }

    fn build_index(&self) -> Result<VectorIndex, PipelineError> {
        Ok(build_index(&self.entities, self.gateways.embedder.as_ref(), self.toggles.entity_text())?)
    }

    /// Summarizes entities if needed and builds the in-memory index.
    pub fn prepare(&mut self) -> Result<(), PipelineError> {
        self.summarize_entities()?;
        if self.toggles.retrieval && self.index.is_none() {
            self.index = Some(self.build_index()?);
        }
        Ok(())
    }

    pub fn with_index(mut self, index: VectorIndex) -> Self {
        self.index = Some(index);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn toggles(&self) -> StageToggles {
        self.toggles
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn index(&self) -> Option<&VectorIndex> {
        self.index.as_ref()
    }

    pub fn gateways(&self) -> &Gateways {
        &self.gateways
    }

    /// Upper bound on useful parallelism for per-mention work.
    pub fn jobs(&self) -> usize {
        let g = &self.gateways;
        let mut cap = g.llm.max_inflight().min(g.embedder.max_inflight());
        if self.toggles.visual {
            cap = cap.min(g.mllm.max_inflight());
        }
        self.config.jobs.max(1).min(cap.max(1))
    }

    fn entity_map(&self) -> HashMap<&str, &Entity> {
        self.entities.iter().map(|e| (e.id.as_str(), e)).collect()
    }

    fn stage<E: Into<StageError>>(mention: &Mention, stage: Stage) -> impl FnOnce(E) -> LinkError + '_ {
        move |e| LinkError { mention_id: mention.id.clone(), stage, source: e.into() }
    }

    /// The mention as the enabled stages see it: description generated (or
    /// reused) when mention augmentation is on, dropped otherwise.
    pub fn augmented_mention(&self, mention: &Mention) -> Result<Mention, LinkError> {
        let mut m = mention.clone();
        if !self.toggles.mention_aug {
            m.description = None;
        } else if m.description.is_none() || !self.toggles.visual {
            // Without visual input a stored description may have used the
            // image, so it is regenerated text-only.
            let d = augment::mention_description(
                mention,
                self.gateways.llm.as_ref(),
                self.gateways.mllm.as_ref(),
                &self.augment_options,
                Some(&self.cache),
            )
            .map_err(Self::stage(mention, Stage::Augment))?;
            m.description = Some(d);
        }
        Ok(m)
    }

    /// Full ranking for one mention before selection: embedding rerank over
    /// the coarse set (or the whole KB), or the fuzzy order when retrieval is
    /// disabled.
    pub fn rank(&self, mention: &Mention) -> Result<(Mention, CandidateSet), LinkError> {
        let coarse = seed_candidates(
            &mention.name,
            &mention.provided_candidates(),
            &self.entities,
            self.config.coarse_n,
        )
        .map_err(Self::stage(mention, Stage::Coarse))?;
        let m = self.augmented_mention(mention)?;
        if !self.toggles.retrieval {
            let entries = coarse
                .into_iter()
                .map(|f| ScoredCandidate { entity_id: f.entity_id, score: f.score as f64 / 100.0 })
                .collect();
            let set = CandidateSet { mention_id: m.id.clone(), entries, k: self.config.coarse_n };
            return Ok((m, set));
        }
        let index = self.index.as_ref().ok_or_else(|| LinkError {
            mention_id: mention.id.clone(),
            stage: Stage::Retrieval,
            source: RetrievalError::EmptyIndex.into(),
        })?;
        let text = mention_repr(&m, self.toggles.mention_aug).map_err(Self::stage(mention, Stage::Retrieval))?;
        let query = self
            .gateways
            .embedder
            .embed(std::slice::from_ref(&text))
            .map_err(Self::stage(mention, Stage::Retrieval))?
            .pop()
            .expect("one embedding per input");
        let restrict: Option<Vec<String>> = match self.config.restrict {
            Restrict::Coarse => Some(coarse.into_iter().map(|f| f.entity_id).collect()),
            Restrict::Full => None,
        };
        let set = retrieve_topk(&m.id, query.values(), index, self.config.coarse_n, restrict.as_deref())
            .map_err(Self::stage(mention, Stage::Retrieval))?;
        Ok((m, set))
    }

    /// The top-`k` prefix handed to selection.
    pub fn candidates(&self, mention: &Mention) -> Result<(Mention, CandidateSet), LinkError> {
        let (m, mut set) = self.rank(mention)?;
        set.entries.truncate(self.config.k);
        set.k = self.config.k;
        Ok((m, set))
    }

    pub fn link(&self, mention: &Mention) -> Result<LinkResult, LinkError> {
        let (m, ranked) = self.rank(mention)?;
        let mut ranking = ranked.entries;
        if ranking.is_empty() {
            return Err(LinkError {
                mention_id: mention.id.clone(),
                stage: Stage::Coarse,
                source: SelectionError::EmptyCandidates.into(),
            });
        }
        let mut selection = None;
        if self.toggles.selection {
            let k = self.config.k.min(ranking.len());
            let shortlist = CandidateSet { mention_id: m.id.clone(), entries: ranking[..k].to_vec(), k };
            let rows = table_rows(&shortlist, &self.entity_map(), self.toggles.entity_text())
                .map_err(Self::stage(mention, Stage::Selection))?;
            let prompt = render_selection_prompt(&m, &rows).map_err(Self::stage(mention, Stage::Selection))?;
            let reply = self
                .gateways
                .llm
                .chat(&ChatRequest::new(prompt))
                .map_err(Self::stage(mention, Stage::Selection))?;
            let result = parse_selection(&reply, &m.id, &rows).map_err(Self::stage(mention, Stage::Selection))?;
            // The chosen entity moves to the front; the rest keep rerank order.
            let chosen = ranking.remove(result.chosen_index);
            let top = ranking.first().map_or(chosen.score, |c| c.score.max(chosen.score));
            ranking.insert(0, ScoredCandidate { entity_id: chosen.entity_id, score: top + 1.0 });
            selection = Some(result);
        }
        Ok(LinkResult {
            mention_id: mention.id.clone(),
            predicted: ranking[0].entity_id.clone(),
            ranking,
            selection,
        })
    }

    /// Fine-tune triplets for mentions whose gold entity lands in the
    /// top-`k` candidates. Returns the records and how many mentions were
    /// skipped.
    pub fn export_finetune(
        &self,
        mentions: &[&Mention],
        sample: Option<usize>,
    ) -> Result<(Vec<FinetuneRecord>, usize), LinkError> {
        let picked = sample_indices(mentions.len(), sample.unwrap_or(usize::MAX), self.config.seed);
        let entity_map = self.entity_map();
        let results = crate::pool::parallel_map(&picked, self.jobs(), |_, &i| {
            let mention = mentions[i];
            let Some(gold) = mention.gold_entity_id.as_deref() else {
                return Ok(None);
            };
            let (m, set) = self.candidates(mention)?;
            let rows = table_rows(&set, &entity_map, self.toggles.entity_text())
                .map_err(Self::stage(mention, Stage::Selection))?;
            Ok(finetune_record(&m, &rows, gold))
        });
        let mut records = Vec::new();
        let mut skipped = 0;
        for r in results {
            match r? {
                Some(rec) => records.push(rec),
                None => skipped += 1,
            }
        }
        Ok((records, skipped))
    }
}
