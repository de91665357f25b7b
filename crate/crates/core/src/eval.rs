//! Top-k accuracy and evaluation reports.
//!
//! A mention's rank is the number of candidates scored strictly above its
//! gold entity, so ties go in the gold's favour. It counts as correct at `k`
//! when that rank is below `k`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::Mention;
use crate::pipeline::{LinkResult, Pipeline};
use crate::pool::parallel_map;
use crate::retrieval::ScoredCandidate;
use crate::selection::Fallback;

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("gold entity not among the candidates")]
    NotInCandidates,
    #[error("result {index} is for mention {result:?} but gold is for {gold:?}")]
    MisalignedIds { index: usize, result: String, gold: String },
    #[error("{results} results for {golds} gold labels")]
    LengthMismatch { results: usize, golds: usize },
    #[error("no mentions to evaluate")]
    EmptySplit,
    #[error("k must be at least 1")]
    InvalidK,
}

pub fn gold_rank(ranking: &[ScoredCandidate], gold_id: &str) -> Result<usize, EvalError> {
    let gold = ranking
        .iter()
        .find(|c| c.entity_id == gold_id)
        .ok_or(EvalError::NotInCandidates)?;
    Ok(ranking.iter().filter(|c| c.score > gold.score).count())
}

/// A gold label: (mention id, gold entity id).
pub type Gold<'a> = (&'a str, &'a str);

pub fn topk_accuracy(results: &[LinkResult], golds: &[Gold<'_>], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if results.len() != golds.len() {
        return Err(EvalError::LengthMismatch { results: results.len(), golds: golds.len() });
    }
    if results.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut hits = 0usize;
    for (i, (r, (mid, gold))) in results.iter().zip(golds).enumerate() {
        if r.mention_id != *mid {
            return Err(EvalError::MisalignedIds { index: i, result: r.mention_id.clone(), gold: mid.to_string() });
        }
        if matches!(gold_rank(&r.ranking, gold), Ok(rank) if rank < k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionOutcome {
    pub mention_id: String,
    pub gold: String,
    pub predicted: Option<String>,
    /// `None` when the gold was not ranked or linking failed.
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_tag: String,
    pub ablation: String,
    pub config_fingerprint: String,
    pub n_mentions: usize,
    pub topk: BTreeMap<usize, f64>,
    pub fallback_rates: BTreeMap<String, f64>,
    /// Mentions excluded before linking, by reason.
    pub skipped: BTreeMap<String, usize>,
    pub not_in_candidates: usize,
    pub failures: usize,
    pub mentions: Vec<MentionOutcome>,
}

fn fallback_name(f: Fallback) -> &'static str {
    match f {
        Fallback::None => "none",
        Fallback::NameMatch => "name_match",
        Fallback::Top1 => "top1",
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table: one header row and one row of accuracies in [0, 1].
    pub fn to_table(&self) -> String {
        let label = format!("{} [{}]", self.dataset_tag, self.ablation);
        let width = label.len().max(10);
        let mut s = format!("{:<width$}", "Method");
        for k in self.topk.keys() {
            let _ = write!(s, " {:>7}", format!("Top-{k}"));
        }
        s.push('\n');
        let _ = write!(s, "{label:<width$}");
        for v in self.topk.values() {
            let _ = write!(s, " {v:>7.3}");
        }
        s.push('\n');
        let _ = writeln!(
            s,
            "mentions={} not_in_candidates={} failures={} skipped={} fingerprint={}",
            self.n_mentions,
            self.not_in_candidates,
            self.failures,
            self.skipped.values().sum::<usize>(),
            self.config_fingerprint
        );
        s
    }
}

/// Links every mention and aggregates Top-k accuracy. Mentions without a
/// resolvable gold id are excluded and counted; a mention whose linking
/// fails counts as incorrect.
pub fn evaluate(
    pipeline: &Pipeline,
    mentions: &[&Mention],
    ks: &[usize],
    dataset_tag: &str,
) -> Result<EvalReport, EvalError> {
    if ks.contains(&0) {
        return Err(EvalError::InvalidK);
    }
    let known: HashSet<&str> = pipeline.entities().iter().map(|e| e.id.as_str()).collect();
    let mut skipped = BTreeMap::new();
    let mut todo: Vec<(&Mention, &str)> = Vec::new();
    for m in mentions {
        match m.gold_entity_id.as_deref() {
            None => *skipped.entry("missing_gold".to_string()).or_insert(0) += 1,
            Some(g) if !known.contains(g) => *skipped.entry("unresolvable_gold".to_string()).or_insert(0) += 1,
            Some(g) => todo.push((m, g)),
        }
    }
    if todo.is_empty() {
        return Err(EvalError::EmptySplit);
    }

    let linked = parallel_map(&todo, pipeline.jobs(), |_, (m, _)| pipeline.link(m));

    let mut outcomes = Vec::with_capacity(todo.len());
    let mut fallbacks: BTreeMap<String, usize> = BTreeMap::new();
    let (mut selections, mut failures, mut missing) = (0usize, 0usize, 0usize);
    for ((m, gold), res) in todo.iter().zip(linked) {
        let outcome = match res {
            Ok(r) => {
                if let Some(sel) = &r.selection {
                    selections += 1;
                    *fallbacks.entry(fallback_name(sel.fallback_used).to_string()).or_insert(0) += 1;
                }
                let rank = gold_rank(&r.ranking, gold).ok();
                if rank.is_none() {
                    missing += 1;
                }
                MentionOutcome { mention_id: m.id.clone(), gold: gold.to_string(), predicted: Some(r.predicted), rank, error: None }
            }
            Err(e) => {
                log::warn!("{e}");
                failures += 1;
                MentionOutcome {
                    mention_id: m.id.clone(),
                    gold: gold.to_string(),
                    predicted: None,
                    rank: None,
                    error: Some(e.to_string()),
                }
            }
        };
        outcomes.push(outcome);
    }

    let n = outcomes.len();
    let topk = ks
        .iter()
        .map(|&k| {
            let hits = outcomes.iter().filter(|o| o.rank.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    let fallback_rates = if selections == 0 {
        BTreeMap::new()
    } else {
        [Fallback::None, Fallback::NameMatch, Fallback::Top1]
            .into_iter()
            .map(|f| {
                let name = fallback_name(f);
                (name.to_string(), *fallbacks.get(name).unwrap_or(&0) as f64 / selections as f64)
            })
            .collect()
    };
    let config = pipeline.config();
    Ok(EvalReport {
        dataset_tag: dataset_tag.to_string(),
        ablation: config.ablation.to_string(),
        config_fingerprint: config.fingerprint(),
        n_mentions: n,
        topk,
        fallback_rates,
        skipped,
        not_in_candidates: missing,
        failures,
        mentions: outcomes,
    })
}
