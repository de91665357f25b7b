//! Coarse candidate generation by fuzzy name matching.
//!
//! The similarity is the simple indel ratio: insertion/deletion edit distance
//! normalized by the combined length, reported as an integer percentage.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::Entity;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FuzzyError {
    #[error("unknown entity id {0:?}")]
    UnknownEntityId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzyScore {
    pub entity_id: String,
    pub score: u8,
}

/// Simple case fold of one scalar value: the lowercase mapping when it is a
/// single character, the character itself otherwise.
pub fn fold_char(c: char) -> char {
    if c == 'ς' {
        return 'σ';
    }
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

pub fn fold(s: &str) -> Vec<char> {
    s.chars().map(fold_char).collect()
}

/// Length of the longest common subsequence, computed with the bit-parallel
/// recurrence `S' = (S + (S & M)) | (S & !M)` over 64-bit words.
pub fn lcs_len(a: &[char], b: &[char]) -> usize {
    let (a, b) = if a.len() <= b.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return 0;
    }
    // `b` (the shorter) is the bit pattern; `a` is scanned.
    let words = b.len().div_ceil(64);
    let mut masks: HashMap<char, Vec<u64>> = HashMap::new();
    for (i, &c) in b.iter().enumerate() {
        masks.entry(c).or_insert_with(|| vec![0; words])[i / 64] |= 1 << (i % 64);
    }
    let mut s = vec![u64::MAX; words];
    let zero = vec![0u64; words];
    for c in a {
        let m = masks.get(c).unwrap_or(&zero);
        let mut carry = 0u64;
        for w in 0..words {
            let u = s[w] & m[w];
            let (sum, c1) = s[w].overflowing_add(u);
            let (sum, c2) = sum.overflowing_add(carry);
            carry = (c1 || c2) as u64;
            s[w] = sum | (s[w] & !m[w]);
        }
    }
    let tail = b.len() % 64;
    s.iter()
        .enumerate()
        .map(|(w, &word)| {
            let valid = if w == words - 1 && tail != 0 {
                (1u64 << tail) - 1
            } else {
                u64::MAX
            };
            (!word & valid).count_ones() as usize
        })
        .sum()
}

/// Insertion/deletion-only edit distance between two folded strings.
pub fn indel_distance(a: &[char], b: &[char]) -> usize {
    a.len() + b.len() - 2 * lcs_len(a, b)
}

fn ratio_of(a: &[char], b: &[char]) -> u8 {
    let total = a.len() + b.len();
    if total == 0 {
        return 100;
    }
    if a == b {
        return 100;
    }
    let lcs = lcs_len(a, b);
    // round(100 * 2 * lcs / total), half away from zero, in integers.
    let scaled = (400 * lcs + total) / (2 * total);
    // Long near-identical pairs would otherwise round up to 100, which is
    // reserved for identical strings.
    scaled.min(99) as u8
}

/// Indel similarity ratio in `0..=100` after simple case folding.
pub fn indel_ratio(a: &str, b: &str) -> u8 {
    ratio_of(&fold(a), &fold(b))
}

fn by_score_then_id(x: &FuzzyScore, y: &FuzzyScore) -> Ordering {
    y.score.cmp(&x.score).then_with(|| x.entity_id.cmp(&y.entity_id))
}

/// Top-`n` entities by name similarity to `mention_name`, ties broken by
/// entity id ascending.
pub fn coarse_candidates(mention_name: &str, entities: &[Entity], n: usize) -> Vec<FuzzyScore> {
    coarse_excluding(mention_name, entities, n, &HashSet::new())
}

fn coarse_excluding(
    mention_name: &str,
    entities: &[Entity],
    n: usize,
    exclude: &HashSet<&str>,
) -> Vec<FuzzyScore> {
    let query = fold(mention_name);
    let mut scored: Vec<FuzzyScore> = entities
        .iter()
        .filter(|e| !exclude.contains(e.id.as_str()))
        .map(|e| FuzzyScore {
            entity_id: e.id.clone(),
            score: ratio_of(&query, &fold(&e.name)),
        })
        .collect();
    let n = n.min(scored.len());
    if n == 0 {
        return Vec::new();
    }
    if n < scored.len() {
        scored.select_nth_unstable_by(n - 1, by_score_then_id);
        scored.truncate(n);
    }
    scored.sort_by(by_score_then_id);
    scored
}

/// Dataset-provided candidates first (pinned at score 100, in the given
/// order), then fuzzy-ranked entities up to `n` in total.
pub fn seed_candidates(
    mention_name: &str,
    provided: &[String],
    entities: &[Entity],
    n: usize,
) -> Result<Vec<FuzzyScore>, FuzzyError> {
    let known: HashSet<&str> = entities.iter().map(|e| e.id.as_str()).collect();
    let mut pinned: Vec<FuzzyScore> = Vec::new();
    let mut taken: HashSet<&str> = HashSet::new();
    for id in provided {
        if !known.contains(id.as_str()) {
            return Err(FuzzyError::UnknownEntityId(id.clone()));
        }
        if taken.insert(id.as_str()) {
            pinned.push(FuzzyScore {
                entity_id: id.clone(),
                score: 100,
            });
        }
    }
    pinned.truncate(n);
    let fill = n - pinned.len();
    pinned.extend(coarse_excluding(mention_name, entities, fill, &taken));
    Ok(pinned)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook O(nm) indel DP: no substitutions.
    fn dp_indel(a: &[char], b: &[char]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut cur = vec![i; b.len() + 1];
            for j in 1..=b.len() {
                cur[j] = if a[i - 1] == b[j - 1] {
                    prev[j - 1]
                } else {
                    (prev[j] + 1).min(cur[j - 1] + 1)
                };
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn identity_and_empty() {
        assert_eq!(indel_ratio("abc", "abc"), 100);
        assert_eq!(indel_ratio("", "abc"), 0);
        assert_eq!(indel_ratio("abc", ""), 0);
        assert_eq!(indel_ratio("", ""), 100);
        assert_eq!(indel_ratio("APEC", "apec"), 100);
    }

    #[test]
    fn apec_vs_apec_summit() {
        // DP oracle: folded "apec" vs "apec summit" has D_indel = 7, total 15,
        // so 100 * (1 - 7/15) = 53.33 -> 53.
        let a = fold("APEC");
        let b = fold("APEC summit");
        assert_eq!(dp_indel(&a, &b), 7);
        assert_eq!(indel_ratio("APEC", "APEC summit"), 53);
    }

    #[test]
    fn half_rounds_away_from_zero() {
        assert_eq!(indel_ratio("ab", "a"), 67); // total 3, D=1 -> 66.7
        assert_eq!(indel_ratio("abcd", "abcde"), 89); // total 9, D=1 -> 88.9
        assert_eq!(indel_ratio("abc", "abcd x"), 67); // total 9, D=3 -> 66.7
        assert_eq!(indel_ratio("abcx", "abcy"), 75); // total 8, D=2 -> 75
        assert_eq!(indel_ratio("abc", "abcde"), 75); // total 8, D=2 -> 75
        assert_eq!(indel_ratio("abcdefg", "abcdefgh"), 93); // total 15, D=1 -> 93.3
        assert_eq!(indel_ratio("abc", "abcx"), 86); // total 7, D=1 -> 85.7
        assert_eq!(indel_ratio("a", "abc"), 50); // total 4, D=2 -> 50
        assert_eq!(indel_ratio("ab", "abcdef"), 50); // total 8, D=4 -> 50
        assert_eq!(indel_ratio("abc", "abcdefghijklm"), 38); // total 16, D=10 -> 37.5 -> 38
    }

    #[test]
    fn long_near_identical_is_not_100() {
        let a = "x".repeat(300);
        let b = format!("{a}y");
        assert_eq!(indel_ratio(&a, &b), 99);
    }

    #[test]
    fn bit_parallel_matches_dp_across_word_boundaries() {
        let a: Vec<char> = "the quick brown fox jumps over the lazy dog ".repeat(4).chars().collect();
        let b: Vec<char> = "a quick brown cat leaps over one lazy frog ".repeat(5).chars().collect();
        for (la, lb) in [(10, 70), (63, 64), (64, 65), (129, 130), (176, 215)] {
            let (x, y) = (&a[..la], &b[..lb]);
            assert_eq!(indel_distance(x, y), dp_indel(x, y), "lengths {la} {lb}");
        }
    }

    fn kb(names: &[(&str, &str)]) -> Vec<Entity> {
        names.iter().map(|(id, n)| Entity::new(*id, *n, "")).collect()
    }

    #[test]
    fn coarse_returns_all_when_n_exceeds_kb() {
        let es = kb(&[("Q3", "Sydney"), ("Q1", "APEC"), ("Q2", "APEC summit")]);
        let c = coarse_candidates("APEC", &es, 100);
        assert_eq!(c.len(), 3);
        assert_eq!(c[0], FuzzyScore { entity_id: "Q1".into(), score: 100 });
        assert_eq!(c[1].entity_id, "Q2");
    }

    #[test]
    fn coarse_ties_break_by_id() {
        let es = kb(&[("b", "xyz"), ("a", "xyz"), ("c", "xyz")]);
        let ids: Vec<_> = coarse_candidates("xyz", &es, 2).into_iter().map(|s| s.entity_id).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn seed_pins_provided_and_dedups() {
        let es = kb(&[("Q1", "APEC"), ("Q2", "APEC summit"), ("Q3", "Sydney"), ("Q4", "Spain")]);
        let out = seed_candidates("APEC", &["Q3".into(), "Q1".into()], &es, 3).unwrap();
        let ids: Vec<_> = out.iter().map(|s| s.entity_id.as_str()).collect();
        assert_eq!(ids, vec!["Q3", "Q1", "Q2"]);
        assert!(out[..2].iter().all(|s| s.score == 100));

        let none = seed_candidates("APEC", &[], &es, 100).unwrap();
        assert_eq!(none, coarse_candidates("APEC", &es, 100));

        assert_eq!(
            seed_candidates("APEC", &["Q9".into()], &es, 3),
            Err(FuzzyError::UnknownEntityId("Q9".into()))
        );
    }
}
