//! Aggregations over risk reports: agreement with global word statistics,
//! per-word barrier rates, annotation breakdowns and cross-run agreement.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{detect_barriers, RiskReport};
use crate::metrics::{overlap_at_k, Ranking};
use crate::text::{Sentence, TokenId};

use super::stats::GlobalWordStat;

pub const DEFAULT_MIN_CONTEXTS: usize = 10;
pub const AGNOSTIC_THRESHOLD: f64 = 0.4;
pub const SENSITIVE_THRESHOLD: f64 = 0.05;

/// Expected overlap@k between a fixed ranking and a uniformly random one
/// over `n` positions.
pub fn random_overlap_baseline(n: usize, k: usize) -> f64 {
    let a = k.min(n) as f64;
    a * a / (n as f64 * k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalOverlap {
    pub k: usize,
    pub overlap: f64,
    pub random_baseline: f64,
}

fn check_pairing(reports: &[RiskReport], sources: &[Sentence]) -> Result<()> {
    if reports.len() != sources.len() {
        return Err(Error::LengthMismatch {
            what: "reports".into(),
            got: reports.len(),
            expected: sources.len(),
        });
    }
    for (r, s) in reports.iter().zip(sources) {
        if r.len() != s.len() {
            return Err(Error::LengthMismatch {
                what: format!("report for example {}", r.example_id),
                got: r.len(),
                expected: s.len(),
            });
        }
    }
    Ok(())
}

/// Mean overlap@k between each report's ranking and the ranking induced by
/// annotating every position with the global statistic of its word.
pub fn overlap_vs_global(
    reports: &[RiskReport],
    sources: &[Sentence],
    stat: &GlobalWordStat,
    k: usize,
) -> Result<GlobalOverlap> {
    check_pairing(reports, sources)?;
    if reports.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut overlap = 0.0;
    let mut baseline = 0.0;
    for (r, s) in reports.iter().zip(sources) {
        let values: Vec<Option<f64>> = s.ids().iter().map(|&t| Some(stat.get(t))).collect();
        overlap += overlap_at_k(&r.ranking, &Ranking::from_scores(&values), k)?;
        baseline += random_overlap_baseline(s.len(), k);
    }
    let n = reports.len() as f64;
    Ok(GlobalOverlap {
        k,
        overlap: overlap / n,
        random_baseline: baseline / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierLabel {
    ContextAgnostic,
    ContextSensitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierRate {
    pub token: TokenId,
    pub contexts: usize,
    pub detected: usize,
    pub rate: f64,
    pub label: Option<BarrierLabel>,
}

/// Share of each word's appearances in which it was among the top-`k`
/// barriers, for words seen in more than `min_contexts` positions.
pub fn barrier_rate(
    reports: &[RiskReport],
    sources: &[Sentence],
    k: usize,
    min_contexts: usize,
) -> Result<Vec<BarrierRate>> {
    check_pairing(reports, sources)?;
    let mut tally: BTreeMap<TokenId, (usize, usize)> = BTreeMap::new();
    for (r, s) in reports.iter().zip(sources) {
        let detected: BTreeSet<usize> = detect_barriers(r, k).into_iter().collect();
        for (pos, &t) in s.ids().iter().enumerate() {
            let entry = tally.entry(t).or_default();
            entry.0 += 1;
            if detected.contains(&pos) {
                entry.1 += 1;
            }
        }
    }
    Ok(tally
        .into_iter()
        .filter(|&(_, (contexts, _))| contexts > min_contexts)
        .map(|(token, (contexts, detected))| {
            let rate = detected as f64 / contexts as f64;
            let label = if rate >= AGNOSTIC_THRESHOLD {
                Some(BarrierLabel::ContextAgnostic)
            } else if rate <= SENSITIVE_THRESHOLD {
                Some(BarrierLabel::ContextSensitive)
            } else {
                None
            };
            BarrierRate {
                token,
                contexts,
                detected,
                rate,
                label,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub tag: String,
    /// Fraction of detected barriers carrying the tag.
    pub barrier: f64,
    /// Fraction of all tokens carrying the tag.
    pub base: f64,
}

fn check_annotation_lengths<T>(reports: &[RiskReport], annotations: &[Vec<T>], what: &str) -> Result<()> {
    if reports.len() != annotations.len() {
        return Err(Error::LengthMismatch {
            what: format!("{what} lines"),
            got: annotations.len(),
            expected: reports.len(),
        });
    }
    for (r, a) in reports.iter().zip(annotations) {
        if r.len() != a.len() {
            return Err(Error::LengthMismatch {
                what: format!("{what} for example {}", r.example_id),
                got: a.len(),
                expected: r.len(),
            });
        }
    }
    Ok(())
}

/// Tag distribution of the top-`k` barriers next to the tag distribution of
/// the whole corpus, sorted by tag. The barrier column is all zero when
/// nothing was detected.
pub fn pos_distribution(reports: &[RiskReport], tags: &[Vec<String>], k: usize) -> Result<Vec<CategoryRow>> {
    check_annotation_lengths(reports, tags, "POS tags")?;
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let (mut detected_total, mut total) = (0usize, 0usize);
    for (r, sentence_tags) in reports.iter().zip(tags) {
        for tag in sentence_tags {
            counts.entry(tag).or_default().1 += 1;
            total += 1;
        }
        for pos in detect_barriers(r, k) {
            counts.entry(&sentence_tags[pos]).or_default().0 += 1;
            detected_total += 1;
        }
    }
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(counts
        .into_iter()
        .map(|(tag, (barrier, base))| CategoryRow {
            tag: tag.to_string(),
            barrier: frac(barrier, detected_total),
            base: frac(base, total),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepRecall {
    pub k: usize,
    pub d: u32,
    /// Fraction of top-`k` barriers within distance `d` of a leaf.
    pub recall: f64,
    /// Fraction of all tokens within distance `d` of a leaf.
    pub base: f64,
}

pub fn dep_recall(reports: &[RiskReport], depths: &[Vec<u32>], k: usize, d: u32) -> Result<DepRecall> {
    check_annotation_lengths(reports, depths, "dependency depths")?;
    let (mut hit, mut detected, mut covered, mut total) = (0usize, 0usize, 0usize, 0usize);
    for (r, sentence_depths) in reports.iter().zip(depths) {
        covered += sentence_depths.iter().filter(|&&v| v <= d).count();
        total += sentence_depths.len();
        for pos in detect_barriers(r, k) {
            detected += 1;
            if sentence_depths[pos] <= d {
                hit += 1;
            }
        }
    }
    let frac = |n: usize, m: usize| if m == 0 { 0.0 } else { n as f64 / m as f64 };
    Ok(DepRecall {
        k,
        d,
        recall: frac(hit, detected),
        base: frac(covered, total),
    })
}

/// Mean overlap@k between two runs over the same sentences, matched by
/// example id.
pub fn cross_run_overlap(a: &[RiskReport], b: &[RiskReport], k: usize) -> Result<f64> {
    let index: BTreeMap<usize, &RiskReport> = b.iter().map(|r| (r.example_id, r)).collect();
    let ids_a: BTreeSet<usize> = a.iter().map(|r| r.example_id).collect();
    if ids_a.len() != a.len() || index.len() != b.len() || !ids_a.iter().eq(index.keys()) {
        return Err(Error::InvalidInput(
            "report sets do not cover the same sentences".into(),
        ));
    }
    if a.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for r in a {
        total += overlap_at_k(&r.ranking, &index[&r.example_id].ranking, k)?;
    }
    Ok(total / a.len() as f64)
}
