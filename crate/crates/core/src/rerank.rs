//! Candidate sets for re-ranking: the model's own n-best list versus
//! translations of sources whose detected barriers were randomly edited,
//! compared by oracle BLEU, reference unigram coverage and diversity.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{detect_barriers, position_seed, RiskReport};
use crate::metrics::sentence_bleu;
use crate::model::{decode_cached, DecodeCache, TranslationModel};
use crate::text::{apply_edit, Edit, ParallelExample, Sentence, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Topk,
    BarrierEdit,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Topk => "topk",
            Provenance::BarrierEdit => "barrier_edit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub source: Sentence,
    pub candidates: Vec<Sentence>,
    pub provenance: Provenance,
    /// Edited positions were drawn at random because the report had no
    /// scored position.
    pub random_positions: bool,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// The model's `n` best translations of `x`.
pub fn candidates_topk<M: TranslationModel + ?Sized>(model: &M, x: &Sentence, n: usize) -> Result<CandidateSet> {
    if n == 0 {
        return Err(Error::InvalidInput("candidate set size must be at least 1".into()));
    }
    let candidates = model.n_best(x, n)?;
    if candidates.len() != n {
        return Err(Error::Model(format!(
            "n-best list has {} hypotheses, {n} requested",
            candidates.len()
        )));
    }
    Ok(CandidateSet {
        source: x.clone(),
        candidates,
        provenance: Provenance::Topk,
        random_positions: false,
    })
}

/// Decodes `n` copies of `x`, each with one top-`k` barrier position
/// (round-robin, most risky first) replaced by a uniformly drawn regular
/// token.
pub fn candidates_barrier_edit<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    x: &Sentence,
    report: &RiskReport,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<CandidateSet> {
    if n == 0 || k == 0 {
        return Err(Error::InvalidInput("n and k must be at least 1".into()));
    }
    if report.len() != x.len() {
        return Err(Error::LengthMismatch {
            what: format!("report for example {}", report.example_id),
            got: report.len(),
            expected: x.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(position_seed(seed, report.example_id, 0, 0));
    let positions = detect_barriers(report, k);
    let random_positions = positions.is_empty();
    if random_positions {
        log::warn!(
            "example {} has no scored position; editing random positions",
            report.example_id
        );
    }
    let regular: Vec<TokenId> = model.vocab().regular_ids().collect();
    let candidates = (0..n)
        .map(|c| {
            let pos = if random_positions {
                rng.random_range(0..x.len())
            } else {
                positions[c % positions.len()]
            };
            let current = x.ids()[pos];
            let choices: Vec<TokenId> = regular.iter().copied().filter(|&t| t != current).collect();
            let token = *choices
                .choose(&mut rng)
                .ok_or_else(|| Error::InvalidInput("vocabulary has no substitute".into()))?;
            decode_cached(model, cache, &apply_edit(x, &Edit::substitute(pos, token))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateSet {
        source: x.clone(),
        candidates,
        provenance: Provenance::BarrierEdit,
        random_positions,
    })
}

/// Best sentence BLEU of any candidate.
pub fn oracle(c: &CandidateSet, reference: &Sentence) -> Result<f64> {
    if c.is_empty() {
        return Err(Error::InvalidInput("empty candidate set".into()));
    }
    c.candidates
        .iter()
        .map(|h| Ok(sentence_bleu(h.ids(), reference.ids())?.value))
        .try_fold(f64::NEG_INFINITY, |best, v: Result<f64>| Ok(best.max(v?)))
}

/// Share of the reference's distinct unigrams produced by any candidate.
pub fn coverage(c: &CandidateSet, reference: &Sentence) -> f64 {
    let produced: HashSet<TokenId> = c.candidates.iter().flat_map(|h| h.ids().iter().copied()).collect();
    let wanted: HashSet<TokenId> = reference.ids().iter().copied().collect();
    wanted.intersection(&produced).count() as f64 / wanted.len() as f64
}

/// Mean BLEU over ordered pairs of distinct candidates; lower means more
/// diverse.
pub fn diversity(c: &CandidateSet) -> Result<f64> {
    let n = c.len();
    if n < 2 {
        return Err(Error::InvalidInput("diversity needs at least two candidates".into()));
    }
    let mut total = 0.0;
    for (i, a) in c.candidates.iter().enumerate() {
        for (j, b) in c.candidates.iter().enumerate() {
            if i != j {
                total += sentence_bleu(a.ids(), b.ids())?.value;
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRow {
    pub provenance: Provenance,
    pub oracle: f64,
    pub coverage: f64,
    /// Absent when candidate sets have a single member.
    pub diversity: Option<f64>,
    /// Differences to the top-k row; only set on the barrier row.
    pub delta_oracle: Option<f64>,
    pub delta_coverage: Option<f64>,
    pub delta_diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankTable {
    pub n: usize,
    pub k: usize,
    pub topk: RerankRow,
    pub barrier: RerankRow,
    /// Sentences whose barrier set fell back to random positions.
    pub random_fallbacks: usize,
}

struct SetScores {
    oracle: f64,
    coverage: f64,
    diversity: Option<f64>,
}

fn score_set(c: &CandidateSet, reference: &Sentence) -> Result<SetScores> {
    Ok(SetScores {
        oracle: oracle(c, reference)?,
        coverage: coverage(c, reference),
        diversity: if c.len() >= 2 { Some(diversity(c)?) } else { None },
    })
}

fn mean_row(provenance: Provenance, scores: &[SetScores]) -> RerankRow {
    let n = scores.len() as f64;
    RerankRow {
        provenance,
        oracle: scores.iter().map(|s| s.oracle).sum::<f64>() / n,
        coverage: scores.iter().map(|s| s.coverage).sum::<f64>() / n,
        diversity: scores
            .iter()
            .map(|s| s.diversity)
            .sum::<Option<f64>>()
            .map(|d| d / n),
        delta_oracle: None,
        delta_coverage: None,
        delta_diversity: None,
    }
}

/// Corpus means of oracle, coverage and diversity for equal-size top-k and
/// barrier-edit candidate sets, with the barrier row's deltas.
pub fn rerank_report<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    examples: &[ParallelExample],
    reports: &[RiskReport],
    n: usize,
    k: usize,
    seed: u64,
) -> Result<RerankTable> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if reports.len() != examples.len() {
        return Err(Error::LengthMismatch {
            what: "reports".into(),
            got: reports.len(),
            expected: examples.len(),
        });
    }
    let per_example: Vec<(SetScores, SetScores, bool)> = examples
        .par_iter()
        .zip(reports)
        .map(|(ex, report)| {
            if report.example_id != ex.id {
                return Err(Error::InvalidInput(format!(
                    "report {} paired with example {}",
                    report.example_id, ex.id
                )));
            }
            let topk = candidates_topk(model, &ex.source, n)?;
            let edited = candidates_barrier_edit(model, cache, &ex.source, report, n, k, seed)?;
            if topk.len() != edited.len() {
                return Err(Error::LengthMismatch {
                    what: "candidate sets".into(),
                    got: edited.len(),
                    expected: topk.len(),
                });
            }
            Ok((
                score_set(&topk, ex.reference())?,
                score_set(&edited, ex.reference())?,
                edited.random_positions,
            ))
        })
        .collect::<Result<_>>()?;
    let (topk_scores, rest): (Vec<SetScores>, Vec<(SetScores, bool)>) =
        per_example.into_iter().map(|(a, b, f)| (a, (b, f))).unzip();
    let random_fallbacks = rest.iter().filter(|(_, f)| *f).count();
    let barrier_scores: Vec<SetScores> = rest.into_iter().map(|(s, _)| s).collect();
    let topk = mean_row(Provenance::Topk, &topk_scores);
    let mut barrier = mean_row(Provenance::BarrierEdit, &barrier_scores);
    barrier.delta_oracle = Some(barrier.oracle - topk.oracle);
    barrier.delta_coverage = Some(barrier.coverage - topk.coverage);
    barrier.delta_diversity = barrier.diversity.zip(topk.diversity).map(|(b, t)| b - t);
    Ok(RerankTable {
        n,
        k,
        topk,
        barrier,
        random_fallbacks,
    })
}
