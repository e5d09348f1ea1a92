//! Smoothed sentence-level BLEU and the ranking statistics used to compare
//! risk estimators.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TokenId;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub value: f64,
    pub ngram_precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// BLEU-4 of `hyp` against a single reference.
///
/// Unigram precision is unsmoothed; higher orders add one to both the
/// clipped match count and the candidate count. An empty hypothesis scores 0.
pub fn sentence_bleu(hyp: &[TokenId], reference: &[TokenId]) -> Result<BleuScore> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("empty reference".into()));
    }
    let mut precisions = [0.0; MAX_ORDER];
    if hyp.is_empty() {
        return Ok(BleuScore {
            value: 0.0,
            ngram_precisions: precisions,
            brevity_penalty: (1.0 - reference.len() as f64).exp(),
        });
    }
    for (idx, p) in precisions.iter_mut().enumerate() {
        let n = idx + 1;
        let hyp_counts = ngram_counts(hyp, n);
        let ref_counts = ngram_counts(reference, n);
        let total = hyp.len().saturating_sub(n - 1);
        let matched: usize = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        *p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let brevity_penalty = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    let value = if precisions[0] == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        value,
        ngram_precisions: precisions,
        brevity_penalty,
    })
}

/// Total order over the positions of a sentence, most risky first.
///
/// Scored positions come first by descending score (ties by ascending
/// position), then unscored positions by ascending position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub positions: Vec<usize>,
    pub scores: Vec<Option<f64>>,
}

impl Ranking {
    pub fn from_scores(scores: &[Option<f64>]) -> Self {
        let mut positions: Vec<usize> = (0..scores.len()).collect();
        positions.sort_by(|&a, &b| match (scores[a], scores[b]) {
            (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.cmp(&b),
        });
        let scores = positions.iter().map(|&p| scores[p]).collect();
        Self { positions, scores }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn non_null(&self) -> usize {
        self.scores.iter().filter(|s| s.is_some()).count()
    }

    /// 1-based rank of every position, indexed by position.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.positions.len()];
        for (r, &p) in self.positions.iter().enumerate() {
            ranks[p] = r + 1;
        }
        ranks
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.positions[..k.min(self.positions.len())]
    }

    /// Top-`k` positions restricted to scored ones.
    pub fn top_scored(&self, k: usize) -> &[usize] {
        &self.positions[..k.min(self.non_null())]
    }
}

/// Fraction of the top-`k` positions the two rankings share. Always divides
/// by `k`, so sentences shorter than `k` cannot reach 1.
pub fn overlap_at_k(a: &Ranking, b: &Ranking, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "ranking".into(),
            got: b.len(),
            expected: a.len(),
        });
    }
    let mut in_a = vec![false; a.len()];
    for &p in a.top(k) {
        in_a[p] = true;
    }
    let shared = b.top(k).iter().filter(|&&p| in_a[p]).count();
    Ok(shared as f64 / k as f64)
}

/// Kendall's coefficient of concordance over `m ≥ 2` total rankings of the
/// same `n ≥ 2` items.
pub fn kendall_w(rankings: &[Ranking]) -> Result<f64> {
    if rankings.len() < 2 {
        return Err(Error::InvalidInput("need at least two rankings".into()));
    }
    let n = rankings[0].len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least two ranked items".into()));
    }
    let mut rank_sums = vec![0.0f64; n];
    for r in rankings {
        if r.len() != n {
            return Err(Error::LengthMismatch {
                what: "ranking".into(),
                got: r.len(),
                expected: n,
            });
        }
        for (sum, rank) in rank_sums.iter_mut().zip(r.ranks()) {
            *sum += rank as f64;
        }
    }
    let m = rankings.len() as f64;
    let nf = n as f64;
    let total: f64 = rank_sums.iter().sum();
    let squares: f64 = rank_sums.iter().map(|x| x * x).sum();
    let w = (squares - total * total / nf) / (m * m * (nf.powi(3) - nf) / 12.0);
    Ok(w.clamp(0.0, 1.0))
}
