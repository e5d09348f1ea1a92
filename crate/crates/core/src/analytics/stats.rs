//! Global per-word statistics that flag "troublesome" words independently of
//! their context.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TranslationModel;
use crate::text::{ParallelExample, Sentence, TokenId};

use super::align::{AlignmentSet, LexTable};

pub const DEFAULT_P0: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    InvFrequency,
    Entropy,
    Exception,
}

impl StatKind {
    pub fn name(self) -> &'static str {
        match self {
            StatKind::InvFrequency => "inv_frequency",
            StatKind::Entropy => "entropy",
            StatKind::Exception => "exception",
        }
    }
}

/// A value per source word, with a fallback for words the statistic never
/// saw (`+inf` for inverse frequency, so unseen words rank first).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalWordStat {
    pub kind: StatKind,
    pub values: BTreeMap<TokenId, f64>,
    pub unseen: f64,
}

impl GlobalWordStat {
    pub fn get(&self, id: TokenId) -> f64 {
        self.values.get(&id).copied().unwrap_or(self.unseen)
    }
}

/// Natural-log entropy of `φ(·|v)` for every source word in the table.
pub fn translation_entropy(lex: &LexTable) -> GlobalWordStat {
    let values = lex
        .sources()
        .map(|v| {
            let h = lex
                .distribution(v)
                .into_iter()
                .flat_map(|row| row.values())
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>();
            (v, h.max(0.0))
        })
        .collect();
    GlobalWordStat {
        kind: StatKind::Entropy,
        values,
        unseen: 0.0,
    }
}

/// `1 / count(v)` over the training sources.
pub fn inverse_frequency(sources: &[Sentence]) -> Result<GlobalWordStat> {
    if sources.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for s in sources {
        for &t in s.ids() {
            *counts.entry(t).or_default() += 1;
        }
    }
    Ok(GlobalWordStat {
        kind: StatKind::InvFrequency,
        values: counts.into_iter().map(|(t, c)| (t, 1.0 / c as f64)).collect(),
        unseen: f64::INFINITY,
    })
}

/// Fraction of each source word's alignment links whose target word gets a
/// model probability below `p0` given the reference prefix. Words without
/// links score 0.
pub fn exception_rate<M: TranslationModel + ?Sized>(
    model: &M,
    examples: &[ParallelExample],
    alignments: &AlignmentSet,
    p0: f64,
) -> Result<GlobalWordStat> {
    if alignments.len() != examples.len() {
        return Err(Error::LengthMismatch {
            what: "alignment lines".into(),
            got: alignments.len(),
            expected: examples.len(),
        });
    }
    let per_example: Vec<Vec<(TokenId, bool)>> = examples
        .par_iter()
        .zip(alignments)
        .map(|(ex, links)| {
            let x = &ex.source;
            let y = ex.reference().ids();
            links
                .iter()
                .map(|&(i, j)| {
                    let src = x.get(i).ok_or(Error::PositionOutOfRange { pos: i, len: x.len() })?;
                    let tgt = *y.get(j).ok_or(Error::PositionOutOfRange { pos: j, len: y.len() })?;
                    let p = model.token_prob(x, &y[..j], tgt)?;
                    Ok((src, p < p0))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut tally: BTreeMap<TokenId, (usize, usize)> = BTreeMap::new();
    for (src, exception) in per_example.into_iter().flatten() {
        let entry = tally.entry(src).or_default();
        entry.1 += 1;
        if exception {
            entry.0 += 1;
        }
    }
    Ok(GlobalWordStat {
        kind: StatKind::Exception,
        values: tally
            .into_iter()
            .map(|(t, (m, n))| (t, m as f64 / n as f64))
            .collect(),
        unseen: 0.0,
    })
}
