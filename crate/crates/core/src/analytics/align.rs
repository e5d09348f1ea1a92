//! IBM Model 1 lexical translation table and word alignments.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::{Sentence, TokenId};

/// `(source position, target position)`.
pub type Link = (usize, usize);

/// Links for each sentence pair of a corpus.
pub type AlignmentSet = Vec<Vec<Link>>;

/// Sparse `φ(target | source)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LexTable {
    table: BTreeMap<TokenId, BTreeMap<TokenId, f64>>,
}

impl LexTable {
    pub fn prob(&self, src: TokenId, tgt: TokenId) -> f64 {
        self.table
            .get(&src)
            .and_then(|row| row.get(&tgt))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn distribution(&self, src: TokenId) -> Option<&BTreeMap<TokenId, f64>> {
        self.table.get(&src)
    }

    pub fn sources(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.table.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, TokenId, f64)> + '_ {
        self.table
            .iter()
            .flat_map(|(&s, row)| row.iter().map(move |(&t, &p)| (s, t, p)))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (TokenId, TokenId, f64)>) -> Self {
        let mut table: BTreeMap<TokenId, BTreeMap<TokenId, f64>> = BTreeMap::new();
        for (s, t, p) in entries {
            table.entry(s).or_default().insert(t, p);
        }
        Self { table }
    }
}

#[derive(Debug, Clone)]
pub struct Ibm1 {
    pub table: LexTable,
    /// Corpus log-likelihood under the initial table and after every
    /// iteration.
    pub log_likelihoods: Vec<f64>,
}

fn log_likelihood(pairs: &[(Sentence, Sentence)], prob: impl Fn(TokenId, TokenId) -> f64) -> f64 {
    pairs
        .iter()
        .map(|(src, tgt)| {
            let norm = src.len() as f64;
            tgt.ids()
                .iter()
                .map(|&f| (src.ids().iter().map(|&e| prob(e, f)).sum::<f64>() / norm).ln())
                .sum::<f64>()
        })
        .sum()
}

/// Expectation-maximization for IBM Model 1 without a NULL source word,
/// starting from a table that is uniform over the target vocabulary.
pub fn ibm1_em(pairs: &[(Sentence, Sentence)], iterations: usize) -> Result<Ibm1> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if iterations == 0 {
        return Err(Error::InvalidInput("at least one EM iteration is required".into()));
    }
    let mut targets: Vec<TokenId> = pairs.iter().flat_map(|(_, t)| t.ids().iter().copied()).collect();
    targets.sort_unstable();
    targets.dedup();
    let uniform = 1.0 / targets.len() as f64;

    let mut table = LexTable::default();
    for (src, tgt) in pairs {
        for &e in src.ids() {
            let row = table.table.entry(e).or_default();
            for &f in tgt.ids() {
                row.insert(f, uniform);
            }
        }
    }

    let mut log_likelihoods = vec![log_likelihood(pairs, |e, f| table.prob(e, f))];
    for _ in 0..iterations {
        let mut counts: BTreeMap<TokenId, BTreeMap<TokenId, f64>> = BTreeMap::new();
        for (src, tgt) in pairs {
            for &f in tgt.ids() {
                let z: f64 = src.ids().iter().map(|&e| table.prob(e, f)).sum();
                for &e in src.ids() {
                    *counts.entry(e).or_default().entry(f).or_insert(0.0) += table.prob(e, f) / z;
                }
            }
        }
        for (e, row) in counts.iter_mut() {
            let total: f64 = row.values().sum();
            for v in row.values_mut() {
                *v /= total;
            }
            table.table.insert(*e, std::mem::take(row));
        }
        log_likelihoods.push(log_likelihood(pairs, |e, f| table.prob(e, f)));
    }
    Ok(Ibm1 {
        table,
        log_likelihoods,
    })
}

/// Links every target position to its most probable source position (ties
/// to the leftmost). Target words no source word can produce stay unaligned.
pub fn viterbi_align(lex: &LexTable, src: &Sentence, tgt: &Sentence) -> Vec<Link> {
    let mut links = Vec::new();
    for (j, &f) in tgt.ids().iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, &e) in src.ids().iter().enumerate() {
            let p = lex.prob(e, f);
            if p > 0.0 && best.is_none_or(|(_, b)| p > b) {
                best = Some((i, p));
            }
        }
        if let Some((i, _)) = best {
            links.push((i, j));
        }
    }
    links
}

/// Renders links as space-separated `i-j` pairs.
pub fn format_pharaoh(links: &[Link]) -> String {
    links
        .iter()
        .map(|(i, j)| format!("{i}-{j}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_pharaoh(line: &str) -> Result<Vec<Link>> {
    line.split_whitespace()
        .map(|item| {
            let (i, j) = item
                .split_once('-')
                .ok_or_else(|| Error::Format(format!("bad alignment link {item:?}")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad alignment link {item:?}")))
            };
            Ok((parse(i)?, parse(j)?))
        })
        .collect()
}

/// Reads a Pharaoh alignment file; unlike corpus files, blank lines are
/// allowed and mean "no links".
pub fn read_alignments(path: &Path) -> Result<AlignmentSet> {
    std::fs::read_to_string(path)?
        .lines()
        .map(parse_pharaoh)
        .collect()
}

pub fn write_alignments(path: &Path, set: &AlignmentSet) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for links in set {
        writeln!(out, "{}", format_pharaoh(links))?;
    }
    out.flush()?;
    Ok(())
}

/// Verifies an alignment set against the corpus it describes.
pub fn check_alignments(set: &AlignmentSet, pairs: &[(Sentence, Sentence)]) -> Result<()> {
    if set.len() != pairs.len() {
        return Err(Error::LengthMismatch {
            what: "alignment lines".into(),
            got: set.len(),
            expected: pairs.len(),
        });
    }
    for (n, (links, (src, tgt))) in set.iter().zip(pairs).enumerate() {
        if let Some(&(i, j)) = links.iter().find(|&&(i, j)| i >= src.len() || j >= tgt.len()) {
            return Err(Error::Format(format!(
                "alignment {i}-{j} on line {} exceeds sentence lengths {}x{}",
                n + 1,
                src.len(),
                tgt.len()
            )));
        }
    }
    Ok(())
}
