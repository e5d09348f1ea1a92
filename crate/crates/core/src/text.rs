//! Vocabulary, token-id sentences, parallel examples and the single-word
//! edit space used to build counterfactual inputs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK_TOKEN: &str = "<unk>";
pub const DEL_TOKEN: &str = "<del>";

/// Token inventory with a bijective token/id mapping.
///
/// Ids `0` and `1` are reserved for the unknown-word token and the deletion
/// marker. The deletion marker is never produced by [`Vocab::encode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub const UNK: TokenId = 0;
    pub const DEL: TokenId = 1;

    /// Builds a vocabulary from an explicit token list. The first two entries
    /// must be the special tokens.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 2 || tokens[0] != UNK_TOKEN || tokens[1] != DEL_TOKEN {
            return Err(Error::InvalidInput(format!(
                "vocabulary must start with {UNK_TOKEN} and {DEL_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token `{tok}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Frequency-ordered vocabulary over a whitespace-tokenized corpus.
    ///
    /// Tokens are sorted by descending count, then lexicographically, and
    /// truncated so the total size (specials included) is at most `max_size`.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                if tok != UNK_TOKEN && tok != DEL_TOKEN {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut by_freq: Vec<(&str, usize)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(2);
        let tokens = [UNK_TOKEN, DEL_TOKEN]
            .into_iter()
            .chain(by_freq.into_iter().take(keep).map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == Self::UNK || id == Self::DEL
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Encodes a whitespace-tokenized line, mapping unknown tokens to UNK.
    pub fn encode(&self, line: &str) -> Result<Sentence> {
        let ids = line
            .split_whitespace()
            .map(|t| match self.id(t) {
                Some(Self::DEL) | None => Self::UNK,
                Some(id) => id,
            })
            .collect();
        Sentence::new(ids)
    }

    pub fn decode(&self, sentence: &Sentence) -> String {
        sentence
            .ids()
            .iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Checks every id is in range and no deletion marker is present.
    pub fn validate(&self, sentence: &Sentence) -> Result<()> {
        for &id in sentence.ids() {
            if id as usize >= self.len() {
                return Err(Error::UnknownTokenId {
                    id,
                    size: self.len(),
                });
            }
            if id == Self::DEL {
                return Err(Error::InvalidInput(
                    "deletion marker inside a sentence".into(),
                ));
            }
        }
        Ok(())
    }

    /// Ids eligible as substitutes: everything except the specials.
    pub fn regular_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len() as TokenId).filter(|&id| !self.is_special(id))
    }
}

/// A non-empty sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenId>", into = "Vec<TokenId>")]
pub struct Sentence(Vec<TokenId>);

impl Sentence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty sentence".into()));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, pos: usize) -> Option<TokenId> {
        self.0.get(pos).copied()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }
}

impl TryFrom<Vec<TokenId>> for Sentence {
    type Error = Error;

    fn try_from(ids: Vec<TokenId>) -> Result<Self> {
        Self::new(ids)
    }
}

impl From<Sentence> for Vec<TokenId> {
    fn from(s: Sentence) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditKind {
    Substitute(TokenId),
    Delete,
}

/// A single-position edit of a source sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edit {
    pub position: usize,
    pub kind: EditKind,
}

impl Edit {
    pub fn substitute(position: usize, token: TokenId) -> Self {
        Self {
            position,
            kind: EditKind::Substitute(token),
        }
    }

    pub fn delete(position: usize) -> Self {
        Self {
            position,
            kind: EditKind::Delete,
        }
    }

    pub fn is_delete(&self) -> bool {
        self.kind == EditKind::Delete
    }
}

/// All single-word edits at position `pos`: every non-special substitute
/// other than the current token in ascending id order, followed by one
/// deletion when the sentence has at least two tokens.
pub fn edit_set(vocab: &Vocab, x: &Sentence, pos: usize) -> Result<Vec<Edit>> {
    let current = x.get(pos).ok_or(Error::PositionOutOfRange {
        pos,
        len: x.len(),
    })?;
    let mut edits: Vec<Edit> = vocab
        .regular_ids()
        .filter(|&v| v != current)
        .map(|v| Edit::substitute(pos, v))
        .collect();
    if x.len() > 1 {
        edits.push(Edit::delete(pos));
    }
    Ok(edits)
}

/// Number of elements [`edit_set`] returns, without materializing it.
pub fn edit_set_size(vocab: &Vocab, x: &Sentence, pos: usize) -> usize {
    let regular = vocab.regular_ids().count();
    let current_regular = x.get(pos).is_some_and(|t| !vocab.is_special(t));
    regular - usize::from(current_regular) + usize::from(x.len() > 1)
}

pub fn apply_edit(x: &Sentence, edit: &Edit) -> Result<Sentence> {
    if edit.position >= x.len() {
        return Err(Error::PositionOutOfRange {
            pos: edit.position,
            len: x.len(),
        });
    }
    let mut ids = x.ids().to_vec();
    match edit.kind {
        EditKind::Substitute(v) => {
            if ids[edit.position] == v {
                return Err(Error::InvalidEdit(
                    "substitution reproduces the original token".into(),
                ));
            }
            ids[edit.position] = v;
        }
        EditKind::Delete => {
            if ids.len() == 1 {
                return Err(Error::InvalidEdit(
                    "cannot delete from a one-token sentence".into(),
                ));
            }
            ids.remove(edit.position);
        }
    }
    Sentence::new(ids)
}

/// A source sentence with one or more references; `primary_ref` is the one
/// used as ground truth when scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub id: usize,
    pub source: Sentence,
    pub references: Vec<Sentence>,
    pub primary_ref: usize,
}

impl ParallelExample {
    pub fn new(id: usize, source: Sentence, references: Vec<Sentence>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::InvalidInput(format!("example {id} has no reference")));
        }
        Ok(Self {
            id,
            source,
            references,
            primary_ref: 0,
        })
    }

    pub fn reference(&self) -> &Sentence {
        &self.references[self.primary_ref]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotatedCorpus {
    pub examples: Vec<ParallelExample>,
    pub pos_tags: Option<Vec<Vec<String>>>,
    pub dep_depths: Option<Vec<Vec<u32>>>,
}

impl AnnotatedCorpus {
    pub fn new(examples: Vec<ParallelExample>) -> Self {
        Self {
            examples,
            pos_tags: None,
            dep_depths: None,
        }
    }

    pub fn with_pos_tags(mut self, tags: Vec<Vec<String>>) -> Result<Self> {
        self.check_lengths("pos tags", tags.iter().map(Vec::len))?;
        self.pos_tags = Some(tags);
        Ok(self)
    }

    pub fn with_dep_depths(mut self, depths: Vec<Vec<u32>>) -> Result<Self> {
        self.check_lengths("dependency depths", depths.iter().map(Vec::len))?;
        self.dep_depths = Some(depths);
        Ok(self)
    }

    fn check_lengths(&self, what: &str, lens: impl ExactSizeIterator<Item = usize>) -> Result<()> {
        if lens.len() != self.examples.len() {
            return Err(Error::LengthMismatch {
                what: format!("{what} (lines)"),
                got: lens.len(),
                expected: self.examples.len(),
            });
        }
        for (ex, n) in self.examples.iter().zip(lens) {
            if n != ex.source.len() {
                return Err(Error::LengthMismatch {
                    what: format!("{what} for example {}", ex.id),
                    got: n,
                    expected: ex.source.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Reads a pre-tokenized text file, one sentence per line. Blank lines are
/// rejected since an empty source cannot be decoded.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
    if let Some(n) = lines.iter().position(|l| l.split_whitespace().next().is_none()) {
        return Err(Error::Format(format!("{}: line {} is empty", path.display(), n + 1)));
    }
    Ok(lines)
}

/// Loads a parallel corpus from a source file and one or more reference
/// files with matching line counts.
pub fn load_parallel(vocab: &Vocab, src: &Path, refs: &[&Path]) -> Result<Vec<ParallelExample>> {
    if refs.is_empty() {
        return Err(Error::InvalidInput("at least one reference file required".into()));
    }
    let sources = read_lines(src)?;
    let ref_lines = refs
        .iter()
        .map(|p| read_lines(p))
        .collect::<Result<Vec<_>>>()?;
    for (p, lines) in refs.iter().zip(&ref_lines) {
        if lines.len() != sources.len() {
            return Err(Error::Format(format!(
                "{} has {} lines, source has {}",
                p.display(),
                lines.len(),
                sources.len()
            )));
        }
    }
    sources
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let references = ref_lines
                .iter()
                .map(|lines| vocab.encode(&lines[i]))
                .collect::<Result<Vec<_>>>()?;
            ParallelExample::new(i, vocab.encode(line)?, references)
        })
        .collect()
}

/// Reads a tab-separated annotation file: one line per sentence, one field
/// per token.
pub fn read_tsv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').split('\t').map(str::to_string).collect())
        .collect())
}

pub fn read_depths(path: &Path) -> Result<Vec<Vec<u32>>> {
    read_tsv(path)?
        .into_iter()
        .enumerate()
        .map(|(n, row)| {
            row.iter()
                .map(|f| {
                    f.trim().parse::<u32>().map_err(|_| {
                        Error::Format(format!("{}: line {}: bad depth `{f}`", path.display(), n + 1))
                    })
                })
                .collect()
        })
        .collect()
}
