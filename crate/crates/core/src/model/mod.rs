//! The model contract every estimator is written against, plus the decode
//! cache and the line-delimited JSON protocol for out-of-process models.

mod cache;
mod process;
pub mod protocol;
mod server;

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Sentence, TokenId, Vocab};

pub use cache::{CacheStats, DecodeCache};
pub use process::ProcessModel;
pub use server::{respond, serve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub decode: bool,
    pub nll: bool,
    pub proposal: bool,
    pub nbest: bool,
}

impl Capabilities {
    pub const ALL: Self = Self {
        decode: true,
        nll: true,
        proposal: true,
        nbest: true,
    };

    pub fn names(&self) -> Vec<String> {
        [
            (self.decode, "decode"),
            (self.nll, "nll"),
            (self.proposal, "proposal"),
            (self.nbest, "nbest"),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n.to_string())
        .collect()
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        let has = |n: &str| names.iter().any(|s| s.as_ref() == n);
        Self {
            decode: has("decode"),
            nll: has("nll"),
            proposal: has("proposal"),
            nbest: has("nbest"),
        }
    }
}

/// A deterministic translation model.
///
/// `decode` must return the same hypothesis for the same input on every
/// call. Source and target ids both index [`TranslationModel::vocab`].
pub trait TranslationModel: Send + Sync {
    /// Identifies model and checkpoint; decode cache entries are keyed by it.
    fn model_id(&self) -> &str;

    fn vocab(&self) -> &Vocab;

    fn capabilities(&self) -> Capabilities;

    /// Number of requests the model accepts concurrently.
    fn max_in_flight(&self) -> usize {
        1
    }

    fn decode(&self, src: &Sentence) -> Result<Sentence>;

    /// `-log P(tgt | src)`.
    fn nll(&self, src: &Sentence, tgt: &Sentence) -> Result<f64>;

    /// Sampling distribution over the vocabulary obtained from a one-step
    /// gradient update of the embedding at `pos`.
    fn proposal(&self, _src: &Sentence, _tgt: &Sentence, _pos: usize) -> Result<Vec<f64>> {
        Err(Error::Capability("proposal"))
    }

    /// Up to `k` distinct hypotheses, best first; the first equals `decode`.
    fn n_best(&self, src: &Sentence, k: usize) -> Result<Vec<Sentence>>;

    /// `P(y_t = w | y_<t, src)`, derived from sentence-level nll differences
    /// unless the model can answer it directly.
    fn token_prob(&self, src: &Sentence, prefix: &[TokenId], w: TokenId) -> Result<f64> {
        let mut extended = prefix.to_vec();
        extended.push(w);
        let with = self.nll(src, &Sentence::new(extended)?)?;
        let without = if prefix.is_empty() {
            0.0
        } else {
            self.nll(src, &Sentence::new(prefix.to_vec())?)?
        };
        Ok((without - with).exp().min(1.0))
    }
}

impl<M: TranslationModel + ?Sized> TranslationModel for &M {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
    fn decode(&self, src: &Sentence) -> Result<Sentence> {
        (**self).decode(src)
    }
    fn nll(&self, src: &Sentence, tgt: &Sentence) -> Result<f64> {
        (**self).nll(src, tgt)
    }
    fn proposal(&self, src: &Sentence, tgt: &Sentence, pos: usize) -> Result<Vec<f64>> {
        (**self).proposal(src, tgt, pos)
    }
    fn n_best(&self, src: &Sentence, k: usize) -> Result<Vec<Sentence>> {
        (**self).n_best(src, k)
    }
    fn token_prob(&self, src: &Sentence, prefix: &[TokenId], w: TokenId) -> Result<f64> {
        (**self).token_prob(src, prefix, w)
    }
}

/// Per-operation call counters around another model.
pub struct Counted<M> {
    inner: M,
    decodes: AtomicU64,
    others: AtomicU64,
}

impl<M: TranslationModel> Counted<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            decodes: AtomicU64::new(0),
            others: AtomicU64::new(0),
        }
    }

    pub fn decode_calls(&self) -> u64 {
        self.decodes.load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> u64 {
        self.decode_calls() + self.others.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    fn tick(&self) {
        self.others.fetch_add(1, Ordering::Relaxed);
    }
}

impl<M: TranslationModel> TranslationModel for Counted<M> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
    fn vocab(&self) -> &Vocab {
        self.inner.vocab()
    }
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
    fn decode(&self, src: &Sentence) -> Result<Sentence> {
        self.decodes.fetch_add(1, Ordering::Relaxed);
        self.inner.decode(src)
    }
    fn nll(&self, src: &Sentence, tgt: &Sentence) -> Result<f64> {
        self.tick();
        self.inner.nll(src, tgt)
    }
    fn proposal(&self, src: &Sentence, tgt: &Sentence, pos: usize) -> Result<Vec<f64>> {
        self.tick();
        self.inner.proposal(src, tgt, pos)
    }
    fn n_best(&self, src: &Sentence, k: usize) -> Result<Vec<Sentence>> {
        self.tick();
        self.inner.n_best(src, k)
    }
    fn token_prob(&self, src: &Sentence, prefix: &[TokenId], w: TokenId) -> Result<f64> {
        self.tick();
        self.inner.token_prob(src, prefix, w)
    }
}

/// Decodes through the cache: hits skip the model entirely.
pub fn decode_cached<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    x: &Sentence,
) -> Result<Sentence> {
    model.vocab().validate(x).map_err(|e| match e {
        Error::UnknownTokenId { .. } => Error::VocabMismatch(e.to_string()),
        other => other,
    })?;
    if let Some(hyp) = cache.get(model.model_id(), x) {
        return Ok(hyp);
    }
    let hyp = model.decode(x)?;
    cache.insert(model.model_id(), x, &hyp)?;
    Ok(hyp)
}

/// Sentence loss through the cache.
pub fn nll_cached<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    src: &Sentence,
    tgt: &Sentence,
) -> Result<f64> {
    if let Some(v) = cache.get_nll(model.model_id(), src, tgt) {
        return Ok(v);
    }
    let v = model.nll(src, tgt)?;
    cache.insert_nll(model.model_id(), src, tgt, v)?;
    Ok(v)
}

pub(crate) const RETRY_ATTEMPTS: u32 = 3;

/// Runs `op` up to three times, backing off exponentially between
/// retryable failures.
pub(crate) fn with_retry<T>(mut op: impl FnMut() -> Result<T>) -> Result<T> {
    let mut delay = Duration::from_millis(50);
    let mut attempt = 1;
    loop {
        match op() {
            Err(e) if e.is_retryable() && attempt < RETRY_ATTEMPTS => {
                log::warn!("attempt {attempt} failed: {e}; retrying in {delay:?}");
                thread::sleep(delay);
                delay *= 2;
                attempt += 1;
            }
            other => return other,
        }
    }
}
