//! A deterministic, differentiable stand-in translation model with planted
//! barrier tokens.
//!
//! Every source token translates to itself. A token with non-zero
//! interference pulls the hidden state of every position within `window` of
//! it towards its own embedding, so its neighbours decode to the wrong word.
//! Replacing or deleting it restores them, which is exactly the behaviour the
//! risk estimators are meant to detect.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Capabilities, TranslationModel};
use crate::text::{
    AnnotatedCorpus, ParallelExample, Sentence, TokenId, Vocab, DEL_TOKEN, UNK_TOKEN,
};

pub const MAX_COSINE: f64 = 0.9;
const MAX_RESAMPLES: usize = 1000;

/// Hyperparameters of a toy model. The embedding matrix is regenerated from
/// `seed`, so this is all that needs to be stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_vocab: usize,
    pub dim: usize,
    /// Explicit barrier ids; when absent, `n_barriers` regular ids are drawn
    /// from `seed`.
    pub barriers: Option<Vec<TokenId>>,
    pub n_barriers: usize,
    pub interference: f64,
    pub window: usize,
    pub temperature: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_vocab: 50,
            dim: 16,
            barriers: None,
            n_barriers: 10,
            interference: 0.95,
            window: 2,
            temperature: 10.0,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Hidden state of one output position: `(1 - mu) * E[own] + mu * E[other]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Mix {
    own: TokenId,
    other: Option<(TokenId, f64)>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyConfig,
    vocab: Vocab,
    model_id: String,
    /// Row-major `n_vocab x dim`, unit-norm rows.
    emb: Vec<f64>,
    /// `emb * emb^T`, row-major.
    gram: Vec<f64>,
    interference: Vec<f64>,
    barriers: Vec<TokenId>,
}

impl ToyModel {
    pub fn new(config: &ToyConfig) -> Result<Self> {
        let n = config.n_vocab;
        let d = config.dim;
        if n < 8 || d < 4 {
            return Err(Error::InvalidInput(format!(
                "toy model needs n_vocab >= 8 and dim >= 4 (got {n}, {d})"
            )));
        }
        if !(0.0..=1.0).contains(&config.interference) {
            return Err(Error::InvalidInput("interference must lie in [0, 1]".into()));
        }
        let vocab = Vocab::from_tokens(
            [UNK_TOKEN.to_string(), DEL_TOKEN.to_string()]
                .into_iter()
                .chain((2..n).map(|i| format!("w{i}"))),
        )?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut emb = vec![0.0; n * d];
        let mut resamples = 0;
        for v in 0..n {
            loop {
                let mut row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x /= norm);
                let ok = (0..v).all(|u| dot(&row, &emb[u * d..(u + 1) * d]) <= MAX_COSINE);
                if ok {
                    emb[v * d..(v + 1) * d].copy_from_slice(&row);
                    break;
                }
                resamples += 1;
                if resamples > MAX_RESAMPLES {
                    return Err(Error::InvalidInput(format!(
                        "cannot place {n} embeddings in {d} dimensions with cosine <= {MAX_COSINE}"
                    )));
                }
            }
        }

        let mut barriers = match &config.barriers {
            Some(ids) => {
                for &b in ids {
                    if b as usize >= n || vocab.is_special(b) {
                        return Err(Error::InvalidInput(format!("invalid barrier id {b}")));
                    }
                }
                ids.clone()
            }
            None => {
                let mut regular: Vec<TokenId> = vocab.regular_ids().collect();
                regular.shuffle(&mut rng);
                regular.truncate(config.n_barriers.min(regular.len()));
                regular
            }
        };
        barriers.sort_unstable();
        barriers.dedup();
        let mut interference = vec![0.0; n];
        for &b in &barriers {
            interference[b as usize] = config.interference;
        }

        let mut gram = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                gram[a * n + b] = dot(&emb[a * d..(a + 1) * d], &emb[b * d..(b + 1) * d]);
            }
        }

        let digest = Sha256::digest(serde_json::to_vec(config)?);
        let model_id = format!("toy-{}", hex::encode(&digest[..6]));
        Ok(Self {
            config: config.clone(),
            vocab,
            model_id,
            emb,
            gram,
            interference,
            barriers,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn barriers(&self) -> &[TokenId] {
        &self.barriers
    }

    pub fn is_barrier(&self, id: TokenId) -> bool {
        self.interference[id as usize] > 0.0
    }

    pub fn interference(&self, id: TokenId) -> f64 {
        self.interference[id as usize]
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn embedding(&self, id: TokenId) -> &[f64] {
        let d = self.config.dim;
        &self.emb[id as usize * d..(id as usize + 1) * d]
    }

    /// Largest off-diagonal cosine between embedding rows.
    pub fn max_cosine(&self) -> f64 {
        let n = self.config.n_vocab;
        let mut best = f64::NEG_INFINITY;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    best = best.max(self.gram[a * n + b]);
                }
            }
        }
        best
    }

    fn mixes(&self, x: &[TokenId]) -> Vec<Mix> {
        let w = self.config.window;
        (0..x.len())
            .map(|j| {
                let lo = j.saturating_sub(w);
                let hi = (j + w).min(x.len() - 1);
                let mut best: Option<(usize, f64)> = None;
                for k in (lo..=hi).filter(|&k| k != j) {
                    let iota = self.interference[x[k] as usize];
                    if best.is_none_or(|(_, b)| iota > b) {
                        best = Some((k, iota));
                    }
                }
                Mix {
                    own: x[j],
                    other: best.map(|(k, mu)| (x[k], mu)),
                }
            })
            .collect()
    }

    fn logits(&self, mix: Mix) -> Vec<f64> {
        let n = self.config.n_vocab;
        let tau = self.config.temperature;
        let own = &self.gram[mix.own as usize * n..(mix.own as usize + 1) * n];
        match mix.other {
            Some((other, mu)) if mu > 0.0 => {
                let oth = &self.gram[other as usize * n..(other as usize + 1) * n];
                own.iter()
                    .zip(oth)
                    .map(|(a, b)| tau * ((1.0 - mu) * a + mu * b))
                    .collect()
            }
            _ => own.iter().map(|a| tau * a).collect(),
        }
    }

    /// Per-position output logits for source `x`.
    pub fn position_logits(&self, x: &Sentence) -> Vec<Vec<f64>> {
        self.mixes(x.ids()).into_iter().map(|m| self.logits(m)).collect()
    }

    pub fn toy_decode(&self, x: &Sentence) -> Sentence {
        let out = self
            .position_logits(x)
            .iter()
            .map(|z| argmax(z) as TokenId)
            .collect();
        Sentence::new(out).expect("decode preserves length")
    }

    pub fn toy_nll(&self, x: &Sentence, y: &Sentence) -> f64 {
        let logits = self.position_logits(x);
        let aligned: f64 = logits
            .iter()
            .zip(y.ids())
            .map(|(z, &t)| log_sum_exp(z) - z[t as usize])
            .sum();
        let surplus = x.len().abs_diff(y.len()) as f64;
        aligned + surplus * (self.config.n_vocab as f64).ln()
    }

    /// Analytic gradient of [`ToyModel::toy_nll`] with respect to the input
    /// embedding row of `x[pos]`, summed over every position where that token
    /// is the emitter or the interferer. Output embeddings are held fixed.
    pub fn toy_embed_grad(&self, x: &Sentence, y: &Sentence, pos: usize) -> Result<Vec<f64>> {
        let target = x.get(pos).ok_or(Error::PositionOutOfRange {
            pos,
            len: x.len(),
        })?;
        Ok(self.embed_grad_for(x, y, target))
    }

    pub fn embed_grad_for(&self, x: &Sentence, y: &Sentence, token: TokenId) -> Vec<f64> {
        let d = self.config.dim;
        let tau = self.config.temperature;
        let mut grad = vec![0.0; d];
        for (mix, &t) in self.mixes(x.ids()).into_iter().zip(y.ids()) {
            let (mu, other) = match mix.other {
                Some((o, mu)) => (mu, Some(o)),
                None => (0.0, None),
            };
            let mut coef = 0.0;
            if mix.own == token {
                coef += 1.0 - mu;
            }
            if other == Some(token) {
                coef += mu;
            }
            if coef == 0.0 {
                continue;
            }
            let z = self.logits(mix);
            let probs = softmax(&z);
            for (u, p) in probs.iter().enumerate() {
                let g = p - if u == t as usize { 1.0 } else { 0.0 };
                let scale = coef * tau * g;
                for (acc, e) in grad.iter_mut().zip(self.embedding(u as TokenId)) {
                    *acc += scale * e;
                }
            }
        }
        grad
    }

    /// Softmax over the vocabulary of `E · (E[x_pos] - grad)`.
    pub fn toy_proposal(&self, x: &Sentence, y: &Sentence, pos: usize) -> Result<Vec<f64>> {
        let grad = self.toy_embed_grad(x, y, pos)?;
        let updated: Vec<f64> = self
            .embedding(x.ids()[pos])
            .iter()
            .zip(&grad)
            .map(|(e, g)| e - g)
            .collect();
        let scores: Vec<f64> = (0..self.config.n_vocab)
            .map(|v| dot(self.embedding(v as TokenId), &updated))
            .collect();
        Ok(softmax(&scores))
    }

    /// Exact `k` best outputs by total logit, best first. Equal totals are
    /// ordered by ascending token sequence.
    pub fn toy_nbest(&self, x: &Sentence, k: usize) -> Vec<Sentence> {
        let logits = self.position_logits(x);
        let sorted: Vec<Vec<(TokenId, f64)>> = logits
            .iter()
            .map(|z| {
                let mut c: Vec<(TokenId, f64)> =
                    z.iter().enumerate().map(|(v, &s)| (v as TokenId, s)).collect();
                c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                c
            })
            .collect();

        #[derive(PartialEq)]
        struct Node {
            score: f64,
            tokens: Vec<TokenId>,
            idx: Vec<usize>,
        }
        impl Eq for Node {}
        impl Ord for Node {
            fn cmp(&self, other: &Self) -> Ordering {
                self.score
                    .total_cmp(&other.score)
                    .then_with(|| other.tokens.cmp(&self.tokens))
            }
        }
        impl PartialOrd for Node {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        let node = |idx: Vec<usize>| {
            let score = idx.iter().enumerate().map(|(j, &i)| sorted[j][i].1).sum();
            let tokens = idx.iter().enumerate().map(|(j, &i)| sorted[j][i].0).collect();
            Node { score, tokens, idx }
        };

        let mut heap = BinaryHeap::new();
        let mut seen = HashSet::new();
        let start = vec![0; sorted.len()];
        seen.insert(start.clone());
        heap.push(node(start));
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let Some(best) = heap.pop() else { break };
            for j in 0..best.idx.len() {
                if best.idx[j] + 1 < sorted[j].len() {
                    let mut next = best.idx.clone();
                    next[j] += 1;
                    if seen.insert(next.clone()) {
                        heap.push(node(next));
                    }
                }
            }
            out.push(Sentence::new(best.tokens).expect("non-empty"));
        }
        out
    }

    /// Total logit of `y` under `x`, the score [`ToyModel::toy_nbest`] ranks by.
    pub fn sequence_score(&self, x: &Sentence, y: &Sentence) -> f64 {
        self.position_logits(x)
            .iter()
            .zip(y.ids())
            .map(|(z, &t)| z[t as usize])
            .sum()
    }
}

impl TranslationModel for ToyModel {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn max_in_flight(&self) -> usize {
        usize::MAX
    }

    fn decode(&self, src: &Sentence) -> Result<Sentence> {
        self.vocab.validate(src)?;
        Ok(self.toy_decode(src))
    }

    fn nll(&self, src: &Sentence, tgt: &Sentence) -> Result<f64> {
        self.vocab.validate(src)?;
        self.vocab.validate(tgt)?;
        Ok(self.toy_nll(src, tgt))
    }

    fn proposal(&self, src: &Sentence, tgt: &Sentence, pos: usize) -> Result<Vec<f64>> {
        self.vocab.validate(src)?;
        self.vocab.validate(tgt)?;
        self.toy_proposal(src, tgt, pos)
    }

    fn n_best(&self, src: &Sentence, k: usize) -> Result<Vec<Sentence>> {
        self.vocab.validate(src)?;
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        Ok(self.toy_nbest(src, k))
    }

    fn token_prob(&self, src: &Sentence, prefix: &[TokenId], w: TokenId) -> Result<f64> {
        self.vocab.validate(src)?;
        let j = prefix.len();
        if j >= src.len() {
            return Ok(1.0 / self.config.n_vocab as f64);
        }
        let mix = self.mixes(src.ids())[j];
        let probs = softmax(&self.logits(mix));
        probs
            .get(w as usize)
            .copied()
            .ok_or(Error::UnknownTokenId {
                id: w,
                size: probs.len(),
            })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Parameters of a generated parallel corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Chance that a position holds a barrier token.
    pub barrier_prob: f64,
    /// Place exactly this many barriers per sentence instead.
    pub exact_barriers: Option<usize>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_sentences: 50,
            min_len: 8,
            max_len: 14,
            barrier_prob: 0.2,
            exact_barriers: None,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: AnnotatedCorpus,
    /// Positions holding a barrier token, per example.
    pub planted: Vec<Vec<usize>>,
}

pub const SYNTH_TAGS: [&str; 4] = ["N", "V", "ADJ", "P"];
pub const BARRIER_TAG: &str = "B";

/// Samples sources from the model's vocabulary, pairing each with its
/// lexicon image as reference. Barrier positions are tagged `B`; other tags
/// and dependency depths are arbitrary but deterministic.
pub fn gen_synth_corpus(spec: &SynthSpec, model: &ToyModel) -> Result<SynthCorpus> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidInput("invalid sentence length range".into()));
    }
    let barriers = model.barriers();
    let regular: Vec<TokenId> = model
        .vocab()
        .regular_ids()
        .filter(|&v| !model.is_barrier(v))
        .collect();
    if regular.is_empty() || (barriers.is_empty() && spec.barrier_prob > 0.0) {
        return Err(Error::InvalidInput("vocabulary too small for corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_sentences);
    let mut planted = Vec::with_capacity(spec.n_sentences);
    let mut tags = Vec::with_capacity(spec.n_sentences);
    let mut depths = Vec::with_capacity(spec.n_sentences);
    for id in 0..spec.n_sentences {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let is_barrier: Vec<bool> = match spec.exact_barriers {
            Some(b) => {
                let mut pos: Vec<usize> = (0..len).collect();
                pos.shuffle(&mut rng);
                let chosen: HashSet<usize> = pos.into_iter().take(b.min(len)).collect();
                (0..len).map(|p| chosen.contains(&p)).collect()
            }
            None => (0..len).map(|_| rng.random_bool(spec.barrier_prob)).collect(),
        };
        let ids: Vec<TokenId> = is_barrier
            .iter()
            .map(|&b| {
                let pool = if b { barriers } else { &regular };
                *pool.choose(&mut rng).expect("non-empty pool")
            })
            .collect();
        let source = Sentence::new(ids)?;
        planted.push(
            is_barrier
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(p, _)| p)
                .collect(),
        );
        tags.push(
            source
                .ids()
                .iter()
                .zip(&is_barrier)
                .map(|(&t, &b)| {
                    if b {
                        BARRIER_TAG.to_string()
                    } else {
                        SYNTH_TAGS[t as usize % SYNTH_TAGS.len()].to_string()
                    }
                })
                .collect(),
        );
        depths.push((0..len).map(|_| rng.random_range(0..4)).collect());
        examples.push(ParallelExample::new(id, source.clone(), vec![source])?);
    }
    let corpus = AnnotatedCorpus::new(examples)
        .with_pos_tags(tags)?
        .with_dep_depths(depths)?;
    Ok(SynthCorpus { corpus, planted })
}
