//! Counterfactual risk estimation.
//!
//! For every source position the estimators decode edited copies of the
//! sentence, score each against the reference, and summarize the scores that
//! beat the unedited translation with their truncated mean. The exact
//! estimator enumerates the whole edit set; the budgeted ones decode at most
//! `b` edits per position:
//!
//! * uniform: a seeded uniform sample without replacement;
//! * stratified: a uniform pre-sample of `B` edits, of which the `b` with the
//!   lowest model loss are decoded;
//! * gradient: a sample drawn from the model's one-step gradient proposal.
//!
//! Deletion is always part of a budgeted sample and costs one unit of `b`.
//! Sampling streams are keyed by (seed, example, position, repeat), so a
//! report does not depend on evaluation order or thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gumbel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{kendall_w, overlap_at_k, sentence_bleu, Ranking};
use crate::model::{decode_cached, nll_cached, DecodeCache, TranslationModel};
use crate::text::{apply_edit, edit_set, Edit, EditKind, ParallelExample, Sentence, TokenId};

pub const N_BINS: usize = 50;

/// Distribution of counterfactual scores at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// One score per evaluated edit, in edit order.
    pub scores: Vec<f64>,
    /// Score of the unedited translation.
    pub original: f64,
    pub range: (f64, f64),
    pub bins: Vec<usize>,
}

impl Histogram {
    pub fn new(scores: Vec<f64>, original: f64) -> Self {
        Self::with_range(scores, original, (0.0, 1.0))
    }

    /// Values outside `range` are counted in the nearest edge bin.
    pub fn with_range(scores: Vec<f64>, original: f64, range: (f64, f64)) -> Self {
        let mut bins = vec![0; N_BINS];
        for &v in &scores {
            bins[bin_index(v, range)] += 1;
        }
        Self {
            scores,
            original,
            range,
            bins,
        }
    }

    pub fn bin_low(&self, bin: usize) -> f64 {
        self.range.0 + (self.range.1 - self.range.0) * bin as f64 / N_BINS as f64
    }

    /// Scores strictly above the original score.
    pub fn orange_band(&self) -> Vec<f64> {
        self.scores
            .iter()
            .copied()
            .filter(|&v| v > self.original)
            .collect()
    }

    pub fn truncated_mean(&self) -> Option<f64> {
        truncated_mean(&self.scores, self.original)
    }

    /// `(bin_low, count, in_orange)` rows with non-zero counts, splitting
    /// each bin by orange-band membership.
    pub fn rows(&self) -> Vec<(f64, usize, bool)> {
        let mut split = vec![[0usize; 2]; N_BINS];
        for &v in &self.scores {
            split[bin_index(v, self.range)][usize::from(v > self.original)] += 1;
        }
        let mut rows = Vec::new();
        for (bin, counts) in split.iter().enumerate() {
            for (orange, &count) in counts.iter().enumerate() {
                if count > 0 {
                    rows.push((self.bin_low(bin), count, orange == 1));
                }
            }
        }
        rows
    }
}

fn bin_index(v: f64, (lo, hi): (f64, f64)) -> usize {
    let t = ((v - lo) / (hi - lo) * N_BINS as f64).floor();
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(N_BINS - 1)
    }
}

/// Mean of the scores strictly above `original`, or `None` when there are
/// none. The band is summed in sorted order so the result does not depend on
/// the order edits were evaluated in.
pub fn truncated_mean(scores: &[f64], original: f64) -> Option<f64> {
    let mut band: Vec<f64> = scores.iter().copied().filter(|&v| v > original).collect();
    if band.is_empty() {
        return None;
    }
    band.sort_by(f64::total_cmp);
    Some(band.iter().sum::<f64>() / band.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Uniform,
    Stratified,
    Gradient,
}

impl Method {
    pub const BUDGETED: [Method; 3] = [Method::Uniform, Method::Stratified, Method::Gradient];

    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Uniform => "uniform",
            Method::Stratified => "stratified",
            Method::Gradient => "gradient",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Method::Exact),
            "uniform" => Ok(Method::Uniform),
            "stratified" => Ok(Method::Stratified),
            "gradient" => Ok(Method::Gradient),
            other => Err(Error::InvalidInput(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Edits decoded per position.
    pub b: usize,
    /// Stratified pre-sample size; defaults to [`default_pre_budget`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_budget: Option<usize>,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            method: Method::Stratified,
            b: 100,
            pre_budget: None,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn new(method: Method, b: usize, seed: u64) -> Self {
        Self {
            method,
            b,
            pre_budget: None,
            seed,
        }
    }

    pub fn pre_budget(&self) -> usize {
        self.pre_budget.unwrap_or_else(|| default_pre_budget(self.b))
    }

    pub fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::InvalidInput("budget b must be at least 1".into()));
        }
        if self.method == Method::Stratified && self.pre_budget() < self.b {
            return Err(Error::InvalidInput(format!(
                "pre-sample budget {} is smaller than b = {}",
                self.pre_budget(),
                self.b
            )));
        }
        Ok(())
    }
}

/// Pre-sample size used with budget `b`: 500 below 500, 1000 at 500, 2000 at
/// 1000 and twice the budget beyond that.
pub fn default_pre_budget(b: usize) -> usize {
    match b {
        0..500 => 500,
        500..1000 => 1000,
        1000 => 2000,
        _ => 2 * b,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRisk {
    pub position: usize,
    pub tm: Option<f64>,
    pub evaluated: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub example_id: usize,
    /// BLEU of the unedited translation.
    pub original: f64,
    pub positions: Vec<PositionRisk>,
    pub ranking: Ranking,
    pub config: EstimatorConfig,
    /// Set when the requested method was unavailable and uniform sampling
    /// was used instead.
    #[serde(default)]
    pub fallback: bool,
}

impl RiskReport {
    pub fn tm_values(&self) -> Vec<Option<f64>> {
        self.positions.iter().map(|p| p.tm).collect()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Top-`k` positions of the ranking, restricted to positions with a
/// truncated mean.
pub fn detect_barriers(report: &RiskReport, k: usize) -> Vec<usize> {
    report.ranking.top_scored(k).to_vec()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the sampling stream for one position.
pub fn position_seed(seed: u64, example: usize, position: usize, repeat: usize) -> u64 {
    [example as u64, position as u64, repeat as u64]
        .into_iter()
        .fold(splitmix(seed), |acc, v| splitmix(acc ^ splitmix(v)))
}

fn bleu(hyp: &Sentence, y: &Sentence) -> Result<f64> {
    Ok(sentence_bleu(hyp.ids(), y.ids())?.value)
}

/// Decodes every edited sentence and scores it against `y`.
pub fn counterfactual_scores<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    x: &Sentence,
    y: &Sentence,
    edits: &[Edit],
) -> Result<Histogram> {
    let original = bleu(&decode_cached(model, cache, x)?, y)?;
    let scores = score_edits(model, cache, x, y, edits)?;
    Ok(Histogram::new(scores, original))
}

fn score_edits<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    x: &Sentence,
    y: &Sentence,
    edits: &[Edit],
) -> Result<Vec<f64>> {
    edits
        .iter()
        .map(|e| bleu(&decode_cached(model, cache, &apply_edit(x, e)?)?, y))
        .collect()
}

/// Splits an edit set into its substitutions and optional deletion.
fn split_edits(edits: Vec<Edit>) -> (Vec<Edit>, Option<Edit>) {
    let mut subs = edits;
    let delete = match subs.last() {
        Some(e) if e.is_delete() => subs.pop(),
        _ => None,
    };
    (subs, delete)
}

/// Deletion (when allowed) plus the first `b - 1` substitutions of a seeded
/// shuffle. Growing `b` with the same seed only appends edits.
fn uniform_sample(edits: Vec<Edit>, b: usize, rng: &mut ChaCha8Rng) -> Vec<Edit> {
    if b >= edits.len() {
        return edits;
    }
    let (mut subs, delete) = split_edits(edits);
    subs.shuffle(rng);
    let take = if delete.is_some() { b - 1 } else { b };
    subs.truncate(take);
    subs.extend(delete);
    subs
}

struct Context<'a, M: ?Sized> {
    model: &'a M,
    cache: &'a DecodeCache,
    example: &'a ParallelExample,
    original: f64,
}

impl<M: TranslationModel + ?Sized> Context<'_, M> {
    fn x(&self) -> &Sentence {
        &self.example.source
    }

    fn y(&self) -> &Sentence {
        self.example.reference()
    }

    fn risk(&self, position: usize, edits: &[Edit], keep_histogram: bool) -> Result<PositionRisk> {
        let scores = score_edits(self.model, self.cache, self.x(), self.y(), edits)?;
        let histogram = Histogram::new(scores, self.original);
        Ok(PositionRisk {
            position,
            tm: histogram.truncated_mean(),
            evaluated: edits.len(),
            histogram: keep_histogram.then_some(histogram),
        })
    }

    fn rng(&self, cfg: &EstimatorConfig, position: usize, repeat: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(position_seed(cfg.seed, self.example.id, position, repeat))
    }

    fn edits(&self, position: usize) -> Result<Vec<Edit>> {
        edit_set(self.model.vocab(), self.x(), position)
    }

    fn exact(&self, position: usize) -> Result<PositionRisk> {
        self.risk(position, &self.edits(position)?, true)
    }

    fn uniform(&self, cfg: &EstimatorConfig, position: usize, repeat: usize) -> Result<PositionRisk> {
        let sample = uniform_sample(self.edits(position)?, cfg.b, &mut self.rng(cfg, position, repeat));
        self.risk(position, &sample, false)
    }

    fn stratified(&self, cfg: &EstimatorConfig, position: usize, repeat: usize) -> Result<PositionRisk> {
        let edits = self.edits(position)?;
        let total = edits.len();
        let pool = uniform_sample(edits, cfg.pre_budget(), &mut self.rng(cfg, position, repeat));
        let (subs, delete) = split_edits(pool);
        let take = cfg.b.min(total) - usize::from(delete.is_some());
        let mut scored = subs
            .into_iter()
            .map(|e| Ok((nll_cached(self.model, self.cache, &apply_edit(self.x(), &e)?, self.y())?, e)))
            .collect::<Result<Vec<(f64, Edit)>>>()?;
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| edit_key(&a.1).cmp(&edit_key(&b.1))));
        let mut chosen: Vec<Edit> = scored.into_iter().take(take).map(|(_, e)| e).collect();
        chosen.extend(delete);
        self.risk(position, &chosen, false)
    }

    fn gradient(&self, cfg: &EstimatorConfig, position: usize, repeat: usize) -> Result<PositionRisk> {
        let edits = self.edits(position)?;
        if cfg.b >= edits.len() {
            return self.risk(position, &edits, false);
        }
        let vocab = self.model.vocab();
        let probs = self.model.proposal(self.x(), self.y(), position)?;
        if probs.len() != vocab.len() {
            return Err(Error::Model(format!(
                "proposal has {} entries for a vocabulary of {}",
                probs.len(),
                vocab.len()
            )));
        }
        let masked: Vec<bool> = (0..probs.len() as TokenId)
            .map(|t| t == self.x().ids()[position] || vocab.is_special(t))
            .collect();
        let chosen = gradient_sample(edits, &probs, &masked, cfg.b, &mut self.rng(cfg, position, repeat))?;
        self.risk(position, &chosen, false)
    }
}

/// Deletion plus `b - 1` substitutions drawn without replacement in
/// proportion to `probs` (renormalized over unmasked tokens) via Gumbel
/// top-k. One noise value is drawn per vocabulary entry regardless of `b`,
/// so larger budgets extend smaller samples.
fn gradient_sample(
    edits: Vec<Edit>,
    probs: &[f64],
    masked: &[bool],
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Edit>> {
    if b >= edits.len() {
        return Ok(edits);
    }
    let total: f64 = probs
        .iter()
        .zip(masked)
        .filter(|(_, &m)| !m)
        .map(|(p, _)| p.max(0.0))
        .sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Model("proposal has no mass on substitutions".into()));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid parameters");
    let noise: Vec<f64> = (0..probs.len()).map(|_| rng.sample(gumbel)).collect();
    let (subs, delete) = split_edits(edits);
    let mut keyed: Vec<(f64, Edit)> = subs
        .into_iter()
        .map(|e| {
            let t = match e.kind {
                EditKind::Substitute(t) => t as usize,
                EditKind::Delete => unreachable!("deletion split off"),
            };
            let p = if masked[t] { 0.0 } else { probs[t].max(0.0) / total };
            let key = if p > 0.0 { p.ln() + noise[t] } else { f64::NEG_INFINITY };
            (key, e)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| edit_key(&a.1).cmp(&edit_key(&b.1))));
    let take = b - usize::from(delete.is_some());
    let mut chosen: Vec<Edit> = keyed.into_iter().take(take).map(|(_, e)| e).collect();
    chosen.extend(delete);
    Ok(chosen)
}

fn edit_key(e: &Edit) -> (usize, u64) {
    match e.kind {
        EditKind::Substitute(t) => (e.position, u64::from(t)),
        EditKind::Delete => (e.position, u64::MAX),
    }
}

/// Risk report for one example under `cfg`, using sampling stream `repeat`.
pub fn estimate_risk_repeat<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    example: &ParallelExample,
    cfg: &EstimatorConfig,
    repeat: usize,
) -> Result<RiskReport> {
    cfg.validate()?;
    let mut method = cfg.method;
    let mut fallback = false;
    if method == Method::Gradient && !model.capabilities().proposal {
        log::warn!(
            "model {} has no gradient proposal; using uniform sampling",
            model.model_id()
        );
        method = Method::Uniform;
        fallback = true;
    }
    let original = bleu(&decode_cached(model, cache, &example.source)?, example.reference())?;
    let ctx = Context {
        model,
        cache,
        example,
        original,
    };
    let positions = (0..example.source.len())
        .into_par_iter()
        .map(|i| match method {
            Method::Exact => ctx.exact(i),
            Method::Uniform => ctx.uniform(cfg, i, repeat),
            Method::Stratified => ctx.stratified(cfg, i, repeat),
            Method::Gradient => ctx.gradient(cfg, i, repeat),
        })
        .collect::<Result<Vec<_>>>()?;
    let ranking = Ranking::from_scores(&positions.iter().map(|p| p.tm).collect::<Vec<_>>());
    Ok(RiskReport {
        example_id: example.id,
        original,
        positions,
        ranking,
        config: cfg.clone(),
        fallback,
    })
}

pub fn estimate_risk<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    example: &ParallelExample,
    cfg: &EstimatorConfig,
) -> Result<RiskReport> {
    estimate_risk_repeat(model, cache, example, cfg, 0)
}

pub fn estimate_risk_exact<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    example: &ParallelExample,
) -> Result<RiskReport> {
    estimate_risk(model, cache, example, &EstimatorConfig::new(Method::Exact, 1, 0))
}

pub fn estimate_risk_uniform<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    example: &ParallelExample,
    b: usize,
    seed: u64,
) -> Result<RiskReport> {
    estimate_risk(model, cache, example, &EstimatorConfig::new(Method::Uniform, b, seed))
}

pub fn estimate_risk_stratified<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    example: &ParallelExample,
    pre_budget: usize,
    b: usize,
    seed: u64,
) -> Result<RiskReport> {
    let cfg = EstimatorConfig {
        pre_budget: Some(pre_budget),
        ..EstimatorConfig::new(Method::Stratified, b, seed)
    };
    estimate_risk(model, cache, example, &cfg)
}

pub fn estimate_risk_gradient<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    example: &ParallelExample,
    b: usize,
    seed: u64,
) -> Result<RiskReport> {
    if !model.capabilities().proposal {
        return Err(Error::Capability("proposal"));
    }
    estimate_risk(model, cache, example, &EstimatorConfig::new(Method::Gradient, b, seed))
}

/// Reports for a whole corpus, in corpus order.
pub fn estimate_corpus<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    examples: &[ParallelExample],
    cfg: &EstimatorConfig,
) -> Result<Vec<RiskReport>> {
    examples
        .par_iter()
        .map(|ex| estimate_risk(model, cache, ex, cfg))
        .collect()
}

pub const DEFAULT_BUDGETS: [usize; 9] = [5, 10, 25, 50, 100, 250, 500, 1000, 5000];
pub const DEFAULT_KS: [usize; 3] = [5, 10, 15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationGrid {
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SimulationGrid {
    fn default() -> Self {
        Self {
            methods: Method::BUDGETED.to_vec(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            ks: DEFAULT_KS.to_vec(),
            repeats: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub method: Method,
    pub b: usize,
    pub k: usize,
    pub overlap: f64,
    #[serde(rename = "W")]
    pub w: f64,
    pub sec_per_sentence: f64,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub rows: Vec<SimulationRow>,
    pub exact: Vec<RiskReport>,
    pub exact_sec_per_sentence: f64,
}

impl Simulation {
    pub fn row(&self, method: Method, b: usize, k: usize) -> Option<&SimulationRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.b == b && r.k == k)
    }
}

/// Compares every budgeted estimator in the grid against the exact reports:
/// mean overlap@k over sentences and repeats, mean Kendall's W across repeats
/// and wall time per sentence.
pub fn simulate_estimators<M: TranslationModel + ?Sized>(
    model: &M,
    cache: &DecodeCache,
    examples: &[ParallelExample],
    grid: &SimulationGrid,
) -> Result<Simulation> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if grid.repeats < 2 {
        return Err(Error::InvalidInput("simulation needs at least two repeats".into()));
    }
    let start = Instant::now();
    let exact = estimate_corpus(model, cache, examples, &EstimatorConfig::new(Method::Exact, 1, 0))?;
    let exact_sec_per_sentence = start.elapsed().as_secs_f64() / examples.len() as f64;

    let mut rows = Vec::new();
    for &method in &grid.methods {
        for &b in &grid.budgets {
            let cfg = EstimatorConfig::new(method, b, grid.seed);
            let start = Instant::now();
            let runs: Vec<Vec<Ranking>> = examples
                .par_iter()
                .map(|ex| {
                    (0..grid.repeats)
                        .map(|r| Ok(estimate_risk_repeat(model, cache, ex, &cfg, r)?.ranking))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let sec = start.elapsed().as_secs_f64() / (examples.len() * grid.repeats) as f64;
            let w = runs
                .iter()
                .map(|rs| kendall_w(rs))
                .sum::<Result<f64>>()?
                / runs.len() as f64;
            for &k in &grid.ks {
                let mut total = 0.0;
                for (rs, ex) in runs.iter().zip(&exact) {
                    for r in rs {
                        total += overlap_at_k(r, &ex.ranking, k)?;
                    }
                }
                rows.push(SimulationRow {
                    method,
                    b,
                    k,
                    overlap: total / (runs.len() * grid.repeats) as f64,
                    w,
                    sec_per_sentence: sec,
                });
            }
        }
    }
    Ok(Simulation {
        rows,
        exact,
        exact_sec_per_sentence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Counted;
    use crate::toy::{gen_synth_corpus, SynthSpec, ToyConfig, ToyModel};
    use proptest::prelude::*;

    fn model() -> ToyModel {
        ToyModel::new(&ToyConfig::default()).unwrap()
    }

    fn corpus(m: &ToyModel, n: usize, exact: Option<usize>) -> Vec<ParallelExample> {
        let spec = SynthSpec {
            n_sentences: n,
            exact_barriers: exact,
            ..SynthSpec::default()
        };
        gen_synth_corpus(&spec, m).unwrap().corpus.examples
    }

    #[test]
    fn truncated_mean_examples() {
        let tm = truncated_mean(&[0.10, 0.20, 0.30, 0.40], 0.25).unwrap();
        assert!((tm - 0.35).abs() < 1e-12);
        assert_eq!(truncated_mean(&[0.1, 0.2, 0.25], 0.25), None);
        assert_eq!(truncated_mean(&[], 0.25), None);
        let tm = truncated_mean(&[0.35, 0.35, 0.35], 0.25).unwrap();
        assert!((tm - 0.35).abs() < 1e-15);
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::new(vec![0.0, 0.01, 0.5, 0.99, 1.0, 1.0], 0.5);
        assert_eq!(h.bins.iter().sum::<usize>(), 6);
        assert_eq!(h.bins[0], 2);
        assert_eq!(h.bins[25], 1);
        assert_eq!(h.bins[49], 3);
        assert_eq!(h.orange_band(), vec![0.99, 1.0, 1.0]);
        let rows = h.rows();
        assert_eq!(rows.iter().map(|r| r.1).sum::<usize>(), 6);
        assert!(rows.contains(&(0.98, 3, true)));
        assert!(rows.contains(&(0.5, 1, false)));
    }

    #[test]
    fn pre_budget_schedule() {
        assert_eq!(default_pre_budget(5), 500);
        assert_eq!(default_pre_budget(100), 500);
        assert_eq!(default_pre_budget(250), 500);
        assert_eq!(default_pre_budget(500), 1000);
        assert_eq!(default_pre_budget(1000), 2000);
        assert_eq!(default_pre_budget(5000), 10000);
        let bad = EstimatorConfig {
            pre_budget: Some(10),
            ..EstimatorConfig::new(Method::Stratified, 20, 0)
        };
        assert!(bad.validate().is_err());
        assert!(EstimatorConfig::new(Method::Uniform, 0, 0).validate().is_err());
    }

    #[test]
    fn full_edit_set_scores() {
        let m = model();
        let cache = DecodeCache::in_memory();
        let ex = &corpus(&m, 1, None)[0];
        let edits = edit_set(m.vocab(), &ex.source, 2).unwrap();
        let h = counterfactual_scores(&m, &cache, &ex.source, ex.reference(), &edits).unwrap();
        assert_eq!(h.scores.len(), 48);
    }

    #[test]
    fn barrier_free_sentence_has_no_orange_band() {
        let m = model();
        let cache = DecodeCache::in_memory();
        let spec = SynthSpec {
            n_sentences: 5,
            barrier_prob: 0.0,
            ..SynthSpec::default()
        };
        for ex in gen_synth_corpus(&spec, &m).unwrap().corpus.examples {
            let r = estimate_risk_exact(&m, &cache, &ex).unwrap();
            assert_eq!(r.original, 1.0);
            assert!(r.positions.iter().all(|p| p.tm.is_none()));
            assert!(detect_barriers(&r, 3).is_empty());
        }
    }

    #[test]
    fn planted_barrier_has_orange_band_and_ranks_first() {
        let m = model();
        let cache = DecodeCache::in_memory();
        let spec = SynthSpec {
            n_sentences: 20,
            exact_barriers: Some(1),
            ..SynthSpec::default()
        };
        let synth = gen_synth_corpus(&spec, &m).unwrap();
        for (ex, planted) in synth.corpus.examples.iter().zip(&synth.planted) {
            let r = estimate_risk_exact(&m, &cache, ex).unwrap();
            let p = planted[0];
            assert!(r.positions[p].tm.is_some());
            assert!(!r.positions[p].histogram.as_ref().unwrap().orange_band().is_empty());
            assert!(detect_barriers(&r, 3).contains(&p));
        }
    }

    #[test]
    fn exact_report_shape_and_warm_cache() {
        let m = Counted::new(model());
        let cache = DecodeCache::in_memory();
        let ex = &corpus(m.inner(), 1, None)[0];
        let first = estimate_risk_exact(&m, &cache, ex).unwrap();
        assert_eq!(first.len(), ex.source.len());
        assert!(first
            .positions
            .iter()
            .all(|p| p.evaluated == 48 && p.histogram.as_ref().unwrap().scores.len() == 48));
        let calls = m.decode_calls();
        let second = estimate_risk_exact(&m, &cache, ex).unwrap();
        assert_eq!(first, second);
        assert_eq!(m.decode_calls(), calls);
    }

    #[test]
    fn exhaustive_budgets_reproduce_exact() {
        let m = model();
        let cache = DecodeCache::in_memory();
        for ex in corpus(&m, 5, None) {
            let exact = estimate_risk_exact(&m, &cache, &ex).unwrap().tm_values();
            let uniform = estimate_risk_uniform(&m, &cache, &ex, 48, 3).unwrap().tm_values();
            let strat = estimate_risk_stratified(&m, &cache, &ex, 48, 48, 3).unwrap().tm_values();
            let grad = estimate_risk_gradient(&m, &cache, &ex, 48, 3).unwrap().tm_values();
            let bits = |v: &[Option<f64>]| v.iter().map(|t| t.map(f64::to_bits)).collect::<Vec<_>>();
            assert_eq!(bits(&uniform), bits(&exact));
            assert_eq!(bits(&strat), bits(&exact));
            assert_eq!(bits(&grad), bits(&exact));
        }
    }

    #[test]
    fn budgeted_estimators_are_deterministic_and_respect_budget() {
        let m = model();
        let cache = DecodeCache::in_memory();
        let ex = &corpus(&m, 1, None)[0];
        for method in Method::BUDGETED {
            let cfg = EstimatorConfig::new(method, 7, 42);
            let a = estimate_risk(&m, &cache, ex, &cfg).unwrap();
            let b = estimate_risk(&m, &cache, ex, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.positions.iter().all(|p| p.evaluated == 7 && p.histogram.is_none()));
        }
    }

    #[test]
    fn sampling_streams_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..4)
            .flat_map(|ex| (0..4).flat_map(move |pos| (0..4).map(move |r| position_seed(1, ex, pos, r))))
            .collect();
        assert_eq!(seeds.len(), 64);
        assert_ne!(position_seed(1, 0, 0, 0), position_seed(2, 0, 0, 0));
    }

    #[test]
    fn uniform_samples_nest() {
        let m = model();
        let ex = &corpus(&m, 1, None)[0];
        for b in 1..48 {
            let small = uniform_sample(edit_set(m.vocab(), &ex.source, 3).unwrap(), b, &mut ChaCha8Rng::seed_from_u64(5));
            let large =
                uniform_sample(edit_set(m.vocab(), &ex.source, 3).unwrap(), b + 1, &mut ChaCha8Rng::seed_from_u64(5));
            assert_eq!(small.len(), b);
            assert!(small.iter().all(|e| large.contains(e)));
            assert!(small.last().unwrap().is_delete());
        }
    }

    #[test]
    fn concentrated_proposal_is_always_sampled() {
        let m = model();
        let x = Sentence::new(vec![2, 3, 4, 5]).unwrap();
        let mut probs = vec![0.0; 50];
        probs[17] = 1.0;
        let mut masked = vec![false; 50];
        masked[0] = true;
        masked[1] = true;
        masked[3] = true;
        for seed in 0..50 {
            let edits = edit_set(m.vocab(), &x, 1).unwrap();
            let s = gradient_sample(edits, &probs, &masked, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(s, vec![Edit::substitute(1, 17), Edit::delete(1)]);
        }
    }

    #[test]
    fn gradient_samples_nest_and_skip_masked() {
        let m = model();
        let x = Sentence::new(vec![2, 3, 4, 5]).unwrap();
        let probs: Vec<f64> = (0..50).map(|t| 1.0 + t as f64).collect();
        let mut masked = vec![false; 50];
        masked[..2].fill(true);
        masked[3] = true;
        let mut prev: Vec<Edit> = Vec::new();
        for b in 1..48 {
            let edits = edit_set(m.vocab(), &x, 1).unwrap();
            let s = gradient_sample(edits, &probs, &masked, b, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            assert_eq!(s.len(), b);
            assert!(prev.iter().all(|e| s.contains(e)));
            prev = s;
        }
        let zero = vec![0.0; 50];
        let edits = edit_set(m.vocab(), &x, 1).unwrap();
        assert!(gradient_sample(edits, &zero, &masked, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gradient_falls_back_without_proposal() {
        struct NoGrad(ToyModel);
        impl TranslationModel for NoGrad {
            fn model_id(&self) -> &str {
                "nograd"
            }
            fn vocab(&self) -> &crate::text::Vocab {
                self.0.vocab()
            }
            fn capabilities(&self) -> crate::model::Capabilities {
                crate::model::Capabilities {
                    proposal: false,
                    ..crate::model::Capabilities::ALL
                }
            }
            fn decode(&self, src: &Sentence) -> Result<Sentence> {
                self.0.decode(src)
            }
            fn nll(&self, src: &Sentence, tgt: &Sentence) -> Result<f64> {
                self.0.nll(src, tgt)
            }
            fn n_best(&self, src: &Sentence, k: usize) -> Result<Vec<Sentence>> {
                self.0.n_best(src, k)
            }
        }
        let m = NoGrad(model());
        let cache = DecodeCache::in_memory();
        let ex = &corpus(&m.0, 1, None)[0];
        let cfg = EstimatorConfig::new(Method::Gradient, 10, 1);
        let r = estimate_risk(&m, &cache, ex, &cfg).unwrap();
        assert!(r.fallback);
        let u = estimate_risk(&m, &cache, ex, &EstimatorConfig::new(Method::Uniform, 10, 1)).unwrap();
        assert_eq!(r.positions, u.positions);
        assert!(matches!(
            estimate_risk_gradient(&m, &cache, ex, 10, 1),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn report_json_round_trip() {
        let m = model();
        let cache = DecodeCache::in_memory();
        let ex = &corpus(&m, 1, None)[0];
        let r = estimate_risk_exact(&m, &cache, ex).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: RiskReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn simulation_degenerate_budget_rows() {
        let m = model();
        let cache = DecodeCache::in_memory();
        let examples = corpus(&m, 4, None);
        let grid = SimulationGrid {
            budgets: vec![5, 48],
            repeats: 3,
            ..SimulationGrid::default()
        };
        let sim = simulate_estimators(&m, &cache, &examples, &grid).unwrap();
        assert_eq!(sim.rows.len(), 3 * 2 * 3);
        for method in Method::BUDGETED {
            for k in DEFAULT_KS {
                let row = sim.row(method, 48, k).unwrap();
                let reachable: f64 = examples
                    .iter()
                    .map(|e| e.source.len().min(k) as f64 / k as f64)
                    .sum::<f64>()
                    / examples.len() as f64;
                assert!((row.overlap - reachable).abs() < 1e-12, "{method} {k}");
                assert_eq!(row.w, 1.0);
            }
        }
        assert!(sim.rows.iter().all(|r| (0.0..=1.0).contains(&r.w)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tm_is_order_invariant(
            scores in prop::collection::vec(0.0f64..1.0, 0..60),
            original in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let mut shuffled = scores.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = truncated_mean(&scores, original).map(f64::to_bits);
            let b = truncated_mean(&shuffled, original).map(f64::to_bits);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn tm_lies_above_original(
            scores in prop::collection::vec(0.0f64..1.0, 1..60),
            original in 0.0f64..1.0,
        ) {
            if let Some(tm) = truncated_mean(&scores, original) {
                prop_assert!(tm > original);
                prop_assert!(tm <= scores.iter().copied().fold(0.0, f64::max));
            }
        }

        #[test]
        fn null_positions_rank_last(seed in any::<u64>(), b in 2usize..20) {
            let m = model();
            let cache = DecodeCache::in_memory();
            let spec = SynthSpec { n_sentences: 1, seed, ..SynthSpec::default() };
            let ex = &gen_synth_corpus(&spec, &m).unwrap().corpus.examples[0];
            let r = estimate_risk_uniform(&m, &cache, ex, b, seed).unwrap();
            let nn = r.ranking.non_null();
            for (rank, &p) in r.ranking.positions.iter().enumerate() {
                prop_assert_eq!(rank < nn, r.positions[p].tm.is_some());
            }
        }

        #[test]
        fn enlarging_sample_keeps_scores(seed in any::<u64>(), b in 2usize..47) {
            let m = model();
            let cache = DecodeCache::in_memory();
            let ex = &corpus(&m, 1, None)[0];
            let ctx = Context { model: &m, cache: &cache, example: ex, original: 0.0 };
            let small = uniform_sample(ctx.edits(0).unwrap(), b, &mut ChaCha8Rng::seed_from_u64(seed));
            let large = uniform_sample(ctx.edits(0).unwrap(), b + 1, &mut ChaCha8Rng::seed_from_u64(seed));
            let s_small = score_edits(&m, &cache, &ex.source, ex.reference(), &small).unwrap();
            let s_large = score_edits(&m, &cache, &ex.source, ex.reference(), &large).unwrap();
            for (e, s) in small.iter().zip(&s_small) {
                let idx = large.iter().position(|l| l == e).unwrap();
                prop_assert_eq!(s_large[idx].to_bits(), s.to_bits());
            }
        }
    }
}
