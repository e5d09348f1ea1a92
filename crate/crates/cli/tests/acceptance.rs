//! Acceptance run: one PASS/FAIL line per criterion, with the measured
//! values and the wall time of each check. Exits non-zero if any fail.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use barrier_core::analytics::{ibm1_em, inverse_frequency, overlap_vs_global};
use barrier_core::estimators::{
    estimate_corpus, estimate_risk_exact, estimate_risk_stratified, estimate_risk_uniform,
    simulate_estimators, Simulation, SimulationGrid, DEFAULT_BUDGETS, DEFAULT_KS,
};
use barrier_core::rerank::{coverage, diversity, oracle, rerank_report};
use barrier_core::text::edit_set_size;
use barrier_core::toy::gen_synth_corpus;
use barrier_core::{
    kendall_w, overlap_at_k, sentence_bleu, CandidateSet, DecodeCache, EstimatorConfig, Method,
    ParallelExample, Provenance, Ranking, Sentence, SynthSpec, ToyConfig, ToyModel, TokenId,
    TranslationModel,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy() -> &'static ToyModel {
    static M: OnceLock<ToyModel> = OnceLock::new();
    M.get_or_init(|| ToyModel::new(&ToyConfig::default()).unwrap())
}

fn corpus(spec: &SynthSpec) -> Vec<ParallelExample> {
    gen_synth_corpus(spec, toy()).unwrap().corpus.examples
}

fn toy_corpus() -> &'static [ParallelExample] {
    static C: OnceLock<Vec<ParallelExample>> = OnceLock::new();
    C.get_or_init(|| corpus(&SynthSpec::default()))
}

fn simulation() -> &'static Simulation {
    static S: OnceLock<Simulation> = OnceLock::new();
    S.get_or_init(|| {
        let grid = SimulationGrid {
            seed: 17,
            ..SimulationGrid::default()
        };
        simulate_estimators(toy(), &DecodeCache::in_memory(), toy_corpus(), &grid).unwrap()
    })
}

fn same_bits(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.map(f64::to_bits) == y.map(f64::to_bits))
}

fn exact_degeneracy() -> Outcome {
    let m = toy();
    let cache = DecodeCache::in_memory();
    let mut checked = 0;
    for ex in toy_corpus() {
        let exact = estimate_risk_exact(m, &cache, ex).map_err(|e| e.to_string())?;
        let full = edit_set_size(m.vocab(), &ex.source, 0);
        let uni = estimate_risk_uniform(m, &cache, ex, full, 3).map_err(|e| e.to_string())?;
        let strat = estimate_risk_stratified(m, &cache, ex, full, full, 3).map_err(|e| e.to_string())?;
        ensure(same_bits(&exact.tm_values(), &uni.tm_values()), || format!("uniform differs on example {}", ex.id))?;
        ensure(same_bits(&exact.tm_values(), &strat.tm_values()), || {
            format!("stratified differs on example {}", ex.id)
        })?;
        checked += ex.source.len();
    }
    Ok(format!("{} sentences, {checked} positions bit-identical", toy_corpus().len()))
}

fn planted_recovery() -> Outcome {
    let m = toy();
    let spec = SynthSpec {
        n_sentences: 200,
        exact_barriers: Some(1),
        seed: 5,
        ..SynthSpec::default()
    };
    let synth = gen_synth_corpus(&spec, m).unwrap();
    let cache = DecodeCache::in_memory();
    let w = m.config().window;
    let (mut top3, mut outranked) = (0usize, 0usize);
    for (ex, planted) in synth.corpus.examples.iter().zip(&synth.planted) {
        let p = planted[0];
        let r = estimate_risk_exact(m, &cache, ex).map_err(|e| e.to_string())?;
        if r.ranking.top_scored(3).contains(&p) {
            top3 += 1;
        }
        let order = r.ranking.top(r.len());
        let at = order.iter().position(|&q| q == p).unwrap();
        if order[..at].iter().any(|&q| q.abs_diff(p) > w) {
            outranked += 1;
        }
    }
    let n = synth.corpus.len() as f64;
    let (rec, out) = (top3 as f64 / n, outranked as f64 / n);
    ensure(rec >= 0.9, || format!("top-3 recovery {rec:.3} < 0.9"))?;
    ensure(out < 0.05, || format!("far positions outrank barrier in {out:.3} >= 0.05"))?;
    Ok(format!("top-3 recovery {rec:.3}, far-position outrank rate {out:.3}"))
}

fn accuracy_trend() -> Outcome {
    let sim = simulation();
    let mut notes = Vec::new();
    for method in Method::BUDGETED {
        for k in DEFAULT_KS {
            let series: Vec<f64> = DEFAULT_BUDGETS
                .iter()
                .map(|&b| sim.row(method, b, k).map(|r| r.overlap).ok_or("missing row"))
                .collect::<Result<_, _>>()?;
            for (pair, bs) in series.windows(2).zip(DEFAULT_BUDGETS.windows(2)) {
                ensure(pair[1] >= pair[0] - 1e-12, || {
                    format!("{method} overlap@{k} drops from {:.4} at b={} to {:.4} at b={}", pair[0], bs[0], pair[1], bs[1])
                })?;
            }
        }
    }
    for k in DEFAULT_KS {
        let o = sim.row(Method::Uniform, 100, k).unwrap().overlap;
        ensure(o >= 0.7, || format!("uniform b=100 overlap@{k} = {o:.4} < 0.7"))?;
        notes.push(format!("@{k}={o:.3}"));
    }
    Ok(format!(
        "non-decreasing for 3 methods x 3 k over 9 budgets; uniform b=100 {}",
        notes.join(" ")
    ))
}

fn variance_ordering() -> Outcome {
    let sim = simulation();
    let w = |m| sim.row(m, 100, 5).unwrap().w;
    let (ws, wu) = (w(Method::Stratified), w(Method::Uniform));
    ensure(ws >= wu - 0.02, || format!("W(stratified) {ws:.4} < W(uniform) {wu:.4} - 0.02"))?;
    for r in &sim.rows {
        ensure((0.0..=1.0).contains(&r.w), || format!("W out of range: {r:?}"))?;
    }
    let full = edit_set_size(toy().vocab(), &toy_corpus()[0].source, 0);
    for r in sim.rows.iter().filter(|r| r.b >= full) {
        ensure(r.w == 1.0, || format!("degenerate budget row has W = {}: {r:?}", r.w))?;
    }
    let small: Vec<String> = [5, 10, 25]
        .iter()
        .map(|&b| {
            let w = |m| sim.row(m, b, 5).unwrap().w;
            format!("b={b} {:.3}/{:.3}/{:.3}", w(Method::Uniform), w(Method::Stratified), w(Method::Gradient))
        })
        .collect();
    Ok(format!(
        "b=100 W(stratified) {ws:.4}, W(uniform) {wu:.4}; degenerate rows W = 1; uniform/stratified/gradient {}",
        small.join(", ")
    ))
}

/// Loss recomputed from the embedding rows with only the input-side row of
/// `token` replaced, independent of the model's own forward pass.
fn forward_nll(m: &ToyModel, x: &[TokenId], y: &[TokenId], token: TokenId, row: &[f64]) -> f64 {
    let cfg = m.config();
    let input = |t: TokenId| if t == token { row.to_vec() } else { m.embedding(t).to_vec() };
    let mut loss = 0.0;
    for j in 0..x.len().min(y.len()) {
        let mut best: Option<(usize, f64)> = None;
        let lo = j.saturating_sub(cfg.window);
        for (k, &t) in x.iter().enumerate().take(j + cfg.window + 1).skip(lo) {
            let iota = m.interference(t);
            if k != j && best.is_none_or(|(_, b)| iota > b) {
                best = Some((k, iota));
            }
        }
        let own = input(x[j]);
        let h: Vec<f64> = match best {
            Some((k, mu)) => own.iter().zip(input(x[k])).map(|(a, b)| (1.0 - mu) * a + mu * b).collect(),
            None => own,
        };
        let z: Vec<f64> = (0..cfg.n_vocab as TokenId)
            .map(|u| cfg.temperature * h.iter().zip(m.embedding(u)).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - z[y[j] as usize];
    }
    loss + x.len().abs_diff(y.len()) as f64 * (cfg.n_vocab as f64).ln()
}

fn gradient_correctness() -> Outcome {
    let m = toy();
    let n = m.config().n_vocab as TokenId;
    let barriers = m.barriers().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let len: usize = rng.random_range(2..12);
        let x: Vec<TokenId> = (0..len)
            .map(|_| {
                if rng.random_bool(0.25) {
                    barriers[rng.random_range(0..barriers.len())]
                } else {
                    rng.random_range(2..n)
                }
            })
            .collect();
        let ylen = rng.random_range(len.saturating_sub(2).max(1)..len + 2);
        let y: Vec<TokenId> = (0..ylen).map(|_| rng.random_range(2..n)).collect();
        let i = rng.random_range(0..len);
        let (xs, ys) = (Sentence::new(x.clone()).unwrap(), Sentence::new(y.clone()).unwrap());
        let analytic = m.toy_embed_grad(&xs, &ys, i).map_err(|e| e.to_string())?;
        let base = m.embedding(x[i]).to_vec();
        let numeric: Vec<f64> = (0..base.len())
            .map(|d| {
                let (mut plus, mut minus) = (base.clone(), base.clone());
                plus[d] += h;
                minus[d] -= h;
                (forward_nll(m, &x, &y, x[i], &plus) - forward_nll(m, &x, &y, x[i], &minus)) / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff / scale);
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:.3e}"))?;
    Ok(format!("100 instances, worst relative error {worst:.2e}"))
}

fn set(source: &[TokenId], cands: &[&[TokenId]]) -> CandidateSet {
    CandidateSet {
        source: Sentence::new(source.to_vec()).unwrap(),
        candidates: cands.iter().map(|c| Sentence::new(c.to_vec()).unwrap()).collect(),
        provenance: Provenance::Topk,
        random_positions: false,
    }
}

fn ranking_from_top(n: usize, top: &[usize]) -> Ranking {
    let mut scores = vec![Some(0.0); n];
    for (r, &p) in top.iter().enumerate() {
        scores[p] = Some(10.0 - r as f64);
    }
    Ranking::from_scores(&scores)
}

fn metric_suite() -> Outcome {
    let err = |e: barrier_core::Error| e.to_string();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;

    let y = [5, 6, 7, 8, 5, 9];
    ensure(sentence_bleu(&y, &y).map_err(err)?.value == 1.0, || "BLEU identity != 1".into())?;
    ensure(sentence_bleu(&[10, 11, 12], &y).map_err(err)?.value == 0.0, || "BLEU disjoint != 0".into())?;
    // Unigrams unsmoothed, higher orders add one to matches and candidates;
    // brevity penalty exp(1 - 5/4).
    let matches: [f64; 4] = [4.0, 3.0, 2.0, 1.0];
    let candidates: [f64; 4] = [4.0, 3.0, 2.0, 1.0];
    let log_p: f64 = (0..4)
        .map(|n| {
            let smooth = if n == 0 { 0.0 } else { 1.0 };
            ((matches[n] + smooth) / (candidates[n] + smooth)).ln()
        })
        .sum();
    let hand = (1.0 - 5.0f64 / 4.0).exp() * (log_p / 4.0).exp();
    let got = sentence_bleu(&[1, 2, 3, 4], &[1, 2, 3, 4, 5]).map_err(err)?.value;
    ensure(close(got, hand), || format!("BLEU hand example {got} != {hand}"))?;

    let a = ranking_from_top(6, &[1, 2, 3]);
    let b = ranking_from_top(6, &[1, 2, 5]);
    ensure(close(overlap_at_k(&a, &b, 3).map_err(err)?, 2.0 / 3.0), || "overlap@3 hand example".into())?;
    ensure(overlap_at_k(&a, &a, 4).map_err(err)? == 1.0, || "overlap identity".into())?;
    let c = ranking_from_top(6, &[0, 4, 5]);
    ensure(overlap_at_k(&a, &c, 3).map_err(err)? == 0.0, || "overlap disjoint".into())?;

    let up = Ranking::from_scores(&[Some(3.0), Some(2.0), Some(1.0)]);
    let down = Ranking::from_scores(&[Some(1.0), Some(2.0), Some(3.0)]);
    ensure(close(kendall_w(&[up.clone(), up.clone()]).map_err(err)?, 1.0), || "W identical".into())?;
    ensure(close(kendall_w(&[up, down]).map_err(err)?, 0.0), || "W reversed".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shuffled: Vec<Ranking> = (0..25)
        .map(|_| {
            let mut v: Vec<Option<f64>> = (0..20).map(|i| Some(i as f64)).collect();
            v.shuffle(&mut rng);
            Ranking::from_scores(&v)
        })
        .collect();
    let w_rand = kendall_w(&shuffled).map_err(err)?;
    ensure(w_rand < 0.2, || format!("W of shuffled rankings {w_rand}"))?;

    let pair = set(&[2, 3], &[&[4, 5, 6, 7], &[4, 5, 6, 7]]);
    ensure(diversity(&pair).map_err(err)? == 1.0, || "identical-pair diversity != 1".into())?;
    let reference = Sentence::new(vec![4, 5, 6, 7]).unwrap();
    let member = set(&[2, 3], &[&[9, 9, 9], &[4, 5, 6, 7]]);
    ensure(oracle(&member, &reference).map_err(err)? == 1.0, || "ref-membership oracle != 1".into())?;
    ensure(coverage(&member, &reference) == 1.0, || "ref-membership coverage != 1".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let random_set = |rng: &mut ChaCha8Rng| -> Vec<Vec<TokenId>> {
        (0..rng.random_range(1..5))
            .map(|_| (0..rng.random_range(1..8)).map(|_| rng.random_range(2..20)).collect())
            .collect()
    };
    for trial in 0..1000 {
        let r: Vec<TokenId> = (0..rng.random_range(1..10)).map(|_| rng.random_range(2..20)).collect();
        let reference = Sentence::new(r).unwrap();
        let (a, b) = (random_set(&mut rng), random_set(&mut rng));
        let union: Vec<Vec<TokenId>> = a.iter().chain(&b).cloned().collect();
        let mk = |v: &[Vec<TokenId>]| set(&[2], &v.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let cu = coverage(&mk(&union), &reference);
        ensure(cu >= coverage(&mk(&a), &reference) && cu >= coverage(&mk(&b), &reference), || {
            format!("coverage not monotone under union in trial {trial}")
        })?;
    }
    Ok(format!("BLEU, overlap, W (shuffled W = {w_rand:.3}), oracle/coverage/diversity; 1000 union trials"))
}

fn baseline_randomness() -> Outcome {
    let reports = &simulation().exact;
    let sources: Vec<Sentence> = toy_corpus().iter().map(|e| e.source.clone()).collect();
    let train: Vec<Sentence> = corpus(&SynthSpec {
        n_sentences: 1000,
        seed: 99,
        ..SynthSpec::default()
    })
    .into_iter()
    .map(|e| e.source)
    .collect();
    let stat = inverse_frequency(&train).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for k in DEFAULT_KS {
        let g = overlap_vs_global(reports, &sources, &stat, k).map_err(|e| e.to_string())?;
        let gap = (g.overlap - g.random_baseline).abs();
        ensure(gap <= 0.1, || format!("k={k}: overlap {:.4} vs random {:.4}", g.overlap, g.random_baseline))?;
        notes.push(format!("@{k} {:.3}/{:.3}", g.overlap, g.random_baseline));
    }
    Ok(format!("inverse frequency vs random: {}", notes.join(", ")))
}

fn rerank_direction() -> Outcome {
    let m = toy();
    let examples = corpus(&SynthSpec {
        n_sentences: 200,
        seed: 31,
        ..SynthSpec::default()
    });
    let cache = DecodeCache::in_memory();
    let cfg = EstimatorConfig::new(Method::Exact, 1, 0);
    let reports = estimate_corpus(m, &cache, &examples, &cfg).map_err(|e| e.to_string())?;
    let t = rerank_report(m, &cache, &examples, &reports, 10, 3, 4).map_err(|e| e.to_string())?;
    let (top, bar) = (&t.topk, &t.barrier);
    let (dt, db) = (top.diversity.unwrap_or(f64::NAN), bar.diversity.unwrap_or(f64::NAN));
    ensure(bar.oracle > top.oracle, || format!("oracle {:.4} <= {:.4}", bar.oracle, top.oracle))?;
    ensure(bar.coverage > top.coverage, || format!("coverage {:.4} <= {:.4}", bar.coverage, top.coverage))?;
    ensure(db < dt, || format!("diversity {db:.4} >= {dt:.4}"))?;
    Ok(format!(
        "oracle {:.3} vs {:.3}, coverage {:.3} vs {:.3}, diversity {db:.3} vs {dt:.3}",
        bar.oracle, top.oracle, bar.coverage, top.coverage
    ))
}

fn ibm1() -> Outcome {
    let s = |v: &[TokenId]| Sentence::new(v.to_vec()).unwrap();
    let (a, b, x, y) = (2, 3, 4, 5);
    let pairs = vec![(s(&[a]), s(&[x])), (s(&[a, b]), s(&[x, y])), (s(&[b]), s(&[y]))];
    let model = ibm1_em(&pairs, 10).map_err(|e| e.to_string())?;
    let ll = &model.log_likelihoods;
    ensure(ll.windows(2).all(|w| w[1] >= w[0] - 1e-12), || format!("log-likelihood decreased: {ll:?}"))?;
    let (pxa, pyb) = (model.table.prob(a, x), model.table.prob(b, y));
    ensure(pxa > 0.9 && pyb > 0.9, || format!("phi(x|a) = {pxa}, phi(y|b) = {pyb}"))?;

    let toy_pairs: Vec<(Sentence, Sentence)> = toy_corpus()
        .iter()
        .map(|e| (e.source.clone(), e.reference().clone()))
        .collect();
    let big = ibm1_em(&toy_pairs, 10).map_err(|e| e.to_string())?;
    let ll = &big.log_likelihoods;
    ensure(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9), || "toy-corpus log-likelihood decreased".into())?;
    Ok(format!("phi(x|a) = {pxa:.4}, phi(y|b) = {pyb:.4}; log-likelihood monotone on hand and toy corpora"))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_barrier-probe"))
        .args(args)
        .env_remove("BARRIER_PROBE_CACHE")
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn cache_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    cli(&["synth", "--toy-seed", "7", "--sentences", "20", "--output", &p("corpus")])?;
    let base = |out: &str| {
        vec![
            "detect".to_string(),
            "--toy-file".into(),
            p("corpus/toy.json"),
            "--source".into(),
            p("corpus/source.txt"),
            "--reference".into(),
            p("corpus/reference.txt"),
            "--seed".into(),
            "13".into(),
            "--output".into(),
            p(out),
        ]
    };
    let run = |out: &str, extra: &[&str]| {
        let mut args = base(out);
        args.extend(extra.iter().map(|s| s.to_string()));
        cli(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let cache = p("cache.jsonl");
    run("cold", &["--cache", &cache])?;
    run("warm", &["--cache", &cache])?;
    let reports = |d: &str| read(&dir.path().join(d).join("reports.jsonl"));
    ensure(reports("cold")? == reports("warm")?, || "warm-cache reports differ".into())?;
    let summary: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("warm/summary.json"))?).map_err(|e| e.to_string())?;
    ensure(summary["model_calls"] == 0, || format!("warm run made {} model calls", summary["model_calls"]))?;
    ensure(summary["cache_hit_rate"] == 1.0, || "warm hit rate below 1".into())?;

    let mut seen = BTreeSet::new();
    for (name, jobs) in [("j1", "1"), ("j1b", "1"), ("j2", "2"), ("j8", "8")] {
        run(name, &["--jobs", jobs])?;
        seen.insert(reports(name)?);
    }
    seen.insert(reports("cold")?);
    ensure(seen.len() == 1, || format!("{} distinct report files across runs and --jobs", seen.len()))?;
    Ok("warm rerun byte-identical with 0 model calls; identical across runs and --jobs 1/2/8".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("exact-degeneracy", Duration::from_secs(120), exact_degeneracy),
        ("planted-barrier-recovery", Duration::from_secs(300), planted_recovery),
        ("estimator-accuracy-trend", Duration::from_secs(600), accuracy_trend),
        ("variance-ordering", Duration::from_secs(600), variance_ordering),
        ("gradient-correctness", Duration::MAX, gradient_correctness),
        ("metric-unit-suite", Duration::MAX, metric_suite),
        ("baseline-near-randomness", Duration::MAX, baseline_randomness),
        ("rerank-direction", Duration::MAX, rerank_direction),
        ("ibm1-em", Duration::MAX, ibm1),
        ("cache-determinism", Duration::MAX, cache_determinism),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if took > limit {
                Err(format!("took {took:.1?}, limit {limit:?}"))
            } else {
                Ok(detail)
            }
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{took:.2?}]");
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
