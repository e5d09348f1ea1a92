//! One function per subcommand. Each reads its inputs through a
//! [`RunConfig`], writes flat files under the output directory and returns
//! a short summary for logging.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use barrier_core::analytics::{
    barrier_rate, check_alignments, cross_run_overlap, dep_recall, exception_rate, format_pharaoh,
    ibm1_em, inverse_frequency, overlap_vs_global, pos_distribution, read_alignments,
    translation_entropy, viterbi_align, AlignmentSet, BarrierLabel, GlobalWordStat, Ibm1,
};
use barrier_core::estimators::{estimate_corpus, simulate_estimators, SimulationGrid};
use barrier_core::rerank::rerank_report;
use barrier_core::text::{load_parallel, read_depths, read_lines, read_tsv};
use barrier_core::toy::gen_synth_corpus;
use barrier_core::{
    Counted, DecodeCache, Method, ParallelExample, ProcessModel, RiskReport, Sentence, ToyConfig,
    ToyModel, TranslationModel, Vocab,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HISTOGRAMS_FILE: &str = "histograms.csv";
pub const SIMULATION_FILE: &str = "simulation.csv";
pub const KENDALL_FILE: &str = "kendall_w.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const EXACT_REPORTS_FILE: &str = "exact_reports.jsonl";
pub const POS_FILE: &str = "pos_distribution.csv";
pub const DEP_FILE: &str = "dep_recall.csv";
pub const GLOBAL_FILE: &str = "overlap_vs_global.csv";
pub const RATE_FILE: &str = "barrier_rate.csv";
pub const CROSS_FILE: &str = "cross_run_overlap.csv";
pub const RERANK_FILE: &str = "rerank.csv";
pub const LEX_FILE: &str = "lex.tsv";
pub const ALIGN_FILE: &str = "alignments.txt";
pub const LOGLIK_FILE: &str = "loglik.csv";

/// Vocabulary size cap used when no model supplies one.
const CORPUS_VOCAB_LIMIT: usize = 1 << 20;

/// Builds the configured model.
pub fn load_model(cfg: &RunConfig) -> CliResult<Box<dyn TranslationModel>> {
    cfg.validate_model()?;
    let m = &cfg.model;
    if let Some(toy) = &m.toy {
        return Ok(Box::new(ToyModel::new(toy)?));
    }
    if let Some(path) = &m.toy_file {
        let toy = ToyConfig::load(path)
            .map_err(|e| CliError::Config(format!("toy model {}: {e}", path.display())))?;
        return Ok(Box::new(ToyModel::new(&toy)?));
    }
    let argv = m.command.clone().unwrap_or_default();
    let model = ProcessModel::spawn(argv, m.max_in_flight).map_err(CliError::Model)?;
    Ok(Box::new(model))
}

fn load_toy(cfg: &RunConfig) -> CliResult<ToyModel> {
    cfg.validate_model()?;
    let toy = match (&cfg.model.toy, &cfg.model.toy_file) {
        (Some(t), _) => t.clone(),
        (None, Some(path)) => ToyConfig::load(path)
            .map_err(|e| CliError::Config(format!("toy model {}: {e}", path.display())))?,
        _ => return Err(CliError::Config("this command needs a toy model".into())),
    };
    Ok(ToyModel::new(&toy)?)
}

fn open_cache(cfg: &RunConfig, flag: Option<&Path>) -> CliResult<DecodeCache> {
    match cfg.cache_path(flag) {
        Some(path) => Ok(DecodeCache::open(&path)?),
        None => Ok(DecodeCache::in_memory()),
    }
}

fn load_examples(cfg: &RunConfig, vocab: &Vocab) -> CliResult<Vec<ParallelExample>> {
    let source = cfg.source_path()?;
    if cfg.corpus.references.is_empty() {
        return Err(CliError::Config("corpus.references is empty".into()));
    }
    let refs: Vec<&Path> = cfg.corpus.references.iter().map(PathBuf::as_path).collect();
    for p in std::iter::once(source).chain(refs.iter().copied()) {
        fs::metadata(p).map_err(CliError::io(format!("reading {}", p.display())))?;
    }
    let examples = load_parallel(vocab, source, &refs)?;
    if examples.is_empty() {
        return Err(barrier_core::Error::EmptyCorpus.into());
    }
    Ok(examples)
}

/// Vocabulary of the configured model, or one built from the corpus files
/// when no model is configured.
fn vocab_for(cfg: &RunConfig, model: Option<&dyn TranslationModel>) -> CliResult<Vocab> {
    if let Some(m) = model {
        return Ok(m.vocab().clone());
    }
    let mut lines = read_lines(cfg.source_path()?)?;
    for r in &cfg.corpus.references {
        lines.extend(read_lines(r)?);
    }
    Ok(Vocab::build(&lines, CORPUS_VOCAB_LIMIT)?)
}

fn has_model(cfg: &RunConfig) -> bool {
    let m = &cfg.model;
    m.toy.is_some() || m.toy_file.is_some() || m.command.is_some()
}

fn create_output(cfg: &RunConfig) -> CliResult<&Path> {
    fs::create_dir_all(&cfg.output).map_err(CliError::io(format!("creating {}", cfg.output.display())))?;
    Ok(&cfg.output)
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    let f = File::create(path).map_err(CliError::io(format!("creating {}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(CliError::from)
}

pub fn write_reports(path: &Path, reports: &[RiskReport]) -> CliResult<()> {
    let mut w = create_file(path)?;
    let ctx = || format!("writing {}", path.display());
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(CliError::io(ctx()))?;
    }
    w.flush().map_err(CliError::io(ctx()))
}

pub fn read_reports(path: &Path) -> CliResult<Vec<RiskReport>> {
    let f = File::open(path).map_err(CliError::io(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(CliError::io(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| {
            CliError::Data(barrier_core::Error::Format(format!("{}: line {}: {e}", path.display(), n + 1)))
        })?;
        out.push(r);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(CliError::io(format!("writing {}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectSummary {
    pub model_id: String,
    pub method: Method,
    pub b: usize,
    pub pre_budget: usize,
    pub seed: u64,
    pub sentences: usize,
    pub positions: usize,
    pub scored_positions: usize,
    pub fallbacks: usize,
    pub model_calls: u64,
    pub decode_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_hit_rate: f64,
    pub cache_entries: usize,
    pub seconds: f64,
}

/// Scores every corpus position and writes one report per sentence.
pub fn detect(cfg: &RunConfig, cache_flag: Option<&Path>) -> CliResult<DetectSummary> {
    let model = load_model(cfg)?;
    let examples = load_examples(cfg, model.vocab())?;
    let cache = open_cache(cfg, cache_flag)?;
    let est = cfg.estimator_config();
    est.validate()?;
    let out = create_output(cfg)?;

    let counted = Counted::new(model.as_ref());
    let start = Instant::now();
    let reports = estimate_corpus(&counted, &cache, &examples, &est)?;
    let seconds = start.elapsed().as_secs_f64();

    write_reports(&out.join(REPORTS_FILE), &reports)?;
    if est.method == Method::Exact {
        write_histograms(&out.join(HISTOGRAMS_FILE), &reports)?;
    }
    let stats = cache.stats();
    let summary = DetectSummary {
        model_id: model.model_id().to_string(),
        method: est.method,
        b: est.b,
        pre_budget: est.pre_budget(),
        seed: est.seed,
        sentences: reports.len(),
        positions: reports.iter().map(RiskReport::len).sum(),
        scored_positions: reports
            .iter()
            .flat_map(|r| &r.positions)
            .filter(|p| p.tm.is_some())
            .count(),
        fallbacks: reports.iter().filter(|r| r.fallback).count(),
        model_calls: counted.total_calls(),
        decode_calls: counted.decode_calls(),
        cache_hits: stats.hits,
        cache_misses: stats.misses,
        cache_hit_rate: stats.hit_rate(),
        cache_entries: stats.entries,
        seconds,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn write_histograms(path: &Path, reports: &[RiskReport]) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["example_id", "position", "bin_low", "count", "in_orange"])?;
    for r in reports {
        for p in &r.positions {
            let Some(h) = &p.histogram else { continue };
            for (low, count, orange) in h.rows() {
                w.write_record([
                    r.example_id.to_string(),
                    p.position.to_string(),
                    low.to_string(),
                    count.to_string(),
                    orange.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(CliError::io(format!("writing {}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub sentences: usize,
    pub rows: usize,
    pub exact_sec_per_sentence: f64,
}

/// Compares budgeted estimators against exact detection on the corpus.
pub fn simulate(cfg: &RunConfig, cache_flag: Option<&Path>) -> CliResult<SimulateSummary> {
    let model = load_model(cfg)?;
    let examples = load_examples(cfg, model.vocab())?;
    let cache = open_cache(cfg, cache_flag)?;
    let s = &cfg.simulation;
    let grid = SimulationGrid {
        methods: s.methods.clone(),
        budgets: s.budgets.clone(),
        ks: s.ks.clone(),
        repeats: s.repeats,
        seed: cfg.seed,
    };
    let out = create_output(cfg)?;
    let sim = simulate_estimators(model.as_ref(), &cache, &examples, &grid)?;

    let path = out.join(SIMULATION_FILE);
    let mut w = csv_writer(&path)?;
    for row in &sim.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;

    let path = out.join(KENDALL_FILE);
    let mut kw = csv_writer(&path)?;
    kw.write_record(["method", "b", "W"])?;
    let path_t = out.join(TIMING_FILE);
    let mut tw = csv_writer(&path_t)?;
    tw.write_record(["method", "b", "sec_per_sentence"])?;
    tw.write_record(["exact".to_string(), String::new(), sim.exact_sec_per_sentence.to_string()])?;
    let mut seen = Vec::new();
    for row in &sim.rows {
        if seen.contains(&(row.method, row.b)) {
            continue;
        }
        seen.push((row.method, row.b));
        kw.write_record([row.method.name().to_string(), row.b.to_string(), row.w.to_string()])?;
        tw.write_record([
            row.method.name().to_string(),
            row.b.to_string(),
            row.sec_per_sentence.to_string(),
        ])?;
    }
    kw.flush().map_err(CliError::io(format!("writing {}", path.display())))?;
    tw.flush().map_err(CliError::io(format!("writing {}", path_t.display())))?;
    write_reports(&out.join(EXACT_REPORTS_FILE), &sim.exact)?;

    Ok(SimulateSummary {
        sentences: examples.len(),
        rows: sim.rows.len(),
        exact_sec_per_sentence: sim.exact_sec_per_sentence,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AnalyzeSummary {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
}

impl AnalyzeSummary {
    fn wrote(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    fn skip(&mut self, name: &str, why: &str) {
        log::warn!("skipping {name}: {why}");
        self.skipped.push(name.to_string());
    }
}

fn sentences(examples: &[ParallelExample]) -> Vec<Sentence> {
    examples.iter().map(|e| e.source.clone()).collect()
}

fn pairs(examples: &[ParallelExample]) -> Vec<(Sentence, Sentence)> {
    examples
        .iter()
        .map(|e| (e.source.clone(), e.reference().clone()))
        .collect()
}

fn viterbi_all(ibm: &Ibm1, pairs: &[(Sentence, Sentence)]) -> AlignmentSet {
    pairs.iter().map(|(s, t)| viterbi_align(&ibm.table, s, t)).collect()
}

/// Characterizes the barriers found by an earlier `detect` run. Analyses
/// whose inputs are missing are skipped with a warning.
pub fn analyze(cfg: &RunConfig) -> CliResult<AnalyzeSummary> {
    let model = if has_model(cfg) { Some(load_model(cfg)?) } else { None };
    let vocab = vocab_for(cfg, model.as_deref())?;
    let examples = load_examples(cfg, &vocab)?;
    let reports = read_reports(&cfg.reports_path())?;
    let a = &cfg.analysis;
    let out = create_output(cfg)?.to_path_buf();
    let mut summary = AnalyzeSummary::default();
    let srcs = sentences(&examples);

    match &cfg.corpus.pos_tags {
        None => summary.skip(POS_FILE, "no part-of-speech tags configured"),
        Some(path) => {
            let tags = read_tsv(path)?;
            let path = out.join(POS_FILE);
            let mut w = csv_writer(&path)?;
            w.write_record(["k", "tag", "barrier", "base"])?;
            for &k in &a.ks {
                for row in pos_distribution(&reports, &tags, k)? {
                    w.write_record([k.to_string(), row.tag, row.barrier.to_string(), row.base.to_string()])?;
                }
            }
            w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;
            summary.wrote(POS_FILE);
        }
    }

    match &cfg.corpus.dep_depths {
        None => summary.skip(DEP_FILE, "no dependency depths configured"),
        Some(path) => {
            let depths = read_depths(path)?;
            let path = out.join(DEP_FILE);
            let mut w = csv_writer(&path)?;
            for &k in &a.ks {
                for &d in &a.depths {
                    w.serialize(dep_recall(&reports, &depths, k, d)?)?;
                }
            }
            w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;
            summary.wrote(DEP_FILE);
        }
    }

    let pairs = pairs(&examples);
    let ibm = ibm1_em(&pairs, cfg.align.iterations)?;
    let mut stats: Vec<GlobalWordStat> = Vec::new();
    let train = match &a.train_source {
        Some(p) => read_lines(p)?
            .iter()
            .map(|l| vocab.encode(l))
            .collect::<barrier_core::Result<Vec<_>>>()?,
        None => srcs.clone(),
    };
    stats.push(inverse_frequency(&train)?);
    stats.push(translation_entropy(&ibm.table));
    match &model {
        None => summary.skip("exception statistic", "no model configured"),
        Some(m) => {
            let links = match &a.alignments {
                Some(p) => {
                    let set = read_alignments(p)?;
                    check_alignments(&set, &pairs)?;
                    set
                }
                None => viterbi_all(&ibm, &pairs),
            };
            stats.push(exception_rate(m.as_ref(), &examples, &links, a.p0)?);
        }
    }
    let path = out.join(GLOBAL_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["stat", "k", "overlap"])?;
    for &k in &a.ks {
        let mut baseline = None;
        for stat in &stats {
            let g = overlap_vs_global(&reports, &srcs, stat, k)?;
            baseline = Some(g.random_baseline);
            w.write_record([stat.kind.name().to_string(), k.to_string(), g.overlap.to_string()])?;
        }
        if let Some(b) = baseline {
            w.write_record(["random".to_string(), k.to_string(), b.to_string()])?;
        }
    }
    w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;
    summary.wrote(GLOBAL_FILE);

    let path = out.join(RATE_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["k", "token", "word", "contexts", "detected", "rate", "label"])?;
    for &k in &a.ks {
        for row in barrier_rate(&reports, &srcs, k, a.min_contexts)? {
            let label = match row.label {
                Some(BarrierLabel::ContextAgnostic) => "context_agnostic",
                Some(BarrierLabel::ContextSensitive) => "context_sensitive",
                None => "",
            };
            w.write_record([
                k.to_string(),
                row.token.to_string(),
                vocab.token(row.token).unwrap_or_default().to_string(),
                row.contexts.to_string(),
                row.detected.to_string(),
                row.rate.to_string(),
                label.to_string(),
            ])?;
        }
    }
    w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;
    summary.wrote(RATE_FILE);

    match &a.compare_reports {
        None => summary.skip(CROSS_FILE, "no second report set configured"),
        Some(p) => {
            let other = read_reports(p)?;
            let path = out.join(CROSS_FILE);
            let mut w = csv_writer(&path)?;
            w.write_record(["k", "overlap"])?;
            for &k in &a.ks {
                w.write_record([k.to_string(), cross_run_overlap(&reports, &other, k)?.to_string()])?;
            }
            w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;
            summary.wrote(CROSS_FILE);
        }
    }

    if summary.written.is_empty() {
        return Err(CliError::Data(barrier_core::Error::InvalidInput(
            "every analysis was skipped".into(),
        )));
    }
    Ok(summary)
}

/// Compares barrier-edit candidate sets against equal-size top-k lists.
pub fn rerank(cfg: &RunConfig, cache_flag: Option<&Path>) -> CliResult<barrier_core::rerank::RerankTable> {
    let model = load_model(cfg)?;
    let examples = load_examples(cfg, model.vocab())?;
    let reports = read_reports(&cfg.reports_path())?;
    let cache = open_cache(cfg, cache_flag)?;
    let r = &cfg.rerank;
    let out = create_output(cfg)?;
    let table = rerank_report(model.as_ref(), &cache, &examples, &reports, r.n, r.k, cfg.seed)?;

    let path = out.join(RERANK_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record([
        "provenance",
        "n",
        "k",
        "oracle",
        "coverage",
        "diversity",
        "delta_oracle",
        "delta_coverage",
        "delta_diversity",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in [&table.topk, &table.barrier] {
        w.write_record([
            row.provenance.name().to_string(),
            table.n.to_string(),
            table.k.to_string(),
            row.oracle.to_string(),
            row.coverage.to_string(),
            opt(row.diversity),
            opt(row.delta_oracle),
            opt(row.delta_coverage),
            opt(row.delta_diversity),
        ])?;
    }
    w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;
    if table.random_fallbacks > 0 {
        log::info!("{} sentences used random edit positions", table.random_fallbacks);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignSummary {
    pub pairs: usize,
    pub entries: usize,
    pub final_log_likelihood: f64,
}

/// Trains IBM Model 1 on the corpus and writes the lexical table and the
/// Viterbi alignments.
pub fn align(cfg: &RunConfig) -> CliResult<AlignSummary> {
    let model = if has_model(cfg) { Some(load_model(cfg)?) } else { None };
    let vocab = vocab_for(cfg, model.as_deref())?;
    let examples = load_examples(cfg, &vocab)?;
    let pairs = pairs(&examples);
    let ibm = ibm1_em(&pairs, cfg.align.iterations)?;
    let out = create_output(cfg)?;

    let word = |id| vocab.token(id).unwrap_or_default();
    let path = out.join(LEX_FILE);
    let mut w = create_file(&path)?;
    let mut entries = 0;
    for (s, t, p) in ibm.table.iter() {
        writeln!(w, "{}\t{}\t{p}", word(s), word(t)).map_err(CliError::io(format!("writing {}", path.display())))?;
        entries += 1;
    }
    w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;

    let path = out.join(ALIGN_FILE);
    let mut w = create_file(&path)?;
    for links in viterbi_all(&ibm, &pairs) {
        writeln!(w, "{}", format_pharaoh(&links)).map_err(CliError::io(format!("writing {}", path.display())))?;
    }
    w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;

    let path = out.join(LOGLIK_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["iteration", "log_likelihood"])?;
    for (i, ll) in ibm.log_likelihoods.iter().enumerate() {
        w.write_record([i.to_string(), ll.to_string()])?;
    }
    w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;

    Ok(AlignSummary {
        pairs: pairs.len(),
        entries,
        final_log_likelihood: ibm.log_likelihoods.last().copied().unwrap_or(0.0),
    })
}

/// Serves the configured model over stdin/stdout with the line protocol.
pub fn serve(cfg: &RunConfig) -> CliResult<()> {
    let model = load_model(cfg)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    barrier_core::model::serve(model.as_ref(), stdin.lock(), stdout.lock()).map_err(CliError::Model)
}

pub const SYNTH_SOURCE: &str = "source.txt";
pub const SYNTH_REFERENCE: &str = "reference.txt";
pub const SYNTH_POS: &str = "pos.tsv";
pub const SYNTH_DEPTHS: &str = "depths.tsv";
pub const SYNTH_PLANTED: &str = "planted.txt";
pub const SYNTH_TOY: &str = "toy.json";

/// Writes a synthetic corpus for the configured toy model, with its
/// annotations and the toy parameters.
pub fn synth(cfg: &RunConfig) -> CliResult<usize> {
    let toy = load_toy(cfg)?;
    let corpus = gen_synth_corpus(&cfg.synth, &toy)?;
    let out = create_output(cfg)?;
    let vocab = toy.vocab();
    let ex = &corpus.corpus.examples;

    let lines = |name: &str, rows: Vec<String>| -> CliResult<()> {
        let path = out.join(name);
        let mut w = create_file(&path)?;
        for r in rows {
            writeln!(w, "{r}").map_err(CliError::io(format!("writing {}", path.display())))?;
        }
        w.flush().map_err(CliError::io(format!("writing {}", path.display())))
    };
    lines(SYNTH_SOURCE, ex.iter().map(|e| vocab.decode(&e.source)).collect())?;
    lines(SYNTH_REFERENCE, ex.iter().map(|e| vocab.decode(e.reference())).collect())?;
    let join = |v: Vec<String>| v.join("\t");
    if let Some(tags) = &corpus.corpus.pos_tags {
        lines(SYNTH_POS, tags.iter().map(|t| join(t.clone())).collect())?;
    }
    if let Some(depths) = &corpus.corpus.dep_depths {
        lines(
            SYNTH_DEPTHS,
            depths
                .iter()
                .map(|d| join(d.iter().map(u32::to_string).collect()))
                .collect(),
        )?;
    }
    lines(
        SYNTH_PLANTED,
        corpus
            .planted
            .iter()
            .map(|p| p.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
            .collect(),
    )?;
    toy.config().save(&out.join(SYNTH_TOY))?;
    Ok(ex.len())
}
