//! Command-line driver for barrier-word detection.
//!
//! Every subcommand takes a JSON [`config::RunConfig`] via `--config` and
//! accepts flags overriding individual fields. The cache path is resolved
//! from `--cache`, then `BARRIER_PROBE_CACHE`, then the config file.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use barrier_core::{Method, ToyConfig};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "barrier-probe", version, about = "Find source words that block translation quality")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Score every source position and write one risk report per sentence.
    Detect,
    /// Compare budgeted estimators against exact detection.
    Simulate,
    /// Characterize barriers from an earlier detect run.
    Analyze,
    /// Compare barrier-edit candidates with top-k lists.
    Rerank,
    /// Train IBM Model 1 and write lexical table and alignments.
    Align,
    /// Serve the configured model over stdin/stdout.
    Serve,
    /// Write a synthetic corpus for the configured toy model.
    Synth,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub method: Option<Method>,
    /// Edits decoded per position.
    #[arg(long, global = true)]
    pub b: Option<usize>,
    #[arg(long, global = true)]
    pub pre_budget: Option<usize>,
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub source: Option<PathBuf>,
    /// Reference file; repeat for several references.
    #[arg(long, global = true)]
    pub reference: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub pos_tags: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dep_depths: Option<PathBuf>,
    /// Use a default toy model with this seed.
    #[arg(long, global = true)]
    pub toy_seed: Option<u64>,
    /// Use the toy model stored in this JSON file.
    #[arg(long, global = true)]
    pub toy_file: Option<PathBuf>,
    /// Spawn an external model server; whitespace-separated command line.
    #[arg(long, global = true)]
    pub model_cmd: Option<String>,
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    /// Candidate set size for rerank.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Barrier positions edited by rerank.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Report cutoffs for analyses and simulation, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Simulation budgets, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
    /// Simulation methods, comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    #[arg(long, global = true)]
    pub p0: Option<f64>,
    #[arg(long, global = true)]
    pub min_contexts: Option<usize>,
    #[arg(long, global = true)]
    pub reports: Option<PathBuf>,
    #[arg(long, global = true)]
    pub compare_reports: Option<PathBuf>,
    #[arg(long, global = true)]
    pub alignments: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train_source: Option<PathBuf>,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Sentences generated by synth.
    #[arg(long, global = true)]
    pub sentences: Option<usize>,
    /// Barriers per synthetic sentence.
    #[arg(long, global = true)]
    pub exact_barriers: Option<usize>,
    #[arg(long, global = true)]
    pub synth_seed: Option<u64>,
}

impl Overrides {
    /// Loads the config file, if any, and applies every flag on top.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut c.seed, &self.seed);
        if self.jobs.is_some() {
            c.jobs = self.jobs;
        }
        set(&mut c.estimator.method, &self.method);
        set(&mut c.estimator.b, &self.b);
        if self.pre_budget.is_some() {
            c.estimator.pre_budget = self.pre_budget;
        }
        if self.output.is_some() {
            set(&mut c.output, &self.output);
        }
        if self.source.is_some() {
            c.corpus.source = self.source.clone();
        }
        if !self.reference.is_empty() {
            c.corpus.references = self.reference.clone();
        }
        if self.pos_tags.is_some() {
            c.corpus.pos_tags = self.pos_tags.clone();
        }
        if self.dep_depths.is_some() {
            c.corpus.dep_depths = self.dep_depths.clone();
        }

        let sources = usize::from(self.toy_seed.is_some())
            + usize::from(self.toy_file.is_some())
            + usize::from(self.model_cmd.is_some());
        if sources > 1 {
            return Err(CliError::Usage(
                "--toy-seed, --toy-file and --model-cmd are mutually exclusive".into(),
            ));
        }
        if sources == 1 {
            c.model.toy = self.toy_seed.map(ToyConfig::with_seed);
            c.model.toy_file = self.toy_file.clone();
            c.model.command = self
                .model_cmd
                .as_ref()
                .map(|s| s.split_whitespace().map(str::to_string).collect());
        }
        set(&mut c.model.max_in_flight, &self.max_in_flight);

        set(&mut c.rerank.n, &self.n);
        set(&mut c.rerank.k, &self.k);
        if let Some(ks) = &self.ks {
            c.analysis.ks = ks.clone();
            c.simulation.ks = ks.clone();
        }
        set(&mut c.simulation.repeats, &self.repeats);
        set(&mut c.simulation.budgets, &self.budgets);
        set(&mut c.simulation.methods, &self.methods);
        set(&mut c.analysis.p0, &self.p0);
        set(&mut c.analysis.min_contexts, &self.min_contexts);
        if self.reports.is_some() {
            c.analysis.reports = self.reports.clone();
        }
        if self.compare_reports.is_some() {
            c.analysis.compare_reports = self.compare_reports.clone();
        }
        if self.alignments.is_some() {
            c.analysis.alignments = self.alignments.clone();
        }
        if self.train_source.is_some() {
            c.analysis.train_source = self.train_source.clone();
        }
        set(&mut c.align.iterations, &self.iterations);
        set(&mut c.synth.n_sentences, &self.sentences);
        if self.exact_barriers.is_some() {
            c.synth.exact_barriers = self.exact_barriers;
        }
        set(&mut c.synth.seed, &self.synth_seed);
        if c.jobs == Some(0) {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        Ok(c)
    }
}

/// Runs a parsed command line inside a worker pool sized by `jobs`.
pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.overrides.resolve()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cfg.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let cache = cli.overrides.cache.as_deref();
    pool.install(|| match cli.command {
        Command::Detect => {
            let s = commands::detect(&cfg, cache)?;
            log::info!(
                "{} sentences, {} model calls, cache hit rate {:.3}, {:.2}s",
                s.sentences,
                s.model_calls,
                s.cache_hit_rate,
                s.seconds
            );
            Ok(())
        }
        Command::Simulate => {
            let s = commands::simulate(&cfg, cache)?;
            log::info!("{} rows over {} sentences", s.rows, s.sentences);
            Ok(())
        }
        Command::Analyze => {
            let s = commands::analyze(&cfg)?;
            log::info!("wrote {}", s.written.join(", "));
            Ok(())
        }
        Command::Rerank => commands::rerank(&cfg, cache).map(|_| ()),
        Command::Align => {
            let s = commands::align(&cfg)?;
            log::info!("{} pairs, final log-likelihood {}", s.pairs, s.final_log_likelihood);
            Ok(())
        }
        Command::Serve => commands::serve(&cfg),
        Command::Synth => {
            let n = commands::synth(&cfg)?;
            log::info!("wrote {n} sentences to {}", cfg.output.display());
            Ok(())
        }
    })
}

/// Parses `args` and runs, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("barrier-probe: {e}");
            e.exit_code()
        }
    }
}
