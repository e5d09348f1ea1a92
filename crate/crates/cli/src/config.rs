//! Run configuration: a JSON file whose fields can each be overridden from
//! the command line.

use std::path::{Path, PathBuf};

use barrier_core::analytics::{DEFAULT_MIN_CONTEXTS, DEFAULT_P0};
use barrier_core::estimators::{Method, DEFAULT_BUDGETS, DEFAULT_KS};
use barrier_core::{EstimatorConfig, SynthSpec, ToyConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CACHE_ENV: &str = "BARRIER_PROBE_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSource {
    /// Inline toy model parameters.
    pub toy: Option<ToyConfig>,
    /// Toy model parameters stored as JSON.
    pub toy_file: Option<PathBuf>,
    /// Command line of an external model server.
    pub command: Option<Vec<String>>,
    pub max_in_flight: usize,
}

impl Default for ModelSource {
    fn default() -> Self {
        Self {
            toy: None,
            toy_file: None,
            command: None,
            max_in_flight: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    pub source: Option<PathBuf>,
    pub references: Vec<PathBuf>,
    pub pos_tags: Option<PathBuf>,
    pub dep_depths: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSettings {
    pub method: Method,
    pub b: usize,
    pub pre_budget: Option<usize>,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        Self {
            method: d.method,
            b: d.b,
            pre_budget: d.pre_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub ks: Vec<usize>,
    pub repeats: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            methods: Method::BUDGETED.to_vec(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            ks: DEFAULT_KS.to_vec(),
            repeats: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub ks: Vec<usize>,
    pub p0: f64,
    pub min_contexts: usize,
    pub depths: Vec<u32>,
    /// Reports to analyze; defaults to the detect output.
    pub reports: Option<PathBuf>,
    /// Second report set for cross-run overlap.
    pub compare_reports: Option<PathBuf>,
    /// Pharaoh alignments of the corpus, used instead of IBM Model 1.
    pub alignments: Option<PathBuf>,
    /// Training sources for inverse frequency; defaults to the corpus.
    pub train_source: Option<PathBuf>,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            p0: DEFAULT_P0,
            min_contexts: DEFAULT_MIN_CONTEXTS,
            depths: vec![0, 1, 2, 3],
            reports: None,
            compare_reports: None,
            alignments: None,
            train_source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankSettings {
    pub n: usize,
    pub k: usize,
}

impl Default for RerankSettings {
    fn default() -> Self {
        Self {
            n: 10,
            k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignSettings {
    pub iterations: usize,
}

impl Default for AlignSettings {
    fn default() -> Self {
        Self { iterations: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    pub corpus: CorpusPaths,
    pub estimator: EstimatorSettings,
    pub simulation: SimulationSettings,
    pub analysis: AnalysisSettings,
    pub rerank: RerankSettings,
    pub align: AlignSettings,
    pub synth: SynthSpec,
    pub cache: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            corpus: CorpusPaths::default(),
            estimator: EstimatorSettings::default(),
            simulation: SimulationSettings::default(),
            analysis: AnalysisSettings::default(),
            rerank: RerankSettings::default(),
            align: AlignSettings::default(),
            synth: SynthSpec::default(),
            cache: None,
            output: PathBuf::from("out"),
            seed: 0,
            jobs: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            method: self.estimator.method,
            b: self.estimator.b,
            pre_budget: self.estimator.pre_budget,
            seed: self.seed,
        }
    }

    /// Cache location: an explicit setting, else the environment, else none.
    pub fn cache_path(&self, flag: Option<&Path>) -> Option<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .or_else(|| self.cache.clone())
    }

    pub fn validate_model(&self) -> CliResult<()> {
        let m = &self.model;
        let sources = usize::from(m.toy.is_some()) + usize::from(m.toy_file.is_some()) + usize::from(m.command.is_some());
        if sources != 1 {
            return Err(CliError::Config(format!(
                "exactly one model source (toy, toy_file or command) is required, found {sources}"
            )));
        }
        if m.command.as_ref().is_some_and(Vec::is_empty) {
            return Err(CliError::Config("model command is empty".into()));
        }
        if m.max_in_flight == 0 {
            return Err(CliError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn source_path(&self) -> CliResult<&Path> {
        self.corpus
            .source
            .as_deref()
            .ok_or_else(|| CliError::Config("corpus.source is not set".into()))
    }

    pub fn reports_path(&self) -> PathBuf {
        self.analysis
            .reports
            .clone()
            .unwrap_or_else(|| self.output.join(crate::commands::REPORTS_FILE))
    }
}
