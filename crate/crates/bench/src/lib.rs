//! Fixtures shared by the benchmarks.

use barrier_core::toy::gen_synth_corpus;
use barrier_core::{ParallelExample, SynthSpec, ToyConfig, ToyModel};

pub fn toy_model() -> ToyModel {
    ToyModel::new(&ToyConfig::default()).expect("default toy model builds")
}

pub fn toy_examples(model: &ToyModel, n: usize) -> Vec<ParallelExample> {
    let spec = SynthSpec {
        n_sentences: n,
        ..SynthSpec::default()
    };
    gen_synth_corpus(&spec, model).expect("default corpus builds").corpus.examples
}
