//! Shared fixtures for the benchmarks under `benches/`.

use docre_core::corpus::{synth_corpus, SynthConfig, SynthCorpus, TokenVocab};
use docre_core::{EncoderConfig, Model};

/// Default synthetic corpus at the given size.
pub fn corpus(n_docs: usize) -> SynthCorpus {
    synth_corpus(&SynthConfig { n_docs, ..SynthConfig::default() }).expect("default synth config is valid")
}

/// Freshly initialised model with the default encoder over `corpus`.
pub fn model(corpus: &SynthCorpus) -> Model {
    Model::new(EncoderConfig::default(), TokenVocab::build(&corpus.docs), corpus.relations.clone())
        .expect("default encoder config is valid")
}
