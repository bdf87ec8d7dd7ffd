//! Synthetic GRID-grammar audio-visual corpus.

pub mod dataset;
pub mod grammar;
pub mod synth;
pub mod vocab;

pub use dataset::{
    build_dataset, coverage_report, read_dataset, write_dataset, CoverageReport, Dataset, DatasetConfig,
    DatasetManifest,
};
pub use grammar::Grammar;
pub use synth::{synthesize_utterance, PatternBank, Split, SynthConfig, Utterance, VideoClip, WordSpan};
pub use vocab::{encode_transcript, CharVocabulary, VocabMode};
