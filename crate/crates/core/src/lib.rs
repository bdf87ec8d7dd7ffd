//! Dual-attention audio-visual speech transcription from scratch: a small
//! autodiff engine, MFCC front end, Watch/Listen/Attend/Spell network,
//! curriculum training, beam search and error-rate metrics, exercised on a
//! procedurally generated GRID-grammar corpus.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::NdArray;
