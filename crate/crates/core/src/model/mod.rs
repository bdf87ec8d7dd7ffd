//! Watch (conv + LSTM over lip windows), Listen (LSTM over MFCC frames),
//! dual attention and the Spell decoder.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ConvLayerSpec, ModelConfig, PoolSpec};
pub use network::{
    attend, audio_from_rows, log_softmax, AttentionParams, sample_index, DecoderState, Encoded, EncoderOutput, EncoderVars, Graph, LossOptions,
    LossOutput, Mode, Model, ModelInputs, Session, StepOutput, StepVars,
};
pub use params::{param_specs, Init, ParamStore};
