//! Network building blocks: feed-forward, monotone and recurrent layers.

mod mlp;
mod positive;
mod recurrent;

pub use mlp::{mlp_forward, Activation, Mlp, MlpConfig};
pub use positive::{positive_mlp_forward, PositiveMlp, PositiveMlpConfig};
pub use recurrent::{
    encode_sequence, gru_cell, gru_d_cell, gru_d_step, gru_step, lstm_cell, lstm_step, CellKind, CellParams,
    DecayInputs, DecayParams, DecayStep, EmbeddingState, EncodedBatch, Encoder, RecurrentConfig, SequenceInput,
};
