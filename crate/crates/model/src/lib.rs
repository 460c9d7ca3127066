//! Music transformer over compound tokens: a rotary-by-attribute attention
//! backbone feeding a recurrent attribute decoder, with training, finetuning,
//! sampling and evaluation utilities.

pub mod attention;
pub mod config;
pub mod decoder;
pub mod embed;
pub mod gradcheck;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod pack;
pub mod params;
pub mod sample;
pub mod seq;
pub mod train;

pub use attention::{
    composed_rotation_tables, pair_frequencies, rotate_rows, rotation_tables, AttentionLayer,
    AttnTrace, ForwardOptions, PackingMask,
};
pub use config::{
    AttentionKind, DecoderKind, EmbeddingKind, LoraConfig, ModelConfig, RotaryBases, NUM_GROUPS,
};
pub use decoder::{step_mask, DecodeBatch, Decoder};
pub use embed::{sinusoid_features, sinusoid_matrix, Embedder};
pub use gradcheck::{finite_difference_check, GradProbe, GradReport};
pub use lora::LoraAdapter;
pub use metrics::{
    classify_piece, controllability, end_time_seconds, mean_logits_argmax, perplexity,
    piece_control, window_logits, ControlCase, ControlReport, PieceControl, RangeSpec,
    CONTROL_TOLERANCES,
};
pub use model::{ClassHead, LossStats, MetaConditioner, Model};
pub use pack::{
    chunk_events, pack_sequences, pad_rows, window_for_classification, window_starts,
    CONDITIONAL_PAD_LEN,
};
pub use sample::{
    generate, masked_softmax, nucleus, sample_index, Generated, SamplerSettings, Strategy,
};
pub use seq::{
    build_conditional_input, loss_positions, position_of, positions_of, step_inputs, step_targets,
    wrap_lm, LossPosition, Row, SeqToken, StepTarget, DECODE_STEPS, POSITION_SLOTS,
    STEP_ATTRIBUTES,
};
pub use train::{
    clip_global_norm, train, Adam, StepMetrics, TrainOptions, TrainTask, METRIC_HEADER,
};

/// Errors from model construction, sequence preparation, training and
/// evaluation.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Tensor(#[from] cadenza_tensor::TensorError),
    #[error(transparent)]
    Token(#[from] cadenza_midi::MidiError),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("train: {0}")]
    Train(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("eval: {0}")]
    Eval(String),
}

pub type Result<V> = std::result::Result<V, ModelError>;
