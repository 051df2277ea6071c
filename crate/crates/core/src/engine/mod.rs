//! Reference encoder and contrastive training.
//!
//! The encoder mean-pools hashed text-token embeddings and linearly projected
//! patch colours, applies an output projection and optionally L2-normalizes.
//! Training minimizes InfoNCE over in-batch negatives; gradients come either
//! from plain backpropagation or from the cached three-phase schedule, which
//! gives the same result with activations for one sub-batch at a time.

mod checkpoint;
mod encoder;
mod grad;
mod input;
mod loss;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{ActivationMeter, EncoderParams, Forward, Grads, DEFAULT_DIM, DEFAULT_VOCAB, PATCH_FEATURES};
pub use grad::{grad_cached, grad_full, GradConfig, GradOutput, PairBatch};
pub use input::{bucket, materialize, tokenize, EncoderInput, ImageSource, InMemoryImages, Masking, PreparedSequence};
pub use loss::{info_nce_loss, info_nce_scores, LossOutput};
pub use train::{
    interleave_chunk, learning_rate_at, moving_average, prepare_training_pairs, train, warmup_steps, write_loss_csv, Adam, LossPoint,
    TrainOutcome, TrainingPair,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token_select::{KeepMode, TokenSelectError};
use crate::trajectory::StateId;

pub const DEFAULT_TEMPERATURE: f64 = 0.02;
pub const DEFAULT_MAX_SEQUENCE_TOKENS: usize = 65_536;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sub-batch size {sub} does not fit batch of {batch}")]
    SubBatch { sub: usize, batch: usize },
    #[error("cached embedding for row {row} differs from its re-computation")]
    CacheMismatch { row: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no image loaded for state {0}")]
    MissingImage(StateId),
    #[error("cannot read image {path}: {message}")]
    Image { path: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    TokenSelect(#[from] TokenSelectError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub sub_batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub steps: usize,
    pub seed: u64,
    pub mask_ratio: f64,
    pub delta: f64,
    pub keep_mode: KeepMode,
    pub max_sequence_tokens: usize,
    /// Share of each batch drawn from a single subtask before switching.
    pub interleave_ratio: f64,
    pub normalize: bool,
    pub dim: usize,
    pub vocab: usize,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            batch_size: 2048,
            sub_batch_size: 1,
            learning_rate: 5e-5,
            warmup_fraction: 0.05,
            steps: 256,
            seed: 0,
            mask_ratio: 0.5,
            delta: 0.0,
            keep_mode: KeepMode::Random,
            max_sequence_tokens: DEFAULT_MAX_SEQUENCE_TOKENS,
            interleave_ratio: 0.2,
            normalize: true,
            dim: DEFAULT_DIM,
            vocab: DEFAULT_VOCAB,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), EngineError> {
        let fail = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(EngineError::Temperature(self.temperature));
        }
        if self.batch_size == 0 || self.sub_batch_size == 0 {
            return fail("batch and sub-batch sizes must be positive");
        }
        if self.sub_batch_size > self.batch_size {
            return fail("sub-batch size exceeds batch size");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail("learning rate must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail("warm-up fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.interleave_ratio) {
            return fail("interleave ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail("mask ratio must lie in [0, 1)");
        }
        if self.dim == 0 || self.vocab == 0 || self.max_sequence_tokens == 0 {
            return fail("dimension, vocabulary and token budget must be positive");
        }
        Ok(())
    }
}
