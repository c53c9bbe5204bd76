//! Generate-and-cache decode loop.
//!
//! A [`Pipeline`] turns noise into a clean latent block by iterative
//! denoising, reading earlier blocks through the KV cache. After each block
//! its clean keys/values are appended to the cache for the blocks that follow.
//! [`ToyModel`] is the built-in pipeline: a small deterministic transformer
//! with randomly initialised weights.

mod generate;
mod model;
mod pipeline;

pub use generate::{
    denoise_step, generate_block, generate_sequence, generate_sequence_with_cache, recompute_reference,
    EngineEvent, EngineObserver, EngineState, GeneratedBlock, GenerationRequest, NullObserver, PromptUpdate,
    DEFAULT_SEED,
};
pub use model::{embed_prompt, ModelConfig, ToyModel};
pub use pipeline::{
    AttentionBackend, BlockContext, DenseBackend, ParallelBackend, Pipeline, PipelineFactory, PipelineRegistry,
    StrategyMode,
};

use alloc::string::String;

use crate::attention::AttentionError;
use crate::kv::KvError;
use crate::parallel::ParallelError;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error("invalid denoise schedule: {0}")]
    Schedule(&'static str),
    #[error("invalid prompt schedule: {0}")]
    PromptSchedule(&'static str),
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("unknown pipeline {0:?}")]
    UnknownPipeline(String),
    #[error("cache has {cache} layers, model has {model}")]
    CacheLayout { cache: usize, model: usize },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Parallel(#[from] ParallelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Strictly decreasing noise levels and the Euler step coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseSchedule {
    pub steps: alloc::vec::Vec<f32>,
    pub step_scale: f32,
}

impl DenoiseSchedule {
    pub fn new(steps: alloc::vec::Vec<f32>, step_scale: f32) -> Result<Self, EngineError> {
        let s = Self { steps, step_scale };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.steps.is_empty() {
            return Err(EngineError::Schedule("at least one step required"));
        }
        if self.steps.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(EngineError::Schedule("noise levels must be finite and > 0"));
        }
        if self.steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(EngineError::Schedule("noise levels must be strictly decreasing"));
        }
        if !self.step_scale.is_finite() {
            return Err(EngineError::Schedule("step_scale must be finite"));
        }
        Ok(())
    }
}

impl Default for DenoiseSchedule {
    fn default() -> Self {
        Self {
            steps: alloc::vec![1.0, 0.75, 0.5, 0.25],
            step_scale: 0.2,
        }
    }
}
