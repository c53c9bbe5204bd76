use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::model::{ModelConfig, ToyModel};
use super::EngineError;
use crate::attention::{multi_head_attention, AttentionMask};
use crate::frame::GrayFrame;
use crate::kv::{EntryKind, KvCache, KvConfig};
use crate::parallel::{
    choose_strategy, run_strategy, AttentionProblem, Executor, LinkCostModel, Strategy, Traffic, TrafficCounter,
};
use crate::tensor::Tensor;

/// How self-attention is computed: on one worker, or through a simulated worker group.
pub trait AttentionBackend: Sync {
    fn attend(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Tensor, EngineError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DenseBackend;

impl AttentionBackend for DenseBackend {
    fn attend(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Tensor, EngineError> {
        Ok(multi_head_attention(q, k, v, heads, mask)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategyMode {
    Fixed(Strategy),
    /// Pick per call with [`choose_strategy`].
    Auto(LinkCostModel),
}

/// Dispatches every attention call through a parallel strategy over `world` simulated workers.
#[derive(Debug)]
pub struct ParallelBackend<E> {
    exec: E,
    world: usize,
    mode: StrategyMode,
    traffic: TrafficCounter,
    used: [core::sync::atomic::AtomicU64; 3],
}

impl<E: Executor + Sync> ParallelBackend<E> {
    pub fn new(exec: E, world: usize, mode: StrategyMode) -> Result<Self, EngineError> {
        if world == 0 {
            return Err(EngineError::Config("world_size must be >= 1"));
        }
        Ok(Self {
            exec,
            world,
            mode,
            traffic: TrafficCounter::default(),
            used: Default::default(),
        })
    }

    pub fn traffic(&self) -> Traffic {
        self.traffic.snapshot()
    }

    /// How many calls each strategy served, in [`Strategy::ALL`] order.
    pub fn strategy_calls(&self) -> [u64; 3] {
        core::array::from_fn(|i| self.used[i].load(core::sync::atomic::Ordering::Relaxed))
    }

    fn pick(&self, q: &Tensor, k: &Tensor, heads: usize) -> Strategy {
        match self.mode {
            StrategyMode::Fixed(s) => s,
            StrategyMode::Auto(model) => {
                let p = AttentionProblem {
                    q_len: q.rows(),
                    kv_len: k.rows(),
                    heads,
                    head_dim: q.cols() / heads.max(1),
                    world_size: self.world,
                };
                choose_strategy(&p, &model).strategy
            }
        }
    }
}

impl<E: Executor + Sync> AttentionBackend for ParallelBackend<E> {
    fn attend(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Tensor, EngineError> {
        let strategy = self.pick(q, k, heads);
        let (out, trace) = run_strategy(&self.exec, strategy, self.world, q, k, v, heads, mask)?;
        self.traffic.add(&trace);
        let idx = Strategy::ALL.iter().position(|s| *s == strategy).unwrap_or(0);
        self.used[idx].fetch_add(1, core::sync::atomic::Ordering::Relaxed);
        Ok(out)
    }
}

/// Per-layer context a block attends to, read from the KV cache once per block.
#[derive(Debug, Clone)]
pub struct BlockContext {
    pub self_kv: Vec<(Tensor, Tensor)>,
    pub cross_kv: Vec<(Tensor, Tensor)>,
}

impl BlockContext {
    pub fn from_cache(cache: &mut KvCache, layers: usize) -> Result<Self, EngineError> {
        if cache.config().num_layers != layers {
            return Err(EngineError::CacheLayout {
                cache: cache.config().num_layers,
                model: layers,
            });
        }
        let mut self_kv = Vec::with_capacity(layers);
        let mut cross_kv = Vec::with_capacity(layers);
        for l in 0..layers {
            self_kv.push(cache.fetch_all(l, EntryKind::SelfAttn)?);
            cross_kv.push(cache.fetch_all(l, EntryKind::CrossAttn)?);
        }
        Ok(Self { self_kv, cross_kv })
    }
}

/// The hooks a model family supplies to the common decode loop.
pub trait Pipeline: Send + Sync {
    fn name(&self) -> &str;
    fn config(&self) -> &ModelConfig;
    /// Cache layout this pipeline expects.
    fn kv_config(&self) -> KvConfig;
    /// Per-layer cross-attention `(k, v)` rows for a prompt.
    fn prompt_kv(&self, text: &str) -> Result<Vec<(Tensor, Tensor)>, EngineError>;
    fn predict_noise(
        &self,
        latent: &Tensor,
        t: f32,
        ctx: &BlockContext,
        backend: &dyn AttentionBackend,
    ) -> Result<Tensor, EngineError>;
    /// Per-layer self-attention `(k, v)` of a finished block, to be cached.
    fn clean_kv(
        &self,
        latent: &Tensor,
        ctx: &BlockContext,
        backend: &dyn AttentionBackend,
    ) -> Result<Vec<(Tensor, Tensor)>, EngineError>;
    fn decode(&self, latent: &Tensor) -> Result<Vec<GrayFrame>, EngineError>;
    fn initial_noise(&self, seed: u64, chunk: u32) -> Tensor {
        super::model::block_noise(self.config(), seed, chunk)
    }
}

pub type PipelineFactory = fn(ModelConfig) -> Result<Box<dyn Pipeline>, EngineError>;

fn toy_factory(config: ModelConfig) -> Result<Box<dyn Pipeline>, EngineError> {
    Ok(Box::new(ToyModel::build(config)?))
}

/// Named pipelines; `"toy"` is always present.
#[derive(Debug, Clone)]
pub struct PipelineRegistry {
    factories: BTreeMap<String, PipelineFactory>,
}

impl Default for PipelineRegistry {
    fn default() -> Self {
        let mut factories = BTreeMap::new();
        factories.insert("toy".to_string(), toy_factory as PipelineFactory);
        Self { factories }
    }
}

impl PipelineRegistry {
    pub fn register(&mut self, name: &str, factory: PipelineFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, config: ModelConfig) -> Result<Box<dyn Pipeline>, EngineError> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| EngineError::UnknownPipeline(name.to_string()))?;
        f(config)
    }
}
