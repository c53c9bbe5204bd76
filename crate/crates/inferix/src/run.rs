//! Wiring a [`RunConfig`] into a pipeline, an attention backend and a cache.

use inferix_core::engine::{
    generate_sequence_with_cache, AttentionBackend, DenseBackend, EngineError, EngineObserver, GeneratedBlock,
    ParallelBackend, Pipeline, PipelineRegistry, StrategyMode,
};
use inferix_core::kv::KvCache;
use inferix_core::parallel::{Lockstep, Strategy, Traffic};

use crate::config::{RunConfig, StrategyChoice};
use crate::exec::Threaded;

pub enum Backend {
    Dense(DenseBackend),
    Lockstep(ParallelBackend<Lockstep>),
    Threaded(ParallelBackend<Threaded>),
}

impl Backend {
    /// Dense when `world_size == 1`, otherwise a simulated worker group.
    pub fn from_config(cfg: &RunConfig) -> Result<Self, EngineError> {
        let world = cfg.parallel.world_size;
        if world <= 1 {
            return Ok(Self::Dense(DenseBackend));
        }
        let mode = match cfg.strategy().map_err(|_| EngineError::Config("unknown strategy"))? {
            StrategyChoice::Auto => StrategyMode::Auto(cfg.link_cost()),
            StrategyChoice::Fixed(s) => StrategyMode::Fixed(s),
        };
        Ok(match cfg.parallel.executor.as_str() {
            "threaded" => Self::Threaded(ParallelBackend::new(Threaded, world, mode)?),
            _ => Self::Lockstep(ParallelBackend::new(Lockstep, world, mode)?),
        })
    }

    pub fn as_dyn(&self) -> &dyn AttentionBackend {
        match self {
            Self::Dense(b) => b,
            Self::Lockstep(b) => b,
            Self::Threaded(b) => b,
        }
    }

    /// Simulated traffic and per-strategy call counts; `None` for dense.
    pub fn traffic(&self) -> Option<(Traffic, [u64; 3])> {
        match self {
            Self::Dense(_) => None,
            Self::Lockstep(b) => Some((b.traffic(), b.strategy_calls())),
            Self::Threaded(b) => Some((b.traffic(), b.strategy_calls())),
        }
    }

    pub fn traffic_summary(&self) -> String {
        match self.traffic() {
            None => "world_size\t1\n".to_string(),
            Some((t, calls)) => {
                let mut s = format!("messages\t{}\nbytes\t{}\n", t.messages, t.bytes);
                for (st, n) in Strategy::ALL.iter().zip(calls) {
                    s.push_str(&format!("calls.{}\t{n}\n", st.name()));
                }
                s
            }
        }
    }
}

pub fn build_pipeline(cfg: &RunConfig, registry: &PipelineRegistry) -> Result<Box<dyn Pipeline>, EngineError> {
    registry.build(&cfg.model.pipeline, cfg.model_config())
}

pub fn build_cache(cfg: &RunConfig, pipeline: &dyn Pipeline) -> Result<KvCache, EngineError> {
    Ok(KvCache::new(cfg.kv_config(pipeline.kv_config()))?)
}

/// Run the configured request; the cache is returned for dumps and stats.
pub fn generate(
    cfg: &RunConfig,
    pipeline: &dyn Pipeline,
    backend: &Backend,
    observer: &mut dyn EngineObserver,
) -> Result<(Vec<GeneratedBlock>, KvCache), EngineError> {
    let mut cache = build_cache(cfg, pipeline)?;
    let blocks = generate_sequence_with_cache(pipeline, &cfg.request(), &mut cache, backend.as_dyn(), observer)?;
    Ok((blocks, cache))
}
