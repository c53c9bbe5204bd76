use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::model::ToyModel;
use super::pipeline::{AttentionBackend, BlockContext, Pipeline};
use super::{DenoiseSchedule, EngineError};
use crate::attention::windowed_block_causal_mask;
use crate::frame::GrayFrame;
use crate::kv::{EntryKind, KvCache, KvStats};
use crate::tensor::Tensor;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub num_blocks: usize,
    pub schedule: DenoiseSchedule,
    pub seed: u64,
    /// `(from_chunk, prompt_text)`, starting at chunk 0, strictly increasing.
    pub prompt_schedule: Vec<(u32, String)>,
    /// Self-attention tokens kept in the cache after each block.
    pub kv_window: Option<usize>,
}

impl GenerationRequest {
    pub fn new(num_blocks: usize, prompt: &str) -> Self {
        Self {
            num_blocks,
            schedule: DenoiseSchedule::default(),
            seed: DEFAULT_SEED,
            prompt_schedule: vec![(0, prompt.to_string())],
            kv_window: None,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.num_blocks == 0 {
            return Err(EngineError::Config("num_blocks must be >= 1"));
        }
        if u32::try_from(self.num_blocks).is_err() {
            return Err(EngineError::Config("num_blocks exceeds chunk index range"));
        }
        self.schedule.validate()?;
        validate_prompt_schedule(&self.prompt_schedule)
    }
}

fn validate_prompt_schedule(s: &[(u32, String)]) -> Result<(), EngineError> {
    match s.first() {
        None => return Err(EngineError::PromptSchedule("empty")),
        Some((c, _)) if *c != 0 => return Err(EngineError::PromptSchedule("must start at chunk 0")),
        _ => {}
    }
    if s.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(EngineError::PromptSchedule("from_chunk must be strictly increasing"));
    }
    if s.iter().any(|(_, t)| t.trim().is_empty()) {
        return Err(EngineError::EmptyPrompt);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedBlock {
    pub chunk_index: u32,
    pub latent: Tensor,
    pub frames: Vec<GrayFrame>,
    pub prompt_in_effect: String,
}

/// A request to use `text` from `effective_chunk` onwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptUpdate {
    pub effective_chunk: u32,
    pub text: String,
}

/// Prompt schedule plus the chunk currently being generated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineState {
    schedule: Vec<(u32, String)>,
    current: Option<u32>,
}

impl EngineState {
    pub fn new(schedule: Vec<(u32, String)>) -> Result<Self, EngineError> {
        validate_prompt_schedule(&schedule)?;
        Ok(Self {
            schedule,
            current: None,
        })
    }

    pub fn schedule(&self) -> &[(u32, String)] {
        &self.schedule
    }

    pub fn current_chunk(&self) -> Option<u32> {
        self.current
    }

    pub fn begin_chunk(&mut self, chunk: u32) {
        self.current = Some(chunk);
    }

    /// Accepts iff `effective_chunk` lies strictly after the chunk being
    /// generated (any chunk while idle). An accepted update replaces a
    /// schedule entry at the same chunk or is inserted in order.
    pub fn apply_prompt_update(&mut self, update: &PromptUpdate) -> bool {
        if update.text.trim().is_empty() {
            return false;
        }
        if self.current.is_some_and(|c| update.effective_chunk <= c) {
            return false;
        }
        match self.schedule.binary_search_by_key(&update.effective_chunk, |(c, _)| *c) {
            Ok(i) => self.schedule[i].1 = update.text.clone(),
            Err(i) => self.schedule.insert(i, (update.effective_chunk, update.text.clone())),
        }
        true
    }

    pub fn prompt_for(&self, chunk: u32) -> &str {
        let i = self.schedule.partition_point(|(c, _)| *c <= chunk);
        // validated: schedule[0] is chunk 0
        &self.schedule[i.saturating_sub(1)].1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEvent {
    /// `text` became the cross-attention context from `chunk` on.
    PromptApplied { chunk: u32, text: String },
    CrossAttentionCleared { chunk: u32, entries: usize },
    WindowEvicted { chunk: u32, freed_tokens: usize },
}

/// Consumer of the decode loop's progress. Called synchronously, in order.
pub trait EngineObserver {
    /// Prompt updates that arrived since the last block boundary.
    fn poll_updates(&mut self) -> Vec<PromptUpdate> {
        Vec::new()
    }
    fn update_resolved(&mut self, _update: &PromptUpdate, _accepted: bool) {}
    fn event(&mut self, _event: &EngineEvent) {}
    fn block_started(&mut self, _chunk: u32) {}
    fn block_done(&mut self, _block: &GeneratedBlock, _stats: &KvStats) {}
    /// Checked at block boundaries; `true` ends generation early.
    fn should_stop(&mut self) -> bool {
        false
    }
    fn complete(&mut self, _blocks: usize) {}
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NullObserver;

impl EngineObserver for NullObserver {}

/// One Euler update `latent - step_scale * eps_hat`. The context is read only.
pub fn denoise_step(
    pipeline: &dyn Pipeline,
    latent: &Tensor,
    t: f32,
    step_scale: f32,
    ctx: &BlockContext,
    backend: &dyn AttentionBackend,
) -> Result<Tensor, EngineError> {
    let eps = pipeline.predict_noise(latent, t, ctx, backend)?;
    Ok(latent.sub_scaled(&eps, step_scale)?)
}

/// Denoise one block from seeded noise against the current cache, then
/// append its clean K/V to the cache.
pub fn generate_block(
    pipeline: &dyn Pipeline,
    cache: &mut KvCache,
    schedule: &DenoiseSchedule,
    prompt_in_effect: &str,
    chunk_index: u32,
    seed: u64,
    backend: &dyn AttentionBackend,
) -> Result<GeneratedBlock, EngineError> {
    let layers = pipeline.config().layers;
    let ctx = BlockContext::from_cache(cache, layers)?;
    let mut latent = pipeline.initial_noise(seed, chunk_index);
    for &t in &schedule.steps {
        latent = denoise_step(pipeline, &latent, t, schedule.step_scale, &ctx, backend)?;
    }
    let kvs = pipeline.clean_kv(&latent, &ctx, backend)?;
    for (l, (k, v)) in kvs.iter().enumerate() {
        cache.append_block(l, k, v, EntryKind::SelfAttn, chunk_index)?;
    }
    let frames = pipeline.decode(&latent)?;
    Ok(GeneratedBlock {
        chunk_index,
        latent,
        frames,
        prompt_in_effect: prompt_in_effect.to_string(),
    })
}

/// Run a request into a fresh cache laid out by the pipeline.
pub fn generate_sequence(
    pipeline: &dyn Pipeline,
    request: &GenerationRequest,
    backend: &dyn AttentionBackend,
    observer: &mut dyn EngineObserver,
) -> Result<Vec<GeneratedBlock>, EngineError> {
    let mut cache = KvCache::new(pipeline.kv_config())?;
    generate_sequence_with_cache(pipeline, request, &mut cache, backend, observer)
}

pub fn generate_sequence_with_cache(
    pipeline: &dyn Pipeline,
    request: &GenerationRequest,
    cache: &mut KvCache,
    backend: &dyn AttentionBackend,
    observer: &mut dyn EngineObserver,
) -> Result<Vec<GeneratedBlock>, EngineError> {
    request.validate()?;
    let layers = pipeline.config().layers;
    if cache.config().num_layers != layers {
        return Err(EngineError::CacheLayout {
            cache: cache.config().num_layers,
            model: layers,
        });
    }
    let mut state = EngineState::new(request.prompt_schedule.clone())?;
    let mut active: Option<String> = None;
    let mut out = Vec::with_capacity(request.num_blocks);
    for chunk in 0..request.num_blocks as u32 {
        if observer.should_stop() {
            break;
        }
        for update in observer.poll_updates() {
            let accepted = state.apply_prompt_update(&update);
            observer.update_resolved(&update, accepted);
        }
        state.begin_chunk(chunk);
        let text = state.prompt_for(chunk).to_string();
        if active.as_deref() != Some(text.as_str()) {
            if active.is_some() {
                let entries = cache.clear_cross_attention();
                observer.event(&EngineEvent::CrossAttentionCleared { chunk, entries });
            }
            for (l, (k, v)) in pipeline.prompt_kv(&text)?.iter().enumerate() {
                cache.append_block(l, k, v, EntryKind::CrossAttn, chunk)?;
            }
            observer.event(&EngineEvent::PromptApplied {
                chunk,
                text: text.clone(),
            });
            active = Some(text.clone());
        }
        observer.block_started(chunk);
        let block = generate_block(pipeline, cache, &request.schedule, &text, chunk, request.seed, backend)?;
        if let Some(w) = request.kv_window {
            let freed_tokens = cache.evict_window(w);
            if freed_tokens > 0 {
                observer.event(&EngineEvent::WindowEvicted { chunk, freed_tokens });
            }
        }
        observer.block_done(&block, &cache.memory_stats());
        out.push(block);
    }
    observer.complete(out.len());
    Ok(out)
}

/// Same request with no cache: every denoise step runs the model over the raw
/// tokens of all earlier clean blocks plus the current block under the
/// (optionally windowed) block-causal mask. Earlier blocks sit at `t = 0`
/// and keep the prompt that was in effect for them.
pub fn recompute_reference(model: &ToyModel, request: &GenerationRequest) -> Result<Vec<GeneratedBlock>, EngineError> {
    request.validate()?;
    let state = EngineState::new(request.prompt_schedule.clone())?;
    let bl = model.config().block_len;
    let mut prompt_cache: Vec<(String, Vec<(Tensor, Tensor)>)> = Vec::new();
    let mut chunk_prompt: Vec<usize> = Vec::with_capacity(request.num_blocks);
    let mut clean: Vec<Tensor> = Vec::with_capacity(request.num_blocks);
    let mut out = Vec::with_capacity(request.num_blocks);
    for chunk in 0..request.num_blocks as u32 {
        let text = state.prompt_for(chunk);
        let idx = match prompt_cache.iter().position(|(t, _)| t == text) {
            Some(i) => i,
            None => {
                prompt_cache.push((text.to_string(), model.prompt_kv(text)?));
                prompt_cache.len() - 1
            }
        };
        chunk_prompt.push(idx);
        let prompts: Vec<&[(Tensor, Tensor)]> = chunk_prompt.iter().map(|&i| prompt_cache[i].1.as_slice()).collect();
        let nb = chunk as usize + 1;
        let mask = windowed_block_causal_mask(nb, bl, request.kv_window)?;
        let mut times = vec![0.0f32; nb];
        let mut latent = model.initial_noise(request.seed, chunk);
        for &t in &request.schedule.steps {
            times[nb - 1] = t;
            let mut parts: Vec<&Tensor> = clean.iter().collect();
            parts.push(&latent);
            let rows = Tensor::concat_rows(&parts)?;
            let eps = model.forward_sequence(&rows, &times, &prompts, &mask)?.slice_rows(chunk as usize * bl, bl)?;
            latent = latent.sub_scaled(&eps, request.schedule.step_scale)?;
        }
        let frames = model.decode(&latent)?;
        out.push(GeneratedBlock {
            chunk_index: chunk,
            latent: latent.clone(),
            frames,
            prompt_in_effect: text.to_string(),
        });
        clean.push(latent);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> EngineState {
        EngineState::new(vec![(0, "a".to_string())]).unwrap()
    }

    #[test]
    fn updates_never_retroactive() {
        let mut s = state();
        s.begin_chunk(2);
        assert!(s.apply_prompt_update(&PromptUpdate {
            effective_chunk: 5,
            text: "b".into()
        }));
        assert!(!s.apply_prompt_update(&PromptUpdate {
            effective_chunk: 1,
            text: "c".into()
        }));
        assert!(!s.apply_prompt_update(&PromptUpdate {
            effective_chunk: 2,
            text: "c".into()
        }));
        assert_eq!(s.prompt_for(4), "a");
        assert_eq!(s.prompt_for(5), "b");
        assert_eq!(s.prompt_for(100), "b");
    }

    #[test]
    fn idle_update_replaces_chunk_zero() {
        let mut s = state();
        assert!(s.apply_prompt_update(&PromptUpdate {
            effective_chunk: 0,
            text: "z".into()
        }));
        assert_eq!(s.schedule(), &[(0, "z".to_string())]);
    }

    #[test]
    fn schedule_validation() {
        let bad = |s: Vec<(u32, &str)>| {
            EngineState::new(s.into_iter().map(|(c, t)| (c, t.to_string())).collect()).is_err()
        };
        assert!(bad(vec![]));
        assert!(bad(vec![(1, "a")]));
        assert!(bad(vec![(0, "a"), (0, "b")]));
        assert!(bad(vec![(0, "a"), (3, "b"), (2, "c")]));
        assert!(bad(vec![(0, " ")]));
        assert!(!bad(vec![(0, "a"), (2, "b")]));
    }
}
