//! Run configuration: a TOML file with one table per module. Command-line
//! flags are applied on top and the merged result is written next to the
//! outputs as `config.toml`.

use std::path::{Path, PathBuf};

use inferix_core::engine::{DenoiseSchedule, GenerationRequest, ModelConfig};
use inferix_core::kv::{KvConfig, LatentMode};
use inferix_core::parallel::{LinkCostModel, Strategy};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub pipeline: String,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub block_len: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub prompt_dim: usize,
    pub weight_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            pipeline: "toy".into(),
            layers: m.layers,
            heads: m.heads,
            head_dim: m.head_dim,
            block_len: m.block_len,
            frame_width: m.frame_shape.1,
            frame_height: m.frame_shape.0,
            prompt_dim: m.prompt_dim,
            weight_seed: m.weight_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub chunk: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub num_blocks: usize,
    pub seed: u64,
    pub steps: Vec<f32>,
    pub step_scale: f32,
    /// Prompt for chunk 0 when `prompts` is empty.
    pub prompt: String,
    pub prompts: Vec<PromptEntry>,
    /// Keep only this many most recent self-attention tokens per layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kv_window: Option<usize>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        let s = DenoiseSchedule::default();
        let r = GenerationRequest::new(2, "");
        Self {
            num_blocks: r.num_blocks,
            seed: r.seed,
            steps: s.steps,
            step_scale: s.step_scale,
            prompt: "a lighthouse on a cliff at dawn".into(),
            prompts: Vec::new(),
            kv_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KvSection {
    pub page_len: usize,
    pub capacity_pages_device: usize,
    pub capacity_pages_host: usize,
}

impl Default for KvSection {
    fn default() -> Self {
        let k = KvConfig::default();
        Self {
            page_len: k.page_len,
            capacity_pages_device: k.capacity_pages_device,
            capacity_pages_host: k.capacity_pages_host,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelSection {
    pub world_size: usize,
    /// `auto` or a strategy name.
    pub strategy: String,
    /// `lockstep` or `threaded`.
    pub executor: String,
    pub per_message_cost: f64,
    pub per_byte_cost: f64,
}

impl Default for ParallelSection {
    fn default() -> Self {
        let c = LinkCostModel::default();
        Self {
            world_size: 1,
            strategy: "auto".into(),
            executor: "lockstep".into(),
            per_message_cost: c.per_message,
            per_byte_cost: c.per_byte,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilerSection {
    pub enabled: bool,
    /// Relative paths are resolved against the output directory.
    pub report: PathBuf,
}

impl Default for ProfilerSection {
    fn default() -> Self {
        Self {
            enabled: true,
            report: "profile.tsv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub listen: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub web_listen: Option<String>,
    pub client_queue: usize,
    /// METRICS every this many blocks; 0 disables.
    pub metrics_every: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub console_dir: Option<PathBuf>,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            web_listen: None,
            client_queue: crate::stream::DEFAULT_CLIENT_QUEUE,
            metrics_every: 1,
            console_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub generate: GenerateSection,
    pub kv: KvSection,
    pub parallel: ParallelSection,
    pub profiler: ProfilerSection,
    pub stream: StreamSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategyChoice {
    Auto,
    Fixed(Strategy),
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            layers: m.layers,
            heads: m.heads,
            head_dim: m.head_dim,
            block_len: m.block_len,
            frame_shape: (m.frame_height, m.frame_width),
            prompt_dim: m.prompt_dim,
            weight_seed: m.weight_seed,
        }
    }

    pub fn request(&self) -> GenerationRequest {
        let g = &self.generate;
        let prompt_schedule = if g.prompts.is_empty() {
            vec![(0, g.prompt.clone())]
        } else {
            g.prompts.iter().map(|p| (p.chunk, p.text.clone())).collect()
        };
        GenerationRequest {
            num_blocks: g.num_blocks,
            schedule: DenoiseSchedule {
                steps: g.steps.clone(),
                step_scale: g.step_scale,
            },
            seed: g.seed,
            prompt_schedule,
            kv_window: g.kv_window,
        }
    }

    /// Cache layout: the pipeline's own, with paging and capacities from `[kv]`.
    pub fn kv_config(&self, base: KvConfig) -> KvConfig {
        KvConfig {
            page_len: self.kv.page_len,
            capacity_pages_device: self.kv.capacity_pages_device,
            capacity_pages_host: self.kv.capacity_pages_host,
            latent: LatentMode::Off,
            ..base
        }
    }

    pub fn strategy(&self) -> Result<StrategyChoice, ConfigError> {
        match self.parallel.strategy.as_str() {
            "auto" => Ok(StrategyChoice::Auto),
            s => Strategy::from_name(s)
                .map(StrategyChoice::Fixed)
                .ok_or_else(|| invalid(format!("unknown strategy {s:?} (auto, ulysses, ring_pass_kv, ring_pass_q)"))),
        }
    }

    pub fn link_cost(&self) -> LinkCostModel {
        LinkCostModel {
            per_message: self.parallel.per_message_cost,
            per_byte: self.parallel.per_byte_cost,
        }
    }

    /// Checks everything that does not need a built model.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_config().validate().map_err(|e| invalid(e.to_string()))?;
        self.request().validate().map_err(|e| invalid(e.to_string()))?;
        self.kv_config(KvConfig::default())
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if self.model.frame_width > u16::MAX as usize || self.model.frame_height > u16::MAX as usize {
            return Err(invalid("frame dimensions must fit in u16"));
        }
        if self.model.block_len > u16::MAX as usize {
            return Err(invalid("block_len must fit in u16"));
        }
        if self.parallel.world_size == 0 {
            return Err(invalid("parallel.world_size must be >= 1"));
        }
        if !matches!(self.parallel.executor.as_str(), "lockstep" | "threaded") {
            return Err(invalid(format!(
                "unknown executor {:?} (lockstep, threaded)",
                self.parallel.executor
            )));
        }
        let c = self.link_cost();
        if !(c.per_message.is_finite() && c.per_byte.is_finite() && c.per_message >= 0.0 && c.per_byte >= 0.0) {
            return Err(invalid("link costs must be finite and >= 0"));
        }
        if self.stream.client_queue == 0 {
            return Err(invalid("stream.client_queue must be >= 1"));
        }
        self.strategy()?;
        Ok(())
    }

    /// Write the merged config as `config.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let p = dir.join("config.toml");
        std::fs::write(&p, self.to_toml())?;
        Ok(p)
    }
}
