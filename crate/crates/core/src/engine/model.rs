//! The built-in toy denoiser.
//!
//! Hidden width `D = heads * head_dim`, feed-forward width `F = 2D`, prompt
//! width `P = prompt_dim`, frame pixels `S = height * width`. Weights, drawn
//! in this order from `ChaCha8Rng::seed_from_u64(weight_seed)` as
//! `Uniform(-a, a)` with `a = 1/sqrt(fan_in)` (`a = 1` for the time vector):
//!
//! 1. `time`: `[D]`
//! 2. per layer: `wq, wk, wv, wo: [D, D]`, `cq: [D, D]`, `ck, cv: [P, D]`,
//!    `co: [D, D]`, `w1: [D, F]`, `w2: [F, D]`
//! 3. `out: [D, D]`
//! 4. `decode: [D, S]`
//!
//! Parameter count: `D + layers * (10 D² + 2 P D) + D² + D S`.
//!
//! Forward pass for token rows `x` at noise level `t`:
//!
//! ```text
//! x  = latent + t * time
//! per layer:
//!   x += MHA(x wq, [ctx_k ; x wk], [ctx_v ; x wv]) wo     (self-attention)
//!   x += MHA(x cq, prompt ck, prompt cv) co               (cross-attention)
//!   x += tanh(x w1) w2
//! eps = x out
//! ```
//!
//! Pixels decode as `clamp(round(128 + 64 * (row · decode)), 0, 255)`, one
//! frame per latent token row.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use super::pipeline::{AttentionBackend, BlockContext, Pipeline};
use super::EngineError;
use crate::attention::{multi_head_attention, AttentionMask};
use crate::frame::GrayFrame;
use crate::kv::{KvConfig, DEFAULT_PAGE_LEN};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub block_len: usize,
    /// `(height, width)` of the frame decoded from each latent token.
    pub frame_shape: (usize, usize),
    pub prompt_dim: usize,
    pub weight_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            head_dim: 8,
            block_len: 4,
            frame_shape: (16, 16),
            prompt_dim: 8,
            weight_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.layers == 0
            || self.heads == 0
            || self.head_dim == 0
            || self.block_len == 0
            || self.prompt_dim == 0
            || self.frame_shape.0 == 0
            || self.frame_shape.1 == 0
        {
            return Err(EngineError::Config("model sizes must all be >= 1"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn ffn(&self) -> usize {
        2 * self.hidden()
    }

    pub fn pixels(&self) -> usize {
        self.frame_shape.0 * self.frame_shape.1
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    cq: Tensor,
    ck: Tensor,
    cv: Tensor,
    co: Tensor,
    w1: Tensor,
    w2: Tensor,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ModelConfig,
    time: Vec<f32>,
    layers: Vec<Layer>,
    out: Tensor,
    decode: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
    let data = (0..rows * cols).map(|_| rng.sample(dist)).collect();
    Tensor::matrix(rows, cols, data).expect("sized buffer")
}

fn fan(n: usize) -> f32 {
    1.0 / libm::sqrtf(n as f32)
}

/// Unit-norm embedding per whitespace-separated word of `text`.
///
/// Word `i` seeds a ChaCha8 stream with `SHA-256("inferix-prompt" ‖ seed ‖ i ‖ word)`
/// and draws `dim` standard normals, then normalises.
pub fn embed_prompt(text: &str, dim: usize, seed: u64) -> Result<Tensor, EngineError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(EngineError::EmptyPrompt);
    }
    let mut data = Vec::with_capacity(words.len() * dim);
    for (i, w) in words.iter().enumerate() {
        let mut h = Sha256::new();
        h.update(b"inferix-prompt");
        h.update(seed.to_le_bytes());
        h.update((i as u64).to_le_bytes());
        h.update(w.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = libm::sqrtf(v.iter().map(|x| x * x).sum::<f32>());
        let norm = if norm > 0.0 { norm } else { 1.0 };
        v.iter_mut().for_each(|x| *x /= norm);
        data.extend(v);
    }
    Ok(Tensor::matrix(words.len(), dim, data)?)
}

impl ToyModel {
    pub fn build(config: ModelConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let d = config.hidden();
        let f = config.ffn();
        let p = config.prompt_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let time = uniform(&mut rng, 1, d, 1.0).into_data();
        let layers = (0..config.layers)
            .map(|_| Layer {
                wq: uniform(&mut rng, d, d, fan(d)),
                wk: uniform(&mut rng, d, d, fan(d)),
                wv: uniform(&mut rng, d, d, fan(d)),
                wo: uniform(&mut rng, d, d, fan(d)),
                cq: uniform(&mut rng, d, d, fan(d)),
                ck: uniform(&mut rng, p, d, fan(p)),
                cv: uniform(&mut rng, p, d, fan(p)),
                co: uniform(&mut rng, d, d, fan(d)),
                w1: uniform(&mut rng, d, f, fan(d)),
                w2: uniform(&mut rng, f, d, fan(f)),
            })
            .collect();
        let out = uniform(&mut rng, d, d, fan(d));
        let decode = uniform(&mut rng, d, config.pixels(), fan(d));
        Ok(Self {
            config,
            time,
            layers,
            out,
            decode,
        })
    }

    pub fn parameter_count(&self) -> usize {
        let per_layer: usize = self
            .layers
            .iter()
            .map(|l| {
                [&l.wq, &l.wk, &l.wv, &l.wo, &l.cq, &l.ck, &l.cv, &l.co, &l.w1, &l.w2]
                    .iter()
                    .map(|t| t.len())
                    .sum::<usize>()
            })
            .sum();
        self.time.len() + per_layer + self.out.len() + self.decode.len()
    }

    /// SHA-256 of the first layer's weights (little-endian f32), truncated to 64 bits.
    pub fn first_layer_checksum(&self) -> u64 {
        let mut h = Sha256::new();
        let l = &self.layers[0];
        for t in [&l.wq, &l.wk, &l.wv, &l.wo, &l.cq, &l.ck, &l.cv, &l.co, &l.w1, &l.w2] {
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        let digest: [u8; 32] = h.finalize().into();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn with_time(&self, latent: &Tensor, t: f32) -> Tensor {
        let mut x = latent.clone();
        let d = self.config.hidden();
        for i in 0..x.rows() {
            for (v, e) in x.row_mut(i).iter_mut().zip(&self.time[..d]) {
                *v += t * e;
            }
        }
        x
    }

    fn feed_forward(&self, layer: &Layer, x: &mut Tensor) -> Result<(), EngineError> {
        let h = x.matmul(&layer.w1)?.map(libm::tanhf);
        x.add_assign(&h.matmul(&layer.w2)?)?;
        Ok(())
    }

    fn cross(&self, layer: &Layer, x: &Tensor, ck: &Tensor, cv: &Tensor) -> Result<Tensor, EngineError> {
        let q = x.matmul(&layer.cq)?;
        let mask = AttentionMask::full(q.rows(), ck.rows());
        let a = multi_head_attention(&q, ck, cv, self.config.heads, &mask)?;
        Ok(a.matmul(&layer.co)?)
    }

    /// Forward pass over one block with cached context; returns the noise
    /// estimate and each layer's `(k, v)` for the block's own tokens.
    fn forward_block(
        &self,
        latent: &Tensor,
        t: f32,
        ctx: &BlockContext,
        backend: &dyn AttentionBackend,
    ) -> Result<(Tensor, Vec<(Tensor, Tensor)>), EngineError> {
        let heads = self.config.heads;
        let mut x = self.with_time(latent, t);
        let mut kvs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let q = x.matmul(&layer.wq)?;
            let k = x.matmul(&layer.wk)?;
            let v = x.matmul(&layer.wv)?;
            let (ck, cv) = &ctx.self_kv[l];
            let keys = Tensor::concat_rows(&[ck, &k])?;
            let vals = Tensor::concat_rows(&[cv, &v])?;
            let mask = AttentionMask::full(q.rows(), keys.rows());
            let a = backend.attend(&q, &keys, &vals, heads, &mask)?;
            x.add_assign(&a.matmul(&layer.wo)?)?;
            let (pk, pv) = &ctx.cross_kv[l];
            let c = self.cross(layer, &x, pk, pv)?;
            x.add_assign(&c)?;
            self.feed_forward(layer, &mut x)?;
            kvs.push((k, v));
        }
        Ok((x.matmul(&self.out)?, kvs))
    }

    /// No-cache forward over a whole sequence of blocks. Block `b` of
    /// `block_times` uses noise level `block_times[b]` and cross-attends to
    /// `prompts[b]` (per-layer `(k, v)`); self-attention follows `mask`.
    pub fn forward_sequence(
        &self,
        rows: &Tensor,
        block_times: &[f32],
        prompts: &[&[(Tensor, Tensor)]],
        mask: &AttentionMask,
    ) -> Result<Tensor, EngineError> {
        let bl = self.config.block_len;
        let heads = self.config.heads;
        if rows.rows() != block_times.len() * bl || prompts.len() != block_times.len() {
            return Err(EngineError::Config("sequence does not match block layout"));
        }
        let mut x = Tensor::concat_rows(
            &block_times
                .iter()
                .enumerate()
                .map(|(b, &t)| Ok(self.with_time(&rows.slice_rows(b * bl, bl)?, t)))
                .collect::<Result<Vec<_>, EngineError>>()?
                .iter()
                .collect::<Vec<_>>(),
        )?;
        for (l, layer) in self.layers.iter().enumerate() {
            let q = x.matmul(&layer.wq)?;
            let k = x.matmul(&layer.wk)?;
            let v = x.matmul(&layer.wv)?;
            let a = multi_head_attention(&q, &k, &v, heads, mask)?;
            x.add_assign(&a.matmul(&layer.wo)?)?;
            let mut parts = Vec::with_capacity(block_times.len());
            for (b, prompt) in prompts.iter().enumerate() {
                let xb = x.slice_rows(b * bl, bl)?;
                let (pk, pv) = &prompt[l];
                parts.push(self.cross(layer, &xb, pk, pv)?);
            }
            let c = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
            x.add_assign(&c)?;
            self.feed_forward(layer, &mut x)?;
        }
        Ok(x.matmul(&self.out)?)
    }
}

impl Pipeline for ToyModel {
    fn name(&self) -> &str {
        "toy"
    }

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn kv_config(&self) -> KvConfig {
        KvConfig {
            num_layers: self.config.layers,
            head_dim: self.config.hidden(),
            page_len: DEFAULT_PAGE_LEN,
            ..Default::default()
        }
    }

    fn prompt_kv(&self, text: &str) -> Result<Vec<(Tensor, Tensor)>, EngineError> {
        let emb = embed_prompt(text, self.config.prompt_dim, self.config.weight_seed)?;
        self.layers
            .iter()
            .map(|l| Ok((emb.matmul(&l.ck)?, emb.matmul(&l.cv)?)))
            .collect()
    }

    fn predict_noise(
        &self,
        latent: &Tensor,
        t: f32,
        ctx: &BlockContext,
        backend: &dyn AttentionBackend,
    ) -> Result<Tensor, EngineError> {
        Ok(self.forward_block(latent, t, ctx, backend)?.0)
    }

    fn clean_kv(
        &self,
        latent: &Tensor,
        ctx: &BlockContext,
        backend: &dyn AttentionBackend,
    ) -> Result<Vec<(Tensor, Tensor)>, EngineError> {
        Ok(self.forward_block(latent, 0.0, ctx, backend)?.1)
    }

    fn decode(&self, latent: &Tensor) -> Result<Vec<GrayFrame>, EngineError> {
        let (h, w) = self.config.frame_shape;
        let px = latent.matmul(&self.decode)?;
        Ok((0..px.rows())
            .map(|i| {
                let pixels = px
                    .row(i)
                    .iter()
                    .map(|&p| libm::roundf(128.0 + 64.0 * p).clamp(0.0, 255.0) as u8)
                    .collect();
                GrayFrame {
                    width: w,
                    height: h,
                    pixels,
                }
            })
            .collect())
    }
}

/// Seeded unit-normal noise for one block: ChaCha8 seeded with `seed`, stream `chunk`.
pub(crate) fn block_noise(config: &ModelConfig, seed: u64, chunk: u32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(chunk));
    let n = config.block_len * config.hidden();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(config.block_len, config.hidden(), data).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let a = ToyModel::build(ModelConfig::default()).unwrap();
        let b = ToyModel::build(ModelConfig::default()).unwrap();
        assert_eq!(a.first_layer_checksum(), b.first_layer_checksum());
        let c = ToyModel::build(ModelConfig {
            weight_seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.first_layer_checksum(), c.first_layer_checksum());
    }

    #[test]
    fn prompt_embeddings() {
        let a = embed_prompt("a", 8, 0).unwrap();
        assert_eq!(a, embed_prompt("a", 8, 0).unwrap());
        assert_ne!(a, embed_prompt("b", 8, 0).unwrap());
        let multi = embed_prompt("a red fox", 8, 0).unwrap();
        assert_eq!(multi.rows(), 3);
        for i in 0..3 {
            let n: f32 = multi.row(i).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(embed_prompt("  ", 8, 0).unwrap_err(), EngineError::EmptyPrompt);
    }

    #[test]
    fn invalid_config() {
        let bad = ModelConfig {
            heads: 0,
            ..Default::default()
        };
        assert!(matches!(ToyModel::build(bad), Err(EngineError::Config(_))));
    }
}
