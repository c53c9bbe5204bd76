//! Reference attention kernels.
//!
//! Single-head scaled dot-product attention with an explicit boolean mask,
//! plus the online-softmax partial form used to shard keys across workers.
//! Multi-head attention is a loop over column slices at call sites.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("dimension error: {0}")]
    Dimension(&'static str),
    #[error("query row {row} has no allowed key")]
    MaskedRow { row: usize },
    #[error("invalid mask size {num_blocks}x{block_len}")]
    EmptyMask { num_blocks: usize, block_len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Boolean `rows x cols` visibility matrix; `true` means the query may attend the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self, AttentionError> {
        if allowed.len() != rows * cols {
            return Err(AttentionError::Dimension("mask data does not match rows*cols"));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Sub-mask for queries `row_start..row_start+rows` and keys `col_start..col_start+cols`.
    pub fn slice(
        &self,
        row_start: usize,
        rows: usize,
        col_start: usize,
        cols: usize,
    ) -> Result<Self, AttentionError> {
        if row_start + rows > self.rows || col_start + cols > self.cols {
            return Err(AttentionError::Dimension("mask slice out of range"));
        }
        Ok(Self::from_fn(rows, cols, |i, j| {
            self.allows(row_start + i, col_start + j)
        }))
    }

    /// First query row with nothing to attend, if any.
    pub fn first_masked_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| !(0..self.cols).any(|j| self.allows(i, j)))
    }
}

/// Full attention inside each block, causal across blocks: token `i` in block
/// `b_i` sees token `j` iff `b_j <= b_i`.
pub fn block_causal_mask(num_blocks: usize, block_len: usize) -> Result<AttentionMask, AttentionError> {
    if num_blocks == 0 || block_len == 0 {
        return Err(AttentionError::EmptyMask {
            num_blocks,
            block_len,
        });
    }
    let n = num_blocks * block_len;
    Ok(AttentionMask::from_fn(n, n, |i, j| j / block_len <= i / block_len))
}

/// Block-causal mask where each block additionally only sees the trailing
/// `window` tokens that precede it (plus its own block in full).
///
/// Mirrors a KV cache that is trimmed to `window` tokens after every block.
pub fn windowed_block_causal_mask(
    num_blocks: usize,
    block_len: usize,
    window: Option<usize>,
) -> Result<AttentionMask, AttentionError> {
    let Some(w) = window else {
        return block_causal_mask(num_blocks, block_len);
    };
    if num_blocks == 0 || block_len == 0 {
        return Err(AttentionError::EmptyMask {
            num_blocks,
            block_len,
        });
    }
    let n = num_blocks * block_len;
    Ok(AttentionMask::from_fn(n, n, |i, j| {
        let b = i / block_len;
        let own_start = b * block_len;
        if j >= own_start {
            j < own_start + block_len
        } else {
            j + w >= own_start
        }
    }))
}

/// Online-softmax accumulator for a set of queries over a subset of keys.
///
/// `acc` holds the unnormalised `Σ exp(s - row_max) v`, `denom` the matching
/// `Σ exp(s - row_max)`. Rows that saw no key have `row_max = -inf`, `denom = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPartial {
    pub acc: Tensor,
    pub row_max: Vec<f32>,
    pub denom: Vec<f32>,
}

impl AttentionPartial {
    /// Identity element for [`merge_partials`].
    pub fn empty(queries: usize, dim: usize) -> Self {
        Self {
            acc: Tensor::zeros(vec![queries, dim]),
            row_max: vec![f32::NEG_INFINITY; queries],
            denom: vec![0.0; queries],
        }
    }

    pub fn queries(&self) -> usize {
        self.row_max.len()
    }

    pub fn dim(&self) -> usize {
        self.acc.cols()
    }

    /// Normalise into the attention output. Fails if some query never saw a key.
    pub fn finalize(&self) -> Result<Tensor, AttentionError> {
        let d = self.dim();
        let mut out = Tensor::zeros(vec![self.queries(), d]);
        for i in 0..self.queries() {
            let den = self.denom[i];
            if den <= 0.0 {
                return Err(AttentionError::MaskedRow { row: i });
            }
            let src = self.acc.row(i);
            for (o, a) in out.row_mut(i).iter_mut().zip(src) {
                *o = a / den;
            }
        }
        Ok(out)
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Result<(), AttentionError> {
    if q.shape().len() != 2 || k.shape().len() != 2 || v.shape().len() != 2 {
        return Err(AttentionError::Dimension("q, k, v must be 2-D"));
    }
    if q.cols() != k.cols() {
        return Err(AttentionError::Dimension("query and key widths differ"));
    }
    if k.rows() != v.rows() {
        return Err(AttentionError::Dimension("key and value counts differ"));
    }
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(AttentionError::Dimension("mask shape does not match q x k"));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |s, (x, y)| s + x * y)
}

/// Partial attention of `q` over one shard of keys/values. Rows whose keys are
/// all masked in this shard are left empty and resolved at merge time.
pub fn attention_partial(
    q: &Tensor,
    k_shard: &Tensor,
    v_shard: &Tensor,
    mask_shard: &AttentionMask,
) -> Result<AttentionPartial, AttentionError> {
    check_qkv(q, k_shard, v_shard, mask_shard)?;
    let n = q.rows();
    let m = k_shard.rows();
    let d = v_shard.cols();
    let scale = 1.0 / libm::sqrtf(q.cols() as f32);
    let mut part = AttentionPartial::empty(n, d);
    let mut logits = vec![0.0f32; m];
    for i in 0..n {
        let qi = q.row(i);
        let mut max = f32::NEG_INFINITY;
        for j in 0..m {
            if mask_shard.allows(i, j) {
                let s = dot(qi, k_shard.row(j)) * scale;
                logits[j] = s;
                if s > max {
                    max = s;
                }
            }
        }
        if max == f32::NEG_INFINITY {
            continue;
        }
        let mut den = 0.0f32;
        let acc = part.acc.row_mut(i);
        for j in 0..m {
            if mask_shard.allows(i, j) {
                let w = libm::expf(logits[j] - max);
                den += w;
                for (a, vj) in acc.iter_mut().zip(v_shard.row(j)) {
                    *a += w * vj;
                }
            }
        }
        part.row_max[i] = max;
        part.denom[i] = den;
    }
    Ok(part)
}

/// `softmax(q kᵀ / √d) v` over the allowed entries of `mask`.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
) -> Result<Tensor, AttentionError> {
    check_qkv(q, k, v, mask)?;
    if let Some(row) = mask.first_masked_row() {
        return Err(AttentionError::MaskedRow { row });
    }
    attention_partial(q, k, v, mask)?.finalize()
}

/// Combine two partials over disjoint key sets of the same queries.
pub fn merge_partials(a: &AttentionPartial, b: &AttentionPartial) -> Result<AttentionPartial, AttentionError> {
    if a.queries() != b.queries() || a.dim() != b.dim() {
        return Err(AttentionError::Dimension("partials cover different queries"));
    }
    let d = a.dim();
    let mut out = AttentionPartial::empty(a.queries(), d);
    for i in 0..a.queries() {
        let (ma, mb) = (a.row_max[i], b.row_max[i]);
        let m = ma.max(mb);
        if m == f32::NEG_INFINITY {
            continue;
        }
        let ca = if ma == f32::NEG_INFINITY { 0.0 } else { libm::expf(ma - m) };
        let cb = if mb == f32::NEG_INFINITY { 0.0 } else { libm::expf(mb - m) };
        out.row_max[i] = m;
        out.denom[i] = a.denom[i] * ca + b.denom[i] * cb;
        let (ra, rb) = (a.acc.row(i), b.acc.row(i));
        for ((o, x), y) in out.acc.row_mut(i).iter_mut().zip(ra).zip(rb) {
            *o = x * ca + y * cb;
        }
    }
    Ok(out)
}

/// Multi-head attention over `[n, heads*d]` inputs: head `h` uses columns `h*d..(h+1)*d`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &AttentionMask,
) -> Result<Tensor, AttentionError> {
    if heads == 0 || !q.cols().is_multiple_of(heads) || k.cols() != q.cols() || v.cols() != q.cols() {
        return Err(AttentionError::Dimension("width not divisible into heads"));
    }
    let d = q.cols() / heads;
    let mut out = Tensor::zeros(vec![q.rows(), q.cols()]);
    for h in 0..heads {
        let o = scaled_dot_attention(
            &q.slice_cols(h * d, d)?,
            &k.slice_cols(h * d, d)?,
            &v.slice_cols(h * d, d)?,
            mask,
        )?;
        out.write_cols(h * d, &o)?;
    }
    Ok(out)
}
