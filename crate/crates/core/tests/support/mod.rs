//! Oracles shared by the integration tests (and pulled into the acceptance
//! target by path).
#![allow(dead_code)]

pub mod kv_ref;
pub mod wire_gen;

use inferix_core::attention::AttentionMask;
use inferix_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Textbook softmax attention in f64, one query at a time.
pub fn attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Vec<Vec<f64>> {
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::new();
    for i in 0..q.rows() {
        let mut logits = Vec::new();
        for j in 0..k.rows() {
            if mask.allows(i, j) {
                let s: f64 = (0..d).map(|c| f64::from(q.row(i)[c]) * f64::from(k.row(j)[c])).sum();
                logits.push((j, s * scale));
            }
        }
        let max = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x.1 - max).exp()).sum();
        let mut row = vec![0.0; v.cols()];
        for (j, s) in &logits {
            let w = (s - max).exp() / z;
            for (r, x) in row.iter_mut().zip(v.row(*j)) {
                *r += w * f64::from(*x);
            }
        }
        out.push(row);
    }
    out
}

/// Per-head oracle over `[n, heads * d]` inputs.
pub fn mha_oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: &AttentionMask) -> Vec<Vec<f64>> {
    let d = q.cols() / heads;
    let mut out = vec![vec![0.0; q.cols()]; q.rows()];
    for h in 0..heads {
        let o = attention_oracle(
            &q.slice_cols(h * d, d).unwrap(),
            &k.slice_cols(h * d, d).unwrap(),
            &v.slice_cols(h * d, d).unwrap(),
            mask,
        );
        for (i, row) in o.iter().enumerate() {
            out[i][h * d..(h + 1) * d].copy_from_slice(row);
        }
    }
    out
}

pub fn max_diff(t: &Tensor, oracle: &[Vec<f64>]) -> f64 {
    assert_eq!(t.rows(), oracle.len());
    let mut m: f64 = 0.0;
    for (i, row) in oracle.iter().enumerate() {
        for (a, b) in t.row(i).iter().zip(row) {
            m = m.max((f64::from(*a) - b).abs());
        }
    }
    m
}

/// Random mask with every row keeping at least one key.
pub fn rand_mask(rng: &mut impl Rng, rows: usize, cols: usize) -> AttentionMask {
    let mut allowed: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.6)).collect();
    for i in 0..rows {
        let j = rng.random_range(0..cols);
        allowed[i * cols + j] = true;
    }
    AttentionMask::new(rows, cols, allowed).unwrap()
}
