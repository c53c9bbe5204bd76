//! Minimal row-major f32 tensor used throughout the engine.
//!
//! Only the handful of operations the toy transformer, the KV store and the
//! parallel simulation need are provided. Every op is a plain loop so results
//! are bit-reproducible for a given build.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 2-D tensor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Empty `[0, cols]` matrix.
    pub fn empty_rows(cols: usize) -> Self {
        Self {
            shape: vec![0, cols],
            data: Vec::new(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; 0 for a scalar-shaped tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self[n,k] · rhs[k,m]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 {
            return Err(TensorError::Dimension("matmul expects 2-D operands"));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        let (k2, m) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(TensorError::Dimension("matmul inner dimensions differ"));
        }
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &av) in a.iter().enumerate() {
                let b = &rhs.data[p * m..(p + 1) * m];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::Dimension("transpose expects a 2-D tensor"));
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Stack rows of `parts` (all `[_, cols]`) into one matrix.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Dimension("concat_rows needs at least one part"));
        };
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.shape.len() != 2 || p.cols() != cols {
                return Err(TensorError::Dimension("concat_rows column mismatch"));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    /// Rows `start..start + len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        if start + len > self.rows() {
            return Err(TensorError::Dimension("row slice out of range"));
        }
        let c = self.cols();
        Ok(Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        })
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        let c = self.cols();
        if self.shape.len() != 2 || start + len > c {
            return Err(TensorError::Dimension("column slice out of range"));
        }
        let n = self.rows();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Tensor {
            shape: vec![n, len],
            data,
        })
    }

    /// Overwrite columns `start..start + src.cols()` with `src`.
    pub fn write_cols(&mut self, start: usize, src: &Tensor) -> Result<(), TensorError> {
        let c = self.cols();
        let w = src.cols();
        if src.rows() != self.rows() || start + w > c {
            return Err(TensorError::Dimension("column write out of range"));
        }
        for i in 0..self.rows() {
            self.data[i * c + start..i * c + start + w].copy_from_slice(src.row(i));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, rhs: &Tensor) -> Result<(), TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::Dimension("elementwise add shape mismatch"));
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self - scale * rhs`.
    pub fn sub_scaled(&self, rhs: &Tensor, scale: f32) -> Result<Tensor, TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::Dimension("elementwise sub shape mismatch"));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - scale * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Largest absolute elementwise difference; `f32::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Payload size if the tensor were shipped as little-endian f32.
    pub fn byte_len(&self) -> usize {
        self.data.len() * core::mem::size_of::<f32>()
    }
}
