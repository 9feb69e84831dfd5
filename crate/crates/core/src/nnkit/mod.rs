//! A small reverse-mode network kernel: dense and strided 2-D convolution
//! layers, ReLU, sigmoid, batch normalization, flattening and residual blocks,
//! trained with Adam. Tensors are batch-first and row-major.

mod checkpoint;
mod layers;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{BatchNorm, Conv2d, Dense, Layer};
pub use network::{grad_check, AdamConfig, Network};

use crate::error::{param_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return param_err(format!("dims {dims:?} need {n} values, got {}", data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }

    /// Stack equally long rows into a `[rows, len]` batch.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return param_err("cannot build a batch from zero rows");
        };
        let len = first.len();
        let mut data = Vec::with_capacity(rows.len() * len);
        for r in rows {
            if r.len() != len {
                return param_err("rows of a batch must have equal length");
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            dims: vec![rows.len(), len],
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Number of values per batch item.
    pub fn item_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.batch()).map(|b| self.item(b).to_vec()).collect()
    }
}

/// Concatenate `[B, n_i]` tensors along the feature axis.
pub fn concat_features(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return param_err("nothing to concatenate");
    };
    let b = first.batch();
    if parts.iter().any(|t| t.batch() != b) {
        return param_err("concatenated tensors must share the batch size");
    }
    let total: usize = parts.iter().map(|t| t.item_len()).sum();
    let mut data = Vec::with_capacity(b * total);
    for i in 0..b {
        for t in parts {
            data.extend_from_slice(t.item(i));
        }
    }
    Tensor::new(vec![b, total], data)
}

/// Inverse of [`concat_features`]: split `[B, sum(sizes)]` into `[B, size_i]` pieces.
pub fn split_features(t: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if sizes.iter().sum::<usize>() != t.item_len() {
        return param_err(format!(
            "split sizes {sizes:?} do not cover {} features",
            t.item_len()
        ));
    }
    let b = t.batch();
    let mut out: Vec<Tensor> = sizes.iter().map(|&s| Tensor::zeros(vec![b, s])).collect();
    for i in 0..b {
        let row = t.item(i);
        let mut off = 0;
        for (piece, &s) in out.iter_mut().zip(sizes) {
            piece.item_mut(i).copy_from_slice(&row[off..off + s]);
            off += s;
        }
    }
    Ok(out)
}
