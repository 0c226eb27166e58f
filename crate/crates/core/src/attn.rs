//! Cross-attention math and source/target alignment extraction.
//!
//! Matrices are dense and row-major: one row per target token, one column
//! per encoder frame. All indices are 0-based.

use std::ops::{Deref, Range};

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Maximum allowed deviation of a row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Softmax-normalized attention weights of shape `(targets, frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    weights: Array2<f64>,
}

impl AttentionMatrix {
    /// Validates that every entry lies in `[0, 1]` and every row sums to 1.
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        let (m, n) = weights.dim();
        if m > 0 && n == 0 {
            return Err(Error::dim(format!("{m} target rows over zero source frames")));
        }
        for (i, row) in weights.axis_iter(Axis(0)).enumerate() {
            if let Some(bad) = row.iter().find(|w| !(0.0..=1.0).contains(*w)) {
                return Err(Error::arg(format!("row {i} has weight {bad} outside [0, 1]")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::arg(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        Ok(Self { weights })
    }

    /// Builds a matrix from literal rows (handy for fixtures).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("ragged attention rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let weights = Array2::from_shape_vec((rows.len(), n), flat)
            .map_err(|e| Error::dim(e.to_string()))?;
        Self::new(weights)
    }

    /// Wraps weights without validation. The caller guarantees the
    /// row-stochastic invariant (e.g. the rows came straight out of a softmax).
    pub fn new_unchecked(weights: Array2<f64>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.weights
    }

    pub fn num_targets(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.weights.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.weights.row(i)
    }

    /// Sub-matrix made of the given target rows.
    pub fn rows(&self, range: Range<usize>) -> AttentionMatrix {
        Self { weights: self.weights.slice(s![range, ..]).to_owned() }
    }
}

/// Attention matrices for every (layer, head) pair of one decoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    num_layers: usize,
    num_heads: usize,
    // layer-major: index = layer * num_heads + head
    matrices: Vec<AttentionMatrix>,
}

impl AttentionTensor {
    pub fn new(num_layers: usize, num_heads: usize, matrices: Vec<AttentionMatrix>) -> Result<Self> {
        if matrices.len() != num_layers * num_heads {
            return Err(Error::dim(format!(
                "expected {} matrices for {num_layers} layers x {num_heads} heads, got {}",
                num_layers * num_heads,
                matrices.len()
            )));
        }
        if let Some(first) = matrices.first() {
            let shape = first.weights.dim();
            if matrices.iter().any(|m| m.weights.dim() != shape) {
                return Err(Error::dim("attention matrices differ in shape"));
            }
        }
        Ok(Self { num_layers, num_heads, matrices })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// `(targets, frames)` shared by every member matrix.
    pub fn shape(&self) -> (usize, usize) {
        self.matrices.first().map_or((0, 0), |m| m.weights.dim())
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&AttentionMatrix> {
        if layer >= self.num_layers || head >= self.num_heads {
            return None;
        }
        self.matrices.get(layer * self.num_heads + head)
    }

    /// Replaces one head's matrix. The shape must match the rest of the grid.
    pub fn set(&mut self, layer: usize, head: usize, matrix: AttentionMatrix) -> Result<()> {
        if layer >= self.num_layers || head >= self.num_heads {
            return Err(Error::arg(format!("no slot at layer {layer}, head {head}")));
        }
        if matrix.weights.dim() != self.shape() {
            return Err(Error::dim("replacement matrix has a different shape"));
        }
        self.matrices[layer * self.num_heads + head] = matrix;
        Ok(())
    }

    pub fn layer(&self, layer: usize) -> Option<&[AttentionMatrix]> {
        if layer >= self.num_layers {
            return None;
        }
        Some(&self.matrices[layer * self.num_heads..(layer + 1) * self.num_heads])
    }
}

/// Per target token, the index of its most attended source frame.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AlignmentVector(Vec<usize>);

impl AlignmentVector {
    pub fn new(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

impl Deref for AlignmentVector {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for AlignmentVector {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Numerically stable softmax over a single row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // all -inf (or empty): fall back to uniform
        let u = 1.0 / row.len().max(1) as f64;
        row.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √d_k) V`.
///
/// Returns the context vectors together with the attention weights.
pub fn cross_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    d_k: usize,
) -> Result<(Array2<f64>, AttentionMatrix)> {
    if d_k == 0 {
        return Err(Error::arg("d_k must be positive"));
    }
    if q.ncols() != d_k || k.ncols() != d_k {
        return Err(Error::dim(format!(
            "query/key width ({}, {}) does not match d_k = {d_k}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::dim(format!("{} keys but {} values", k.nrows(), v.nrows())));
    }
    if q.nrows() > 0 && k.nrows() == 0 {
        return Err(Error::dim("attention over an empty source"));
    }

    let scale = (d_k as f64).sqrt();
    let mut scores = q.dot(&k.t()) / scale;
    for mut row in scores.axis_iter_mut(Axis(0)) {
        softmax_in_place(row.as_slice_mut().expect("owned rows are contiguous"));
    }
    let context = scores.dot(&v);
    Ok((context, AttentionMatrix::new_unchecked(scores)))
}

/// Element-wise mean over all heads of one decoder layer.
pub fn aggregate_attention(tensor: &AttentionTensor, layer: usize) -> Result<AttentionMatrix> {
    if tensor.num_heads == 0 {
        return Err(Error::arg("tensor has no attention heads"));
    }
    let heads = tensor.layer(layer).ok_or_else(|| {
        Error::arg(format!("layer {layer} out of range for {} layers", tensor.num_layers))
    })?;
    let mut acc = Array2::<f64>::zeros(tensor.shape());
    for head in heads {
        acc += &head.weights;
    }
    acc /= heads.len() as f64;
    Ok(AttentionMatrix::new_unchecked(acc))
}

/// Row-wise argmax; ties go to the lowest frame index.
pub fn compute_alignment(a: &AttentionMatrix) -> Result<AlignmentVector> {
    let (m, n) = a.weights.dim();
    if m > 0 && n == 0 {
        return Err(Error::arg("cannot align tokens against zero source frames"));
    }
    let indices = a
        .weights
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(AlignmentVector(indices))
}
