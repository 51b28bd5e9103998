use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A non-empty set of equal-length feature vectors, stored row-major.
///
/// Row order is only a storage order; permutation-invariant aggregators
/// ignore it. `source_shape` records the `(H, W)` grid when the rows came
/// from a feature map, which positional columns may use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    source_shape: Option<(usize, usize)>,
}

impl FeatureSet {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::contract("feature set must contain at least one element"));
        }
        if dim == 0 {
            return Err(Error::contract("feature dimension must be positive"));
        }
        if rows * dim != data.len() {
            return Err(Error::Dimension {
                op: "feature_set",
                left: vec![rows, dim],
                right: vec![data.len()],
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "feature set row {} holds a non-finite value",
                pos / dim
            )));
        }
        Ok(Self {
            rows,
            dim,
            data,
            source_shape: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::contract(format!(
                "row {bad} has length {}, expected {dim}",
                rows[bad].len()
            )));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    /// A set of one-dimensional elements.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [n, k] => Self::new(*n, *k, t.data().to_vec()),
            other => Err(Error::contract(format!(
                "feature set needs a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    /// Records the `(H, W)` grid the rows were read from in row-major order.
    pub fn with_source_shape(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.rows {
            return Err(Error::contract(format!(
                "source shape {height}x{width} does not match {} rows",
                self.rows
            )));
        }
        self.source_shape = Some((height, width));
        Ok(self)
    }

    pub fn cardinality(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn source_shape(&self) -> Option<(usize, usize)> {
        self.source_shape
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Reorders rows so that row `i` of the result is row `perm[i]` of `self`.
    /// The grid provenance is dropped since it no longer matches the order.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.rows];
        if perm.len() != self.rows
            || perm
                .iter()
                .any(|&p| p >= self.rows || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::contract("permutation does not match the set cardinality"));
        }
        let data = perm.iter().flat_map(|&p| self.row(p).iter().copied()).collect();
        Self::new(self.rows, self.dim, data)
    }

    /// Appends `width` extra columns given row-major in `extra`.
    pub(crate) fn with_columns(&self, extra: &[f64], width: usize) -> Self {
        debug_assert_eq!(extra.len(), self.rows * width);
        let mut data = Vec::with_capacity(self.rows * (self.dim + width));
        for (i, row) in self.rows().enumerate() {
            data.extend_from_slice(row);
            data.extend_from_slice(&extra[i * width..(i + 1) * width]);
        }
        Self {
            rows: self.rows,
            dim: self.dim + width,
            data,
            source_shape: self.source_shape,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.rows, self.dim], self.data.clone())
    }

    /// Rows sorted lexicographically; equal for two sets exactly when they
    /// hold the same multiset of elements.
    pub fn canonical_rows(&self) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = self.rows().map(<[f64]>::to_vec).collect();
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        rows
    }
}
