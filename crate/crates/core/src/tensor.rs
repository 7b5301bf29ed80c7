//! Dense `[Z, H, L, D]` tensor storage and the index primitives the planner
//! and kernels are built on: stable descending argsort, row mean-pooling and
//! row gather/scatter.

use std::cmp::Ordering;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Score used in place of `-inf` in ranking buffers.
pub const NEG_SENTINEL: f64 = f32::MIN as f64;

/// Shape of a [`Tensor4`]: batch, heads, sequence length, head dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
}

impl Dims {
    pub fn new(batch: usize, heads: usize, seq_len: usize, head_dim: usize) -> Result<Self> {
        let dims = Self {
            batch,
            heads,
            seq_len,
            head_dim,
        };
        if dims.as_array().contains(&0) {
            return Err(Error::ZeroDim(dims.as_array()));
        }
        Ok(dims)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.batch, self.heads, self.seq_len, self.head_dim]
    }

    pub fn len(&self) -> usize {
        self.batch * self.heads * self.seq_len * self.head_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `(z, h)` slices.
    pub fn head_count(&self) -> usize {
        self.batch * self.heads
    }

    /// All `(z, h)` pairs in row-major order.
    pub fn head_indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.batch).flat_map(move |z| (0..self.heads).map(move |h| (z, h)))
    }

    /// Causal (query, key) pairs per head: `L(L+1)/2`.
    pub fn causal_pairs(&self) -> u64 {
        let l = self.seq_len as u64;
        l * (l + 1) / 2
    }
}

/// Dense 4-D array of `f32` in row-major `[Z][H][L][D]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Dims::new(dims.batch, dims.heads, dims.seq_len, dims.head_dim)?;
        if data.len() != dims.len() {
            return Err(Error::DataLength {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.len()])
    }

    /// Builds a tensor from `f(z, h, l, d)`.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for (z, h) in dims.head_indices() {
            for l in 0..dims.seq_len {
                for d in 0..dims.head_dim {
                    data.push(f(z, h, l, d));
                }
            }
        }
        Self::new(dims, data)
    }

    /// Single-batch, single-head tensor from a list of rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::DimMismatch("ragged rows".into()));
        }
        let dims = Dims::new(1, 1, rows.len(), width)?;
        Self::new(dims, rows.concat())
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    fn head_offset(&self, z: usize, h: usize) -> usize {
        debug_assert!(z < self.dims.batch && h < self.dims.heads);
        (z * self.dims.heads + h) * self.dims.seq_len * self.dims.head_dim
    }

    /// The `[L, D]` slab for one `(z, h)`.
    pub fn head(&self, z: usize, h: usize) -> &[f32] {
        let start = self.head_offset(z, h);
        &self.data[start..start + self.dims.seq_len * self.dims.head_dim]
    }

    pub fn head_mut(&mut self, z: usize, h: usize) -> &mut [f32] {
        let start = self.head_offset(z, h);
        let len = self.dims.seq_len * self.dims.head_dim;
        &mut self.data[start..start + len]
    }

    pub fn row(&self, z: usize, h: usize, l: usize) -> &[f32] {
        let d = self.dims.head_dim;
        &self.head(z, h)[l * d..(l + 1) * d]
    }

    pub fn row_mut(&mut self, z: usize, h: usize, l: usize) -> &mut [f32] {
        let d = self.dims.head_dim;
        &mut self.head_mut(z, h)[l * d..(l + 1) * d]
    }

    /// Overwrites every head with the given per-head `[L, D]` slabs.
    pub(crate) fn from_heads(dims: Dims, heads: Vec<Vec<f32>>) -> Result<Self> {
        Self::new(dims, heads.concat())
    }
}

/// Row-major `[rows, width]` block of token rows, the result of a gather.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBlock {
    width: usize,
    data: Vec<f32>,
}

impl RowBlock {
    pub fn new(width: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || data.len() % width != 0 {
            return Err(Error::DimMismatch(format!(
                "row block of {} values is not a multiple of width {width}",
                data.len()
            )));
        }
        Ok(Self { width, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Token positions bounded by `domain_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexVec {
    indices: Vec<usize>,
    domain_len: usize,
}

impl IndexVec {
    pub fn new(indices: Vec<usize>, domain_len: usize) -> Result<Self> {
        if let Some(&index) = indices.iter().find(|&&i| i >= domain_len) {
            return Err(Error::GatherOutOfBounds { index, len: domain_len });
        }
        Ok(Self { indices, domain_len })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
            domain_len: n,
        }
    }

    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            domain_len: 0,
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn domain_len(&self) -> usize {
        self.domain_len
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// True when the indices are exactly a permutation of `0..domain_len`.
    pub fn is_permutation(&self) -> bool {
        if self.indices.len() != self.domain_len {
            return false;
        }
        let mut seen = vec![false; self.domain_len];
        self.indices.iter().all(|&i| !std::mem::replace(&mut seen[i], true))
    }

    /// Shifts every index by `offset`, widening the domain accordingly.
    pub fn offset(&self, offset: usize) -> Self {
        Self {
            indices: self.indices.iter().map(|&i| i + offset).collect(),
            domain_len: self.domain_len + offset,
        }
    }
}

// NaN sorts with -inf; -0.0 ties with +0.0.
fn sort_key(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else if x == 0.0 {
        0.0
    } else {
        x
    }
}

/// Indices ordering `scores` from largest to smallest. Equal scores keep
/// ascending index order; `-inf` (and [`NEG_SENTINEL`]) entries sort last.
pub fn argsort_desc_stable(scores: &[f64]) -> Result<IndexVec> {
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // slice::sort_by is stable
    idx.sort_by(|&a, &b| {
        sort_key(scores[b])
            .partial_cmp(&sort_key(scores[a]))
            .unwrap_or(Ordering::Equal)
    });
    Ok(IndexVec {
        indices: idx,
        domain_len: scores.len(),
    })
}

/// Element-wise mean of rows `range` of head `(z, h)`, accumulated in f64.
pub fn mean_pool_rows(t: &Tensor4, z: usize, h: usize, range: Range<usize>) -> Result<Vec<f32>> {
    if range.is_empty() {
        return Err(Error::EmptyPoolingRange);
    }
    let len = t.dims().seq_len;
    if range.end > len {
        return Err(Error::PoolingRangeOutOfBounds {
            start: range.start,
            end: range.end,
            len,
        });
    }
    let count = range.len() as f64;
    let mut sum = vec![0.0f64; t.dims().head_dim];
    for l in range {
        for (s, &x) in sum.iter_mut().zip(t.row(z, h, l)) {
            *s += f64::from(x);
        }
    }
    Ok(sum.into_iter().map(|s| (s / count) as f32).collect())
}

/// Copies token rows `idx[0], idx[1], ...` of head `(z, h)` into a block.
pub fn gather_rows(t: &Tensor4, z: usize, h: usize, idx: &IndexVec) -> Result<RowBlock> {
    let dims = t.dims();
    let mut data = Vec::with_capacity(idx.len() * dims.head_dim);
    for &i in idx.as_slice() {
        if i >= dims.seq_len {
            return Err(Error::GatherOutOfBounds {
                index: i,
                len: dims.seq_len,
            });
        }
        data.extend_from_slice(t.row(z, h, i));
    }
    Ok(RowBlock {
        width: dims.head_dim,
        data,
    })
}

/// Writes block row `i` into token row `idx[i]` of head `(z, h)` of `dst`.
/// Validation happens before any write, so a failed scatter leaves `dst` intact.
pub fn scatter_rows(src: &RowBlock, z: usize, h: usize, idx: &IndexVec, dst: &mut Tensor4) -> Result<()> {
    let dims = dst.dims();
    if src.width() != dims.head_dim {
        return Err(Error::DimMismatch(format!(
            "scatter source width {} vs head dim {}",
            src.width(),
            dims.head_dim
        )));
    }
    if src.rows() != idx.len() {
        return Err(Error::DimMismatch(format!(
            "scatter source has {} rows for {} indices",
            src.rows(),
            idx.len()
        )));
    }
    let mut seen = vec![false; dims.seq_len];
    for &i in idx.as_slice() {
        if i >= dims.seq_len {
            return Err(Error::ScatterOutOfBounds {
                index: i,
                len: dims.seq_len,
            });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::ScatterCollision(i));
        }
    }
    for (row, &i) in src.iter_rows().zip(idx.as_slice()) {
        dst.row_mut(z, h, i).copy_from_slice(row);
    }
    Ok(())
}

/// Inner product of two f32 rows accumulated in f64.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}
