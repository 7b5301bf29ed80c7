//! Fixed-granularity block Top-K sparse attention.
//!
//! Each query block keeps its diagonal region (every causal key from the
//! first key block overlapping the query block onward) plus the `k` prefix
//! key blocks carrying the most exact attention mass. Block mass comes from
//! the dense softmax, so this is an upper bound on any block selector that
//! estimates importance from samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{check_qkv, softmax_row, softmax_scale};
use crate::error::{Error, Result};
use crate::tensor::{dot_f64, Dims, Tensor4};

/// Block shape and per-query-block prefix budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockBudget {
    pub block_rows: usize,
    pub block_cols: usize,
    /// Prefix blocks retained per query block.
    pub k: usize,
}

impl BlockBudget {
    pub fn new(block_rows: usize, block_cols: usize, k: usize) -> Result<Self> {
        let b = Self {
            block_rows,
            block_cols,
            k,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_rows == 0 || self.block_cols == 0 {
            return Err(Error::InvalidConfig("block dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of whole key blocks strictly before query block starting at `row`.
    fn prefix_blocks(&self, row: usize) -> usize {
        row / self.block_cols
    }

    /// Pairs computed per head under this budget; depends only on shape.
    pub fn pair_count(&self, seq_len: usize) -> u64 {
        let mut pairs = 0u64;
        for r0 in (0..seq_len).step_by(self.block_rows) {
            let r1 = (r0 + self.block_rows).min(seq_len);
            let p = self.prefix_blocks(r0);
            let diag_start = p * self.block_cols;
            pairs += ((r1 - r0) * self.k.min(p) * self.block_cols) as u64;
            pairs += (r0..r1).map(|i| (i - diag_start + 1) as u64).sum::<u64>();
        }
        pairs
    }

    /// Largest useful `k` for a sequence of length `seq_len`.
    pub fn max_k(&self, seq_len: usize) -> usize {
        let last = (seq_len - 1) / self.block_rows * self.block_rows;
        self.prefix_blocks(last)
    }
}

/// The budget with these block dimensions whose pair count is closest to
/// `target_pairs` per head; ties go to the smaller `k`.
pub fn matched_budget(block_rows: usize, block_cols: usize, seq_len: usize, target_pairs: u64) -> Result<BlockBudget> {
    let probe = BlockBudget::new(block_rows, block_cols, 0)?;
    if seq_len == 0 {
        return Err(Error::InvalidConfig("sequence length must be >= 1".into()));
    }
    let best = (0..=probe.max_k(seq_len))
        .min_by_key(|&k| BlockBudget { k, ..probe }.pair_count(seq_len).abs_diff(target_pairs))
        .unwrap_or(0);
    Ok(BlockBudget { k: best, ..probe })
}

/// Result of [`block_topk_attention`].
#[derive(Debug, Clone)]
pub struct BlockTopKRun {
    pub output: Tensor4,
    /// Computed (query, key) pairs per `(z, h)`, row-major.
    pub pairs_per_head: Vec<u64>,
}

impl BlockTopKRun {
    pub fn pair_count(&self) -> u64 {
        self.pairs_per_head.iter().sum()
    }
}

/// Exact softmax mass each prefix key block receives from each query block.
/// `masses[b][c]` for query block `b` and prefix key block `c`.
pub fn block_masses(
    q: &Tensor4,
    k: &Tensor4,
    z: usize,
    h: usize,
    block_rows: usize,
    block_cols: usize,
) -> Vec<Vec<f64>> {
    let l = q.dims().seq_len;
    let scale = softmax_scale(q.dims().head_dim);
    let mut scores = vec![0.0f64; l];
    let mut out = Vec::new();
    for r0 in (0..l).step_by(block_rows) {
        let r1 = (r0 + block_rows).min(l);
        let p = r0 / block_cols;
        let mut mass = vec![0.0f64; p];
        for i in r0..r1 {
            let qi = q.row(z, h, i);
            let row = &mut scores[..=i];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot_f64(qi, k.row(z, h, j)) * scale;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|s| (s - max).exp()).sum();
            for (c, m) in mass.iter_mut().enumerate() {
                *m += row[c * block_cols..(c + 1) * block_cols]
                    .iter()
                    .map(|s| (s - max).exp())
                    .sum::<f64>()
                    / total;
            }
        }
        out.push(mass);
    }
    out
}

/// Indices of the `k` largest masses, ties to the lower index, returned in
/// ascending block order.
pub fn select_blocks(mass: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&x, &y| mass[y].total_cmp(&mass[x]));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Block Top-K attention with oracle block selection.
pub fn block_topk_attention(q: &Tensor4, k: &Tensor4, v: &Tensor4, budget: BlockBudget) -> Result<BlockTopKRun> {
    let dims = check_qkv(q, k, v)?;
    budget.validate()?;
    let heads: Vec<(usize, usize)> = dims.head_indices().collect();
    let results: Vec<(Vec<f32>, u64)> = heads
        .par_iter()
        .map(|&(z, h)| topk_head(q, k, v, z, h, budget, dims))
        .collect();
    let (slabs, pairs_per_head): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(BlockTopKRun {
        output: Tensor4::from_heads(dims, slabs)?,
        pairs_per_head,
    })
}

fn topk_head(
    q: &Tensor4,
    k: &Tensor4,
    v: &Tensor4,
    z: usize,
    h: usize,
    budget: BlockBudget,
    dims: Dims,
) -> (Vec<f32>, u64) {
    let l = dims.seq_len;
    let masses = block_masses(q, k, z, h, budget.block_rows, budget.block_cols);
    let mut out = Vec::with_capacity(l * dims.head_dim);
    let mut pairs = 0u64;
    for (b, mass) in masses.iter().enumerate() {
        let r0 = b * budget.block_rows;
        let r1 = (r0 + budget.block_rows).min(l);
        let kept = select_blocks(mass, budget.k);
        let diag_start = mass.len() * budget.block_cols;
        let mut keys: Vec<usize> = kept
            .iter()
            .flat_map(|&c| c * budget.block_cols..(c + 1) * budget.block_cols)
            .collect();
        let prefix = keys.len();
        for i in r0..r1 {
            keys.truncate(prefix);
            keys.extend(diag_start..=i);
            pairs += keys.len() as u64;
            out.extend(softmax_row(q, k, v, (z, h), i, &keys).into_iter().map(|x| x as f32));
        }
    }
    (out, pairs)
}
