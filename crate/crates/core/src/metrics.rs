//! Approximation error, sparsity and attention-mass concentration.

use serde::{Deserialize, Serialize};

use crate::attention::softmax_scale;
use crate::baselines::BlockBudget;
use crate::error::{Error, Result};
use crate::kernel::{KernelConfig, KernelTrace};
use crate::plan::RankingCost;
use crate::tensor::{dot_f64, Dims, IndexVec, Tensor4};

/// MSE and MAE for one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadError {
    pub z: usize,
    pub h: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Per-head mean squared and mean absolute difference over the `L*D`
/// entries, accumulated in f64.
pub fn error_metrics(approx: &Tensor4, reference: &Tensor4) -> Result<Vec<HeadError>> {
    let dims = approx.dims();
    if reference.dims() != dims {
        return Err(Error::DimMismatch(format!(
            "{:?} vs {:?}",
            dims.as_array(),
            reference.dims().as_array()
        )));
    }
    let count = (dims.seq_len * dims.head_dim) as f64;
    Ok(dims
        .head_indices()
        .map(|(z, h)| {
            let (mut sq, mut abs) = (0.0f64, 0.0f64);
            for (&a, &b) in approx.head(z, h).iter().zip(reference.head(z, h)) {
                let diff = f64::from(a) - f64::from(b);
                sq += diff * diff;
                abs += diff.abs();
            }
            HeadError {
                z,
                h,
                mse: sq / count,
                mae: abs / count,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSparsity {
    pub z: usize,
    pub h: usize,
    pub computed_pairs: u64,
    pub total_causal_pairs: u64,
    pub sparsity: f64,
}

impl HeadSparsity {
    pub fn new(z: usize, h: usize, computed_pairs: u64, dims: Dims) -> Result<Self> {
        let total = dims.causal_pairs();
        if computed_pairs > total {
            return Err(Error::DimMismatch(format!(
                "{computed_pairs} computed pairs exceed the {total} causal pairs"
            )));
        }
        Ok(Self {
            z,
            h,
            computed_pairs,
            total_causal_pairs: total,
            sparsity: 1.0 - computed_pairs as f64 / total as f64,
        })
    }
}

/// Sparsity per head from a kernel trace: merged Pass 1 and Pass 2 pairs
/// over the `L(L+1)/2` causal pairs.
pub fn sparsity_from_trace(trace: &KernelTrace, dims: Dims) -> Result<Vec<HeadSparsity>> {
    if trace.heads.len() != dims.head_count() {
        return Err(Error::DimMismatch(format!(
            "trace covers {} heads, dims have {}",
            trace.heads.len(),
            dims.head_count()
        )));
    }
    trace
        .heads
        .iter()
        .map(|t| {
            if t.z >= dims.batch || t.h >= dims.heads || t.row_prefix_keys.len() != dims.seq_len {
                return Err(Error::DimMismatch(format!(
                    "trace head ({}, {}) does not fit {:?}",
                    t.z,
                    t.h,
                    dims.as_array()
                )));
            }
            HeadSparsity::new(t.z, t.h, t.computed_pairs(), dims)
        })
        .collect()
}

/// What produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum VariantConfig {
    Dense,
    S2o(KernelConfig),
    BlockTopK(BlockBudget),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub z: usize,
    pub h: usize,
    pub mse: f64,
    pub mae: f64,
    pub computed_pairs: u64,
    pub total_causal_pairs: u64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_mse: f64,
    pub mean_mae: f64,
    pub mean_sparsity: f64,
    /// Total computed pairs over all heads.
    pub computed_pairs: u64,
}

/// Per-head and head-averaged error and sparsity for one run.
///
/// Pass 1 pairs are the exact intra-segment causal triangles; ranking dot
/// products are not counted as attention pairs and are reported separately
/// in `ranking_cost`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub config: VariantConfig,
    pub per_head: Vec<HeadReport>,
    pub aggregate: Aggregate,
    pub ranking_cost: RankingCost,
}

impl SparsityReport {
    pub fn new(
        config: VariantConfig,
        errors: &[HeadError],
        sparsity: &[HeadSparsity],
        ranking_cost: RankingCost,
    ) -> Result<Self> {
        if errors.len() != sparsity.len() || errors.is_empty() {
            return Err(Error::DimMismatch(
                "error and sparsity lists must cover the same heads".into(),
            ));
        }
        let per_head = errors
            .iter()
            .zip(sparsity)
            .map(|(e, s)| {
                if (e.z, e.h) != (s.z, s.h) {
                    return Err(Error::DimMismatch(format!(
                        "head ({}, {}) paired with ({}, {})",
                        e.z, e.h, s.z, s.h
                    )));
                }
                Ok(HeadReport {
                    z: e.z,
                    h: e.h,
                    mse: e.mse,
                    mae: e.mae,
                    computed_pairs: s.computed_pairs,
                    total_causal_pairs: s.total_causal_pairs,
                    sparsity: s.sparsity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = per_head.len() as f64;
        let aggregate = Aggregate {
            mean_mse: per_head.iter().map(|r| r.mse).sum::<f64>() / n,
            mean_mae: per_head.iter().map(|r| r.mae).sum::<f64>() / n,
            mean_sparsity: per_head.iter().map(|r| r.sparsity).sum::<f64>() / n,
            computed_pairs: per_head.iter().map(|r| r.computed_pairs).sum(),
        };
        Ok(Self {
            config,
            per_head,
            aggregate,
            ranking_cost,
        })
    }
}

/// Row-major `[rows, cols]` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MassMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Fraction of a row's mass inside the first `ceil(p * n)` keys of an ordering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationStat {
    pub budget: f64,
    pub frac: f64,
}

/// For each budget `p`, the row-averaged fraction of mass held by the first
/// `ceil(p * n)` keys of `ordering`. Each row is taken relative to its own
/// total over the `n` columns.
pub fn concentration_curve(mass: &MassMatrix, ordering: &IndexVec, budgets: &[f64]) -> Result<Vec<ConcentrationStat>> {
    if ordering.is_empty() {
        return Err(Error::EmptyOrdering);
    }
    if ordering.domain_len() != mass.cols || !ordering.is_permutation() {
        return Err(Error::DimMismatch(format!(
            "ordering must permute the {} mass columns",
            mass.cols
        )));
    }
    if mass.rows == 0 {
        return Err(Error::DimMismatch("no rows".into()));
    }
    let totals: Vec<f64> = (0..mass.rows).map(|r| mass.row(r).iter().sum()).collect();
    if totals.iter().any(|&t| t.is_nan() || t <= 0.0) {
        return Err(Error::InvalidConfig("row with no attention mass".into()));
    }
    let n = ordering.len();
    budgets
        .iter()
        .map(|&p| {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidConfig(format!("budget {p} outside (0, 1]")));
            }
            let take = ((p * n as f64).ceil() as usize).min(n);
            let keys = &ordering.as_slice()[..take];
            let frac = (0..mass.rows)
                .map(|r| {
                    let row = mass.row(r);
                    keys.iter().map(|&j| row[j]).sum::<f64>() / totals[r]
                })
                .sum::<f64>()
                / mass.rows as f64;
            Ok(ConcentrationStat {
                budget: p,
                frac: frac.clamp(0.0, 1.0),
            })
        })
        .collect()
}

/// Attention weights of query rows `rows` over the keys `0..prefix_len`,
/// taken from the full causal softmax of each row (not renormalized).
pub fn prefix_mass(
    q: &Tensor4,
    k: &Tensor4,
    z: usize,
    h: usize,
    rows: std::ops::Range<usize>,
    prefix_len: usize,
) -> Result<MassMatrix> {
    let l = q.dims().seq_len;
    if rows.start < prefix_len || rows.end > l || rows.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "rows {rows:?} must lie after the prefix {prefix_len} within {l} tokens"
        )));
    }
    let scale = softmax_scale(q.dims().head_dim);
    let mut data = Vec::with_capacity(rows.len() * prefix_len);
    let count = rows.len();
    for i in rows {
        let qi = q.row(z, h, i);
        let scores: Vec<f64> = (0..=i).map(|j| dot_f64(qi, k.row(z, h, j)) * scale).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        data.extend(scores[..prefix_len].iter().map(|s| (s - max).exp() / total));
    }
    MassMatrix::new(count, prefix_len, data)
}
