//! Sparse causal attention that reorders queries and prefix keys through
//! index arrays, then walks the reordered prefix tile by tile until the
//! softmax normalizer stops growing.
//!
//! The crate also carries the exact dense and tiled references, a block
//! Top-K baseline, error and sparsity metrics, and a synthetic stripe
//! generator used by the harness and benchmarks.

pub mod attention;
pub mod baselines;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod plan;
pub mod synthetic;
pub mod tensor;

pub use attention::{dense_causal_attention, flash_causal_attention, OnlineSoftmaxState, TileSpec};
pub use baselines::{block_topk_attention, matched_budget, BlockBudget, BlockTopKRun};
pub use error::{Error, Result};
pub use kernel::{s2o_attention, KernelConfig, KernelTrace, S2oRun};
pub use metrics::{concentration_curve, error_metrics, sparsity_from_trace, SparsityReport, VariantConfig};
pub use plan::{build_plan, PermutationPlan, RankingCost, SegmentConfig};
pub use synthetic::{generate_synthetic, Pattern, SyntheticInstance, SyntheticSpec};
pub use tensor::{Dims, IndexVec, Tensor4};
