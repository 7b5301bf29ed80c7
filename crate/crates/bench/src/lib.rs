//! Benchmark fixtures and groups shared by the `attention` bench target.

use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, Throughput};
use s2o_core::{
    block_topk_attention, build_plan, dense_causal_attention, flash_causal_attention, generate_synthetic,
    matched_budget, s2o_attention, Dims, KernelConfig, Pattern, SyntheticInstance, SyntheticSpec, TileSpec,
};

pub const SEQ_LENS: [usize; 2] = [1024, 2048];
pub const HEAD_DIM: usize = 64;
pub const SEGMENT_LEN: usize = 128;
pub const TAU: f64 = 0.005;

/// Mixed-stripe instance with one stripe per 16 tokens.
pub fn fixture(seq_len: usize) -> SyntheticInstance {
    let dims = Dims::new(1, 1, seq_len, HEAD_DIM).expect("valid dims");
    let spec = SyntheticSpec::new(Pattern::Mixed, seq_len / 16, 6.0, 0);
    generate_synthetic(&spec, dims).expect("valid spec")
}

pub fn tiles() -> TileSpec {
    TileSpec::square(16).expect("positive tile")
}

fn pairs(seq_len: usize) -> u64 {
    (seq_len as u64) * (seq_len as u64 + 1) / 2
}

/// Dense oracle and tiled flash attention.
pub fn reference(c: &mut Criterion) {
    let mut group = c.benchmark_group("reference");
    group.sample_size(10);
    for l in SEQ_LENS {
        let x = fixture(l);
        group.throughput(Throughput::Elements(pairs(l)));
        group.bench_with_input(BenchmarkId::new("dense", l), &x, |b, x| {
            b.iter(|| dense_causal_attention(black_box(&x.q), &x.k, &x.v).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("flash", l), &x, |b, x| {
            b.iter(|| flash_causal_attention(black_box(&x.q), &x.k, &x.v, tiles()).unwrap())
        });
    }
    group.finish();
}

/// Ranking alone, then the two-pass, no-reorder and fused kernels end to end.
pub fn kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("s2o");
    group.sample_size(10);
    let base = KernelConfig::new(SEGMENT_LEN, TAU, tiles());
    let variants = [
        ("two-pass", base),
        ("no-q-reorder", base.with_q_reorder(false)),
        ("fused", base.fused()),
    ];
    for l in SEQ_LENS {
        let x = fixture(l);
        group.throughput(Throughput::Elements(pairs(l)));
        group.bench_with_input(BenchmarkId::new("build-plan", l), &x, |b, x| {
            b.iter(|| build_plan(black_box(&x.q), &x.k, SEGMENT_LEN).unwrap())
        });
        for (name, cfg) in variants {
            group.bench_with_input(BenchmarkId::new(name, l), &x, |b, x| {
                b.iter(|| s2o_attention(black_box(&x.q), &x.k, &x.v, &cfg).unwrap())
            });
        }
    }
    group.finish();
}

/// Block top-k at the pair budget the two-pass kernel reaches on the same input.
pub fn baseline(c: &mut Criterion) {
    let mut group = c.benchmark_group("block-topk");
    group.sample_size(10);
    for l in SEQ_LENS {
        let x = fixture(l);
        let run = s2o_attention(&x.q, &x.k, &x.v, &KernelConfig::new(SEGMENT_LEN, TAU, tiles())).unwrap();
        let budget = matched_budget(16, 16, l, run.trace.heads[0].computed_pairs()).unwrap();
        group.throughput(Throughput::Elements(pairs(l)));
        group.bench_with_input(BenchmarkId::new("matched", l), &x, |b, x| {
            b.iter(|| block_topk_attention(black_box(&x.q), &x.k, &x.v, budget).unwrap())
        });
    }
    group.finish();
}
