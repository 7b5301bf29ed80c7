use proptest::prelude::*;
use s2o_core::*;

#[derive(Debug, Clone, Copy)]
struct Case {
    seq_len: usize,
    segment_len: usize,
    head_dim: usize,
    rows: usize,
    cols: usize,
    seed: u64,
}

fn case() -> impl Strategy<Value = Case> {
    (
        2usize..96,
        1usize..40,
        prop::sample::select(vec![4usize, 8, 16]),
        1usize..12,
        1usize..12,
        any::<u64>(),
    )
        .prop_map(|(seq_len, s, head_dim, rows, cols, seed)| Case {
            seq_len,
            segment_len: s.min(seq_len),
            head_dim,
            rows,
            cols,
            seed,
        })
}

fn inputs(c: Case) -> SyntheticInstance {
    let dims = Dims::new(1, 2, c.seq_len, c.head_dim).unwrap();
    let count = (c.seq_len / 8).max(1).min(c.seq_len - 1);
    generate_synthetic(&SyntheticSpec::new(Pattern::Mixed, count, 4.0, c.seed), dims).unwrap()
}

fn config(c: Case, tau: f64) -> KernelConfig {
    KernelConfig::new(c.segment_len, tau, TileSpec::new(c.rows, c.cols).unwrap())
}

fn max_abs(a: &Tensor4, b: &Tensor4) -> f32 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn exhaustive_traversal_is_dense(c in case(), reorder in any::<bool>()) {
        let x = inputs(c);
        let run = s2o_attention(&x.q, &x.k, &x.v, &config(c, 0.0).with_q_reorder(reorder)).unwrap();
        let dense = dense_causal_attention(&x.q, &x.k, &x.v).unwrap();
        prop_assert!(max_abs(&run.output, &dense) <= 1e-4);
        let sparsity = sparsity_from_trace(&run.trace, x.q.dims()).unwrap();
        prop_assert!(sparsity.iter().all(|h| h.sparsity == 0.0));
    }

    #[test]
    fn larger_tau_never_sees_more(c in case(), lo in 0.0f64..0.2, step in 0.0f64..0.5, reorder in any::<bool>()) {
        let x = inputs(c);
        let a = s2o_attention(&x.q, &x.k, &x.v, &config(c, lo).with_q_reorder(reorder)).unwrap();
        let b = s2o_attention(&x.q, &x.k, &x.v, &config(c, lo + step).with_q_reorder(reorder)).unwrap();
        for (ha, hb) in a.trace.heads.iter().zip(&b.trace.heads) {
            prop_assert!(ha.row_prefix_keys.iter().zip(&hb.row_prefix_keys).all(|(p, q)| q <= p));
            prop_assert!(hb.computed_pairs() <= ha.computed_pairs());
        }
    }

    #[test]
    fn fused_is_two_pass_without_reorder(c in case(), tau in prop::sample::select(vec![0.0, 0.005, 0.05, 0.5, 1e9])) {
        let x = inputs(c);
        let cfg = config(c, tau).with_q_reorder(false);
        let two = s2o_attention(&x.q, &x.k, &x.v, &cfg).unwrap();
        let fused = s2o_attention(&x.q, &x.k, &x.v, &cfg.fused()).unwrap();
        prop_assert_eq!(two.output, fused.output);
        prop_assert_eq!(two.trace, fused.trace);
    }

    #[test]
    fn visible_sets_are_causal_and_cover_the_segment(c in case(), tau in 0.0f64..1.0, reorder in any::<bool>()) {
        let x = inputs(c);
        let run = s2o_attention(&x.q, &x.k, &x.v, &config(c, tau).with_q_reorder(reorder)).unwrap();
        for (z, h) in x.q.dims().head_indices() {
            let mut pairs = 0u64;
            for i in 0..c.seq_len {
                let keys = run.trace.visible_keys(&run.plan, z, h, i).unwrap();
                let seg = run.plan.segments.range(run.plan.segments.segment_of(i));
                prop_assert!(keys.iter().all(|&j| j <= i));
                prop_assert!((seg.start..=i).all(|j| keys.contains(&j)));
                pairs += keys.len() as u64;
            }
            prop_assert_eq!(pairs, run.trace.head(z, h).unwrap().computed_pairs());
        }
    }

    #[test]
    fn future_poison_leaves_the_past_untouched(c in case(), cut in 0usize..96, tau in prop::sample::select(vec![0.0, 0.005, 0.05, 0.5])) {
        let cut = cut % c.seq_len;
        let x = inputs(c);
        let cfg = config(c, tau);
        let clean = s2o_attention(&x.q, &x.k, &x.v, &cfg).unwrap();
        let (mut k, mut v) = (x.k.clone(), x.v.clone());
        for (z, h) in x.q.dims().head_indices() {
            for j in cut + 1..c.seq_len {
                k.row_mut(z, h, j).fill(f32::NAN);
                v.row_mut(z, h, j).fill(f32::NAN);
            }
        }
        let run = s2o_attention(&x.q, &k, &v, &cfg).unwrap();
        for (z, h) in x.q.dims().head_indices() {
            for i in 0..=cut {
                prop_assert!(run.output.row(z, h, i).iter().all(|y| y.is_finite()));
                prop_assert_eq!(run.output.row(z, h, i), clean.output.row(z, h, i));
            }
        }
    }
}
