//! Intra-segment lightweight ranking.
//!
//! The sequence is cut into segments of `S` tokens. Within each segment,
//! queries are ordered by their inner product with a fixed guide vector (the
//! mean key of segment 0), and the causal prefix `[0, nS)` is ordered by its
//! inner product with the segment's mean query. Only index arrays are
//! produced; no tensor data moves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argsort_desc_stable, dot_f64, mean_pool_rows, Dims, IndexVec, Tensor4};

/// Segmentation of a length-`L` sequence into `ceil(L/S)` segments; the last
/// one may be short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub seq_len: usize,
    pub segment_len: usize,
    pub count: usize,
    pub last_len: usize,
}

impl SegmentConfig {
    pub fn new(seq_len: usize, segment_len: usize) -> Result<Self> {
        if segment_len == 0 || segment_len > seq_len {
            return Err(Error::InvalidConfig(format!(
                "segment length {segment_len} must be in 1..={seq_len}"
            )));
        }
        let count = seq_len.div_ceil(segment_len);
        Ok(Self {
            seq_len,
            segment_len,
            count,
            last_len: seq_len - (count - 1) * segment_len,
        })
    }

    pub fn start(&self, n: usize) -> usize {
        n * self.segment_len
    }

    pub fn len(&self, n: usize) -> usize {
        if n + 1 == self.count {
            self.last_len
        } else {
            self.segment_len
        }
    }

    pub fn range(&self, n: usize) -> std::ops::Range<usize> {
        self.start(n)..self.start(n) + self.len(n)
    }

    /// Length of the causal prefix `[0, nS)` of segment `n`.
    pub fn prefix_len(&self, n: usize) -> usize {
        self.start(n)
    }

    /// Segment containing token `i`.
    pub fn segment_of(&self, i: usize) -> usize {
        i / self.segment_len
    }
}

/// Where the query-ranking guide vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuideSource {
    /// Mean key of segment 0, shared by every segment.
    FirstSegmentKeyMean,
    /// Supplied by the caller (tests, ablations).
    External,
}

/// Work done while ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingCost {
    /// D-length inner products evaluated.
    pub dot_products: u64,
    /// Items passed through argsort.
    pub sort_items: u64,
}

impl std::ops::Add for RankingCost {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            dot_products: self.dot_products + rhs.dot_products,
            sort_items: self.sort_items + rhs.sort_items,
        }
    }
}

impl std::iter::Sum for RankingCost {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

impl RankingCost {
    /// Dot products of the default plan: one guide score per query plus one
    /// score per causal-prefix key per segment, summed over heads. With
    /// `N = L / S` this is `L + L(N-1)/2` per head.
    pub fn closed_form(dims: Dims, segments: &SegmentConfig) -> u64 {
        let per_head: usize = segments.seq_len + (0..segments.count).map(|n| segments.prefix_len(n)).sum::<usize>();
        (per_head * dims.head_count()) as u64
    }
}

/// Mean-pooled query and key per `(z, h, n)`, indexed `[(z*H + h)*N + n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRepresentatives {
    pub segments: SegmentConfig,
    pub q_mean: Vec<Vec<f32>>,
    pub k_mean: Vec<Vec<f32>>,
}

impl SegmentRepresentatives {
    pub fn q_mean(&self, head: usize, n: usize) -> &[f32] {
        &self.q_mean[head * self.segments.count + n]
    }

    pub fn k_mean(&self, head: usize, n: usize) -> &[f32] {
        &self.k_mean[head * self.segments.count + n]
    }
}

/// Query and prefix-key orderings for every `(z, h, n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub dims: Dims,
    pub segments: SegmentConfig,
    pub guide_source: GuideSource,
    /// Segment-local query offsets, `[(z*H + h)*N + n]`.
    q_perm: Vec<IndexVec>,
    /// Absolute prefix key positions, `[(z*H + h)*N + n]`.
    kv_perm: Vec<IndexVec>,
}

impl PermutationPlan {
    /// Assembles a plan, checking that every `q_perm` is a permutation of its
    /// segment and every `kv_perm` a permutation of its causal prefix.
    pub fn new(
        dims: Dims,
        segments: SegmentConfig,
        guide_source: GuideSource,
        q_perm: Vec<IndexVec>,
        kv_perm: Vec<IndexVec>,
    ) -> Result<Self> {
        if segments.seq_len != dims.seq_len {
            return Err(Error::InvalidConfig(format!(
                "segments cover {} tokens, tensors have {}",
                segments.seq_len, dims.seq_len
            )));
        }
        let expected = dims.head_count() * segments.count;
        if q_perm.len() != expected || kv_perm.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "plan needs {expected} entries per index array, got {} and {}",
                q_perm.len(),
                kv_perm.len()
            )));
        }
        for (slot, (qp, kp)) in q_perm.iter().zip(&kv_perm).enumerate() {
            let n = slot % segments.count;
            if qp.domain_len() != segments.len(n) || !qp.is_permutation() {
                return Err(Error::InvalidConfig(format!(
                    "q_perm of segment {n} is not a permutation"
                )));
            }
            if kp.domain_len() != segments.prefix_len(n) || !kp.is_permutation() {
                return Err(Error::InvalidConfig(format!(
                    "kv_perm of segment {n} is not a permutation of its causal prefix"
                )));
            }
        }
        Ok(Self {
            dims,
            segments,
            guide_source,
            q_perm,
            kv_perm,
        })
    }

    fn slot(&self, z: usize, h: usize, n: usize) -> usize {
        (z * self.dims.heads + h) * self.segments.count + n
    }

    pub fn q_perm(&self, z: usize, h: usize, n: usize) -> &IndexVec {
        &self.q_perm[self.slot(z, h, n)]
    }

    pub fn kv_perm(&self, z: usize, h: usize, n: usize) -> &IndexVec {
        &self.kv_perm[self.slot(z, h, n)]
    }

    /// All query permutations in `[(z*H + h)*N + n]` order.
    pub fn q_perms(&self) -> &[IndexVec] {
        &self.q_perm
    }

    pub fn kv_perms(&self) -> &[IndexVec] {
        &self.kv_perm
    }

    /// Copy of this plan with every `q_perm` replaced by the identity.
    pub fn without_query_reorder(&self) -> Self {
        let mut plan = self.clone();
        for (slot, qp) in plan.q_perm.iter_mut().enumerate() {
            *qp = IndexVec::identity(self.segments.len(slot % self.segments.count));
        }
        plan
    }
}

fn check_segments(t: &Tensor4, segments: &SegmentConfig) -> Result<()> {
    if t.dims().seq_len != segments.seq_len {
        return Err(Error::InvalidConfig(format!(
            "segments cover {} tokens, tensor has {}",
            segments.seq_len,
            t.dims().seq_len
        )));
    }
    Ok(())
}

/// Mean query and mean key of every segment.
pub fn segment_representatives(q: &Tensor4, k: &Tensor4, segments: &SegmentConfig) -> Result<SegmentRepresentatives> {
    check_segments(q, segments)?;
    check_segments(k, segments)?;
    let mut q_mean = Vec::with_capacity(q.dims().head_count() * segments.count);
    let mut k_mean = Vec::with_capacity(q_mean.capacity());
    for (z, h) in q.dims().head_indices() {
        for n in 0..segments.count {
            q_mean.push(mean_pool_rows(q, z, h, segments.range(n))?);
            k_mean.push(mean_pool_rows(k, z, h, segments.range(n))?);
        }
    }
    Ok(SegmentRepresentatives {
        segments: *segments,
        q_mean,
        k_mean,
    })
}

/// Orders the queries of each segment by `<Q[s], guide>`, descending.
/// `guides` holds one D-vector per `(z, h)`; offsets are segment-local.
pub fn rank_queries(
    q: &Tensor4,
    guides: &[Vec<f32>],
    segments: &SegmentConfig,
) -> Result<(Vec<IndexVec>, RankingCost)> {
    check_segments(q, segments)?;
    let dims = q.dims();
    if guides.len() != dims.head_count() || guides.iter().any(|g| g.len() != dims.head_dim) {
        return Err(Error::DimMismatch("one guide vector of length D per head".into()));
    }
    let heads: Vec<(usize, usize)> = dims.head_indices().collect();
    let per_head = heads
        .par_iter()
        .zip(guides)
        .map(|(&(z, h), guide)| {
            let mut perms = Vec::with_capacity(segments.count);
            let mut cost = RankingCost::default();
            for n in 0..segments.count {
                let scores: Vec<f64> = segments.range(n).map(|i| dot_f64(q.row(z, h, i), guide)).collect();
                cost.dot_products += scores.len() as u64;
                cost.sort_items += scores.len() as u64;
                perms.push(argsort_desc_stable(&scores)?);
            }
            Ok((perms, cost))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(flatten(per_head))
}

/// Orders the causal prefix `[0, nS)` of each segment by
/// `<q_mean[n], K[t]>`, descending. Keys at `t >= nS` are never scored;
/// segment 0 gets an empty ordering.
pub fn rank_prefix_keys(reps: &SegmentRepresentatives, k: &Tensor4) -> Result<(Vec<IndexVec>, RankingCost)> {
    let segments = reps.segments;
    check_segments(k, &segments)?;
    let dims = k.dims();
    let heads: Vec<(usize, usize)> = dims.head_indices().collect();
    let per_head = heads
        .par_iter()
        .enumerate()
        .map(|(head, &(z, h))| {
            let mut perms = Vec::with_capacity(segments.count);
            let mut cost = RankingCost::default();
            for n in 0..segments.count {
                let prefix = segments.prefix_len(n);
                if prefix == 0 {
                    perms.push(IndexVec::empty());
                    continue;
                }
                let qm = reps.q_mean(head, n);
                let scores: Vec<f64> = (0..prefix).map(|t| dot_f64(qm, k.row(z, h, t))).collect();
                cost.dot_products += prefix as u64;
                cost.sort_items += prefix as u64;
                perms.push(argsort_desc_stable(&scores)?);
            }
            Ok((perms, cost))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(flatten(per_head))
}

fn flatten(per_head: Vec<(Vec<IndexVec>, RankingCost)>) -> (Vec<IndexVec>, RankingCost) {
    let cost = per_head.iter().map(|(_, c)| *c).sum();
    (per_head.into_iter().flat_map(|(p, _)| p).collect(), cost)
}

/// Builds the full plan for segment length `segment_len`, using the mean key
/// of segment 0 as the shared query guide.
pub fn build_plan(q: &Tensor4, k: &Tensor4, segment_len: usize) -> Result<(PermutationPlan, RankingCost)> {
    let dims = q.dims();
    if k.dims() != dims {
        return Err(Error::DimMismatch("Q and K shapes differ".into()));
    }
    let segments = SegmentConfig::new(dims.seq_len, segment_len)?;
    let reps = segment_representatives(q, k, &segments)?;
    let guides: Vec<Vec<f32>> = (0..dims.head_count())
        .map(|head| reps.k_mean(head, 0).to_vec())
        .collect();
    let (q_perm, q_cost) = rank_queries(q, &guides, &segments)?;
    let (kv_perm, k_cost) = rank_prefix_keys(&reps, k)?;
    let plan = PermutationPlan::new(dims, segments, GuideSource::FirstSegmentKeyMean, q_perm, kv_perm)?;
    Ok((plan, q_cost + k_cost))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[[f32; 2]]) -> Tensor4 {
        Tensor4::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn fixture() -> (Tensor4, Tensor4) {
        (
            rows(&[
                [1.0, 0.0],
                [0.0, 1.0],
                [1.0, 1.0],
                [2.0, -1.0],
                [0.0, 2.0],
                [1.0, -1.0],
                [3.0, 0.0],
                [-1.0, 1.0],
            ]),
            rows(&[
                [1.0, 2.0],
                [0.0, 1.0],
                [-1.0, 1.0],
                [1.0, 0.0],
                [2.0, 1.0],
                [0.0, -1.0],
                [1.0, 1.0],
                [-2.0, 0.0],
            ]),
        )
    }

    #[test]
    fn segment_config_short_tail() {
        let s = SegmentConfig::new(10, 4).unwrap();
        assert_eq!((s.count, s.last_len), (3, 2));
        assert_eq!(s.range(2), 8..10);
        assert_eq!(s.prefix_len(2), 8);
        assert!(SegmentConfig::new(4, 5).is_err());
        assert!(SegmentConfig::new(4, 0).is_err());
    }

    #[test]
    fn representatives_fixture() {
        let (q, k) = fixture();
        let seg = SegmentConfig::new(8, 4).unwrap();
        let reps = segment_representatives(&q, &k, &seg).unwrap();
        assert_eq!(reps.q_mean(0, 0), &[1.0, 0.25]);
        assert_eq!(reps.q_mean(0, 1), &[0.75, 0.5]);
        assert_eq!(reps.k_mean(0, 0), &[0.25, 1.0]);
        assert_eq!(reps.k_mean(0, 1), &[0.25, 0.25]);
    }

    #[test]
    fn representatives_ones_and_global_mean() {
        let ones = Tensor4::from_rows(&vec![vec![1.0f32; 3]; 6]).unwrap();
        let reps = segment_representatives(&ones, &ones, &SegmentConfig::new(6, 4).unwrap()).unwrap();
        assert!(reps.q_mean.iter().all(|m| m == &[1.0, 1.0, 1.0]));
        let (q, k) = fixture();
        let reps = segment_representatives(&q, &k, &SegmentConfig::new(8, 8).unwrap()).unwrap();
        assert_eq!(reps.q_mean(0, 0), &[0.875, 0.375]);
    }

    #[test]
    fn rank_queries_hand_example() {
        let q = rows(&[[1.0, 0.0], [3.0, 0.0], [2.0, 0.0]]);
        let seg = SegmentConfig::new(3, 3).unwrap();
        let (perm, cost) = rank_queries(&q, &[vec![1.0, 0.0]], &seg).unwrap();
        assert_eq!(perm[0].as_slice(), &[1, 2, 0]);
        assert_eq!(cost.dot_products, 3);
        let (scaled, _) = rank_queries(&q, &[vec![17.5, 0.0]], &seg).unwrap();
        assert_eq!(scaled, perm);
        let (zero, _) = rank_queries(&q, &[vec![0.0, 0.0]], &seg).unwrap();
        assert_eq!(zero[0], IndexVec::identity(3));
    }

    #[test]
    fn rank_prefix_keys_hand_example() {
        let q = rows(&[[0.0, 0.0]; 6]);
        let k = rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [-1.0, 0.0], [9.0, 9.0], [9.0, 9.0]]);
        let seg = SegmentConfig::new(6, 2).unwrap();
        let mut reps = segment_representatives(&q, &k, &seg).unwrap();
        reps.q_mean[2] = vec![1.0, 0.0];
        let (perms, cost) = rank_prefix_keys(&reps, &k).unwrap();
        assert!(perms[0].is_empty());
        assert_eq!(perms[2].as_slice(), &[2, 0, 1, 3]);
        // future keys 4, 5 never appear even though they would score highest
        assert_eq!(cost.dot_products, 2 + 4);
    }

    #[test]
    fn identical_keys_keep_prefix_order() {
        let q = Tensor4::from_rows(&vec![vec![1.0f32, 2.0]; 9]).unwrap();
        let (plan, _) = build_plan(&q, &q, 3).unwrap();
        assert_eq!(plan.kv_perm(0, 0, 2).as_slice(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn build_plan_fixture() {
        // expected orderings from tests/oracles/fixtures.py
        let (q, k) = fixture();
        let (plan, cost) = build_plan(&q, &k, 4).unwrap();
        assert_eq!(plan.q_perm(0, 0, 0).as_slice(), &[2, 1, 0, 3]);
        assert_eq!(plan.q_perm(0, 0, 1).as_slice(), &[0, 2, 3, 1]);
        assert!(plan.kv_perm(0, 0, 0).is_empty());
        assert_eq!(plan.kv_perm(0, 0, 1).as_slice(), &[0, 3, 1, 2]);
        assert_eq!(cost.dot_products, 8 + 4);
        assert_eq!(plan.guide_source, GuideSource::FirstSegmentKeyMean);
    }

    #[test]
    fn single_segment_plan() {
        let (q, k) = fixture();
        let (plan, cost) = build_plan(&q, &k, 8).unwrap();
        assert_eq!(plan.segments.count, 1);
        assert!(plan.q_perm(0, 0, 0).is_permutation());
        assert!(plan.kv_perm(0, 0, 0).is_empty());
        assert_eq!(cost.dot_products, 8);
    }

    #[test]
    fn closed_form_cost_large() {
        let dims = Dims::new(1, 1, 4096, 4).unwrap();
        let q = Tensor4::from_fn(dims, |_, _, l, d| ((l * 7 + d * 3) % 11) as f32 - 5.0).unwrap();
        let (_, cost) = build_plan(&q, &q, 512).unwrap();
        assert_eq!(cost.dot_products, 18432);
        assert_eq!(
            cost.dot_products,
            RankingCost::closed_form(dims, &SegmentConfig::new(4096, 512).unwrap())
        );
    }

    #[test]
    fn plan_rejects_non_permutations() {
        let (q, k) = fixture();
        let (plan, _) = build_plan(&q, &k, 4).unwrap();
        let mut kv: Vec<IndexVec> = plan.kv_perms().to_vec();
        kv[1] = IndexVec::new(vec![0, 0, 1, 2], 4).unwrap();
        assert!(PermutationPlan::new(
            plan.dims,
            plan.segments,
            GuideSource::External,
            plan.q_perms().to_vec(),
            kv
        )
        .is_err());
    }
}
