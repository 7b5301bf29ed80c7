//! Two-pass sparse attention with coordinate-scheduled prefix traversal.
//!
//! Pass 1 runs dense causal attention inside each segment and keeps the
//! unnormalized online-softmax state of every row. Pass 2 resumes those
//! states tile by tile: each `B_M` query tile (optionally reordered by the
//! plan's `q_perm`) walks the segment's ranked prefix `kv_perm` in `B_N`-key
//! tiles. A row stops once the next tile would grow its normalizer, and that
//! of every still-active earlier token in the same query tile, by less than
//! `tau` relative to what it already holds. The tile that trips the
//! threshold is discarded for that row, not merged.
//!
//! [`fused_single_pass`] performs the same schedule without materializing
//! the Pass 1 buffers and without query reordering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{check_qkv, OnlineSoftmaxState, TileSpec};
use crate::error::{Error, Result};
use crate::plan::{build_plan, PermutationPlan, RankingCost, SegmentConfig};
use crate::tensor::{gather_rows, scatter_rows, Dims, IndexVec, RowBlock, Tensor4};

/// Kernel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub segment_len: usize,
    /// Early-stop threshold on relative normalizer gain. `0` never stops;
    /// `f64::INFINITY` stops before the first prefix tile.
    pub tau: f64,
    pub tiles: TileSpec,
    /// Traverse queries in `q_perm` order within each segment.
    pub q_reorder: bool,
    /// Use [`fused_single_pass`]; requires `q_reorder == false`.
    pub fused: bool,
    /// Dense local window. Always equal to `segment_len`: the intra-segment
    /// causal block is the window.
    pub window: usize,
}

impl KernelConfig {
    /// Two-pass kernel with query reordering.
    pub fn new(segment_len: usize, tau: f64, tiles: TileSpec) -> Self {
        Self {
            segment_len,
            tau,
            tiles,
            q_reorder: true,
            fused: false,
            window: segment_len,
        }
    }

    pub fn with_q_reorder(mut self, on: bool) -> Self {
        self.q_reorder = on;
        self
    }

    /// Single-pass variant; turns query reordering off.
    pub fn fused(mut self) -> Self {
        self.fused = true;
        self.q_reorder = false;
        self
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        self.tiles.validate()?;
        SegmentConfig::new(seq_len, self.segment_len)?;
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.window != self.segment_len {
            return Err(Error::InvalidConfig(format!(
                "local window {} must equal the segment length {}",
                self.window, self.segment_len
            )));
        }
        if self.fused && self.q_reorder {
            return Err(Error::InvalidConfig("the fused kernel does not reorder queries".into()));
        }
        Ok(())
    }
}

/// Unnormalized Pass 1 states, one per token row, in original row order.
#[derive(Debug, Clone, PartialEq)]
pub struct PassBuffers {
    pub dims: Dims,
    pub segments: SegmentConfig,
    /// `acc`, `[Z, H, L, D]`.
    pub acc: Vec<f64>,
    /// `norm` (the running normalizer), `[Z, H, L]`.
    pub norm: Vec<f64>,
    /// `max`, `[Z, H, L]`.
    pub max: Vec<f64>,
}

impl PassBuffers {
    fn row_slot(&self, z: usize, h: usize, i: usize) -> usize {
        (z * self.dims.heads + h) * self.dims.seq_len + i
    }

    pub fn state(&self, z: usize, h: usize, i: usize) -> OnlineSoftmaxState {
        let slot = self.row_slot(z, h, i);
        let d = self.dims.head_dim;
        OnlineSoftmaxState {
            max: self.max[slot],
            norm: self.norm[slot],
            acc: self.acc[slot * d..(slot + 1) * d].to_vec(),
        }
    }

    /// Gathers the states of rows `idx`.
    pub fn gather(&self, z: usize, h: usize, idx: &IndexVec) -> Vec<OnlineSoftmaxState> {
        idx.as_slice().iter().map(|&i| self.state(z, h, i)).collect()
    }
}

/// Stop point of one query tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTileTrace {
    pub segment: usize,
    /// Tile position within the segment's traversal order.
    pub tile: usize,
    pub rows: usize,
    /// Prefix tiles available, `ceil(prefix_len / B_N)`.
    pub prefix_tiles: usize,
    /// Prefix tiles merged into at least one row.
    pub processed_tiles: usize,
    /// Prefix keys merged by the longest-running row (the last tile may be short).
    pub prefix_keys: usize,
    /// True when every row stopped on the threshold before the prefix ran out.
    pub stopped_early: bool,
}

/// Everything the kernel computed for one `(z, h)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadTrace {
    pub z: usize,
    pub h: usize,
    /// Intra-segment causal pairs, `sum_n len(n)(len(n)+1)/2`.
    pub pass1_pairs: u64,
    /// Prefix pairs actually merged.
    pub pass2_pairs: u64,
    pub tiles: Vec<QueryTileTrace>,
    /// Per token row: how many leading `kv_perm` keys it saw.
    pub row_prefix_keys: Vec<usize>,
}

impl HeadTrace {
    pub fn computed_pairs(&self) -> u64 {
        self.pass1_pairs + self.pass2_pairs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelTrace {
    pub heads: Vec<HeadTrace>,
}

impl KernelTrace {
    pub fn head(&self, z: usize, h: usize) -> Option<&HeadTrace> {
        self.heads.iter().find(|t| t.z == z && t.h == h)
    }

    /// Key positions that contributed to row `i` of head `(z, h)`: the
    /// merged `kv_perm` prefix followed by the segment's causal keys.
    pub fn visible_keys(&self, plan: &PermutationPlan, z: usize, h: usize, i: usize) -> Option<Vec<usize>> {
        let head = self.head(z, h)?;
        let n = plan.segments.segment_of(i);
        let seen = *head.row_prefix_keys.get(i)?;
        let mut keys = plan.kv_perm(z, h, n).as_slice()[..seen].to_vec();
        keys.extend(plan.segments.start(n)..=i);
        Some(keys)
    }
}

/// Stop test for one prefix tile.
///
/// `prev_norm` must already be rescaled to the candidate state's max so the
/// difference is the mass the tile contributed. Returns `true` (stop) when
/// `max_r (new_norm[r] - prev_norm[r]) / prev_norm[r] < tau`. Rows whose
/// gain is NaN (their state already holds NaN) do not vote; with no voting
/// row the tile is kept.
pub fn early_stop_check(prev_norm: &[f64], new_norm: &[f64], tau: f64) -> Result<bool> {
    if prev_norm.len() != new_norm.len() {
        return Err(Error::DimMismatch(format!(
            "{} previous normalizers vs {} new",
            prev_norm.len(),
            new_norm.len()
        )));
    }
    let mut max_gain = None::<f64>;
    for (&prev, &new) in prev_norm.iter().zip(new_norm) {
        if prev <= 0.0 {
            return Err(Error::UninitializedState);
        }
        let gain = (new - prev) / prev;
        if !gain.is_nan() {
            max_gain = Some(max_gain.map_or(gain, |m| m.max(gain)));
        }
    }
    Ok(max_gain.is_some_and(|g| g < tau))
}

fn check_inputs(q: &Tensor4, k: &Tensor4, v: &Tensor4, cfg: &KernelConfig) -> Result<(Dims, SegmentConfig)> {
    let dims = check_qkv(q, k, v)?;
    cfg.validate(dims.seq_len)?;
    Ok((dims, SegmentConfig::new(dims.seq_len, cfg.segment_len)?))
}

fn check_plan(plan: &PermutationPlan, dims: Dims, cfg: &KernelConfig) -> Result<()> {
    if plan.dims != dims || plan.segments.segment_len != cfg.segment_len {
        return Err(Error::InvalidConfig(format!(
            "plan built for segment length {} on {:?}, kernel configured for {} on {:?}",
            plan.segments.segment_len,
            plan.dims.as_array(),
            cfg.segment_len,
            dims.as_array()
        )));
    }
    Ok(())
}

fn triangle(n: usize) -> u64 {
    (n as u64) * (n as u64 + 1) / 2
}

/// Dense causal attention of the given rows against their own segment,
/// walking key tiles of `B_N` from the segment start.
fn intra_segment(
    states: &mut [OnlineSoftmaxState],
    rows: &[usize],
    (q, k, v): (&Tensor4, &Tensor4, &Tensor4),
    (z, h): (usize, usize),
    seg: std::ops::Range<usize>,
    key_cols: usize,
    scores: &mut Vec<f64>,
) {
    let d = q.dims().head_dim;
    let (kh, vh) = (k.head(z, h), v.head(z, h));
    let last = rows.iter().copied().max().unwrap_or(seg.start);
    for k_start in (seg.start..=last).step_by(key_cols) {
        let k_end = (k_start + key_cols).min(seg.end);
        let keys = &kh[k_start * d..k_end * d];
        let values = &vh[k_start * d..k_end * d];
        for (state, &i) in states.iter_mut().zip(rows) {
            state.update(q.row(z, h, i), keys, values, |c| k_start + c <= i, scores);
        }
    }
}

struct Traversal {
    processed_tiles: usize,
    /// Prefix keys merged per row, aligned with the tile's rows.
    row_keys: Vec<usize>,
    stopped_early: bool,
}

/// Walks `kv_perm` in `B_N` tiles with per-row early stopping.
///
/// Rows vote in original token order: a row keeps going while any active
/// row at or before it in the sequence still gains at least `tau`, so a row
/// is never held back or pushed on by a later token. The tile lives until
/// its last active row stops, which happens when the maximum gain over its
/// active rows drops below `tau`.
#[allow(clippy::too_many_arguments)]
fn traverse_prefix(
    states: &mut [OnlineSoftmaxState],
    q_rows: &RowBlock,
    rows: &[usize],
    (k, v): (&Tensor4, &Tensor4),
    (z, h): (usize, usize),
    kv_perm: &IndexVec,
    cfg: &KernelConfig,
    scores: &mut Vec<f64>,
) -> Result<Traversal> {
    let seq_len = k.dims().seq_len;
    let mut out = Traversal {
        processed_tiles: 0,
        row_keys: vec![0; rows.len()],
        stopped_early: false,
    };
    let mut by_token: Vec<usize> = (0..rows.len()).collect();
    by_token.sort_by_key(|&r| rows[r]);
    let mut active = vec![true; rows.len()];
    let mut prev_norm = Vec::with_capacity(rows.len());
    let mut new_norm = Vec::with_capacity(rows.len());
    let mut trial = Vec::with_capacity(rows.len());
    for chunk in kv_perm.as_slice().chunks(cfg.tiles.key_cols) {
        let idx = IndexVec::new(chunk.to_vec(), seq_len)?;
        let kt = gather_rows(k, z, h, &idx)?;
        let vt = gather_rows(v, z, h, &idx)?;
        trial.clear();
        prev_norm.clear();
        new_norm.clear();
        for &r in by_token.iter().filter(|&&r| active[r]) {
            let mut next = states[r].clone();
            next.update(q_rows.row(r), kt.data(), vt.data(), |c| chunk[c] <= rows[r], scores);
            prev_norm.push(states[r].norm_at(next.max));
            new_norm.push(next.norm);
            trial.push((r, next));
        }
        for (j, (r, next)) in trial.drain(..).enumerate() {
            if early_stop_check(&prev_norm[..=j], &new_norm[..=j], cfg.tau)? {
                active[r] = false;
            } else {
                states[r] = next;
                out.row_keys[r] += chunk.len();
            }
        }
        if active.contains(&true) {
            out.processed_tiles += 1;
        } else {
            out.stopped_early = true;
            break;
        }
    }
    Ok(out)
}

fn finalize_into(states: &[OnlineSoftmaxState], rows: &[usize], out: &mut Vec<f32>) -> Result<()> {
    for (state, &i) in states.iter().zip(rows) {
        let o = state.finalize().ok_or(Error::UncoveredRow(i))?;
        out.extend(o.into_iter().map(|x| x as f32));
    }
    Ok(())
}

/// Dense intra-segment causal attention; returns the unnormalized state of
/// every row.
pub fn pass1_dense_init(q: &Tensor4, k: &Tensor4, v: &Tensor4, cfg: &KernelConfig) -> Result<PassBuffers> {
    let (dims, segments) = check_inputs(q, k, v, cfg)?;
    let heads: Vec<(usize, usize)> = dims.head_indices().collect();
    let per_head: Vec<Vec<OnlineSoftmaxState>> = heads
        .par_iter()
        .map(|&zh| {
            let mut scores = Vec::with_capacity(cfg.tiles.key_cols);
            let mut all = Vec::with_capacity(dims.seq_len);
            for n in 0..segments.count {
                let seg = segments.range(n);
                let rows: Vec<usize> = seg.clone().collect();
                for tile in rows.chunks(cfg.tiles.query_rows) {
                    let mut states = vec![OnlineSoftmaxState::new(dims.head_dim); tile.len()];
                    intra_segment(
                        &mut states,
                        tile,
                        (q, k, v),
                        zh,
                        seg.clone(),
                        cfg.tiles.key_cols,
                        &mut scores,
                    );
                    all.extend(states);
                }
            }
            all
        })
        .collect();

    let rows = dims.head_count() * dims.seq_len;
    let mut bufs = PassBuffers {
        dims,
        segments,
        acc: Vec::with_capacity(rows * dims.head_dim),
        norm: Vec::with_capacity(rows),
        max: Vec::with_capacity(rows),
    };
    for state in per_head.into_iter().flatten() {
        bufs.max.push(state.max);
        bufs.norm.push(state.norm);
        bufs.acc.extend(state.acc);
    }
    Ok(bufs)
}

/// Resumes the Pass 1 states and traverses each segment's ranked prefix with
/// early stopping. Outputs are scattered back to original row order.
pub fn pass2_sparse(
    q: &Tensor4,
    k: &Tensor4,
    v: &Tensor4,
    bufs: &PassBuffers,
    plan: &PermutationPlan,
    cfg: &KernelConfig,
) -> Result<(Tensor4, KernelTrace)> {
    let (dims, segments) = check_inputs(q, k, v, cfg)?;
    check_plan(plan, dims, cfg)?;
    if bufs.dims != dims || bufs.segments != segments {
        return Err(Error::InvalidConfig(
            "pass buffers were built for a different shape or segmentation".into(),
        ));
    }
    let single = Dims::new(1, 1, dims.seq_len, dims.head_dim)?;
    let heads: Vec<(usize, usize)> = dims.head_indices().collect();
    let results = heads
        .par_iter()
        .map(|&(z, h)| -> Result<(Vec<f32>, HeadTrace)> {
            let mut out = Tensor4::zeros(single)?;
            let mut trace = HeadTrace {
                z,
                h,
                pass1_pairs: 0,
                pass2_pairs: 0,
                tiles: Vec::new(),
                row_prefix_keys: vec![0; dims.seq_len],
            };
            let mut scores = Vec::with_capacity(cfg.tiles.key_cols);
            for n in 0..segments.count {
                let len = segments.len(n);
                trace.pass1_pairs += triangle(len);
                let local = if cfg.q_reorder {
                    plan.q_perm(z, h, n).clone()
                } else {
                    IndexVec::identity(len)
                };
                let order = local.offset(segments.start(n));
                let q_rows = gather_rows(q, z, h, &order)?;
                let mut states = bufs.gather(z, h, &order);
                let kv_perm = plan.kv_perm(z, h, n);
                let mut seg_out = Vec::with_capacity(len * dims.head_dim);
                let tile_rows = cfg.tiles.query_rows;
                for (t, rows) in order.as_slice().chunks(tile_rows).enumerate() {
                    let lo = t * tile_rows;
                    let mut tile_states = states[lo..lo + rows.len()].to_vec();
                    let tile_q = RowBlock::new(
                        dims.head_dim,
                        q_rows.data()[lo * dims.head_dim..(lo + rows.len()) * dims.head_dim].to_vec(),
                    )?;
                    let walk = traverse_prefix(
                        &mut tile_states,
                        &tile_q,
                        rows,
                        (k, v),
                        (z, h),
                        kv_perm,
                        cfg,
                        &mut scores,
                    )?;
                    record(&mut trace, n, t, rows, kv_perm.len(), &walk, cfg);
                    finalize_into(&tile_states, rows, &mut seg_out)?;
                    states[lo..lo + rows.len()].clone_from_slice(&tile_states);
                }
                scatter_rows(&RowBlock::new(dims.head_dim, seg_out)?, 0, 0, &order, &mut out)?;
            }
            Ok((out.into_data(), trace))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(dims, results)
}

fn record(
    trace: &mut HeadTrace,
    n: usize,
    t: usize,
    rows: &[usize],
    prefix_len: usize,
    walk: &Traversal,
    cfg: &KernelConfig,
) {
    for (&i, &keys) in rows.iter().zip(&walk.row_keys) {
        trace.row_prefix_keys[i] = keys;
        trace.pass2_pairs += keys as u64;
    }
    trace.tiles.push(QueryTileTrace {
        segment: n,
        tile: t,
        rows: rows.len(),
        prefix_tiles: prefix_len.div_ceil(cfg.tiles.key_cols),
        processed_tiles: walk.processed_tiles,
        prefix_keys: walk.row_keys.iter().copied().max().unwrap_or(0),
        stopped_early: walk.stopped_early,
    });
}

fn assemble(dims: Dims, results: Vec<(Vec<f32>, HeadTrace)>) -> Result<(Tensor4, KernelTrace)> {
    let (slabs, heads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((Tensor4::from_heads(dims, slabs)?, KernelTrace { heads }))
}

/// Single-pass variant: each query tile, in original order, runs its
/// intra-segment causal tiles and then the ranked prefix traversal, keeping
/// states local. Produces the same outputs and trace as the two-pass kernel
/// with query reordering off.
pub fn fused_single_pass(
    q: &Tensor4,
    k: &Tensor4,
    v: &Tensor4,
    plan: &PermutationPlan,
    cfg: &KernelConfig,
) -> Result<(Tensor4, KernelTrace)> {
    let (dims, segments) = check_inputs(q, k, v, cfg)?;
    check_plan(plan, dims, cfg)?;
    if !cfg.fused {
        return Err(Error::InvalidConfig(
            "fused_single_pass needs a fused kernel config".into(),
        ));
    }
    let heads: Vec<(usize, usize)> = dims.head_indices().collect();
    let results = heads
        .par_iter()
        .map(|&(z, h)| -> Result<(Vec<f32>, HeadTrace)> {
            let mut out = Vec::with_capacity(dims.seq_len * dims.head_dim);
            let mut trace = HeadTrace {
                z,
                h,
                pass1_pairs: 0,
                pass2_pairs: 0,
                tiles: Vec::new(),
                row_prefix_keys: vec![0; dims.seq_len],
            };
            let mut scores = Vec::with_capacity(cfg.tiles.key_cols);
            for n in 0..segments.count {
                let seg = segments.range(n);
                trace.pass1_pairs += triangle(seg.len());
                let kv_perm = plan.kv_perm(z, h, n);
                let rows: Vec<usize> = seg.clone().collect();
                for (t, tile) in rows.chunks(cfg.tiles.query_rows).enumerate() {
                    let mut states = vec![OnlineSoftmaxState::new(dims.head_dim); tile.len()];
                    intra_segment(
                        &mut states,
                        tile,
                        (q, k, v),
                        (z, h),
                        seg.clone(),
                        cfg.tiles.key_cols,
                        &mut scores,
                    );
                    let tile_q = RowBlock::new(
                        dims.head_dim,
                        q.head(z, h)[tile[0] * dims.head_dim..(tile[0] + tile.len()) * dims.head_dim].to_vec(),
                    )?;
                    let walk = traverse_prefix(&mut states, &tile_q, tile, (k, v), (z, h), kv_perm, cfg, &mut scores)?;
                    record(&mut trace, n, t, tile, kv_perm.len(), &walk, cfg);
                    finalize_into(&states, tile, &mut out)?;
                }
            }
            Ok((out, trace))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(dims, results)
}

/// Output of [`s2o_attention`].
#[derive(Debug, Clone)]
pub struct S2oRun {
    pub output: Tensor4,
    pub trace: KernelTrace,
    pub plan: PermutationPlan,
    pub cost: RankingCost,
}

/// Ranking followed by the configured kernel variant.
pub fn s2o_attention(q: &Tensor4, k: &Tensor4, v: &Tensor4, cfg: &KernelConfig) -> Result<S2oRun> {
    let (dims, _) = check_inputs(q, k, v, cfg)?;
    let (plan, cost) = build_plan(q, k, cfg.segment_len)?;
    debug_assert_eq!(plan.dims, dims);
    let (output, trace) = if cfg.fused {
        fused_single_pass(q, k, v, &plan, cfg)?
    } else {
        let bufs = pass1_dense_init(q, k, v, cfg)?;
        pass2_sparse(q, k, v, &bufs, &plan, cfg)?
    };
    Ok(S2oRun {
        output,
        trace,
        plan,
        cost,
    })
}

#[cfg(test)]
// Fixture values are frozen oracle output, so they stay as printed.
#[allow(clippy::approx_constant, clippy::needless_range_loop, clippy::redundant_guards)]
mod tests {
    use super::*;
    use crate::attention::dense_causal_attention;

    fn rows(r: &[[f32; 2]]) -> Tensor4 {
        Tensor4::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn fixture() -> (Tensor4, Tensor4, Tensor4) {
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
            rows(&[
                [1.0, 0.0],
                [0.0, 2.0],
                [3.0, 1.0],
                [-1.0, -1.0],
                [2.0, 2.0],
                [0.0, 1.0],
                [1.0, -2.0],
                [4.0, 0.0],
            ]),
        )
    }

    fn tiles2() -> TileSpec {
        TileSpec::square(2).unwrap()
    }

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop_check(&[1.0, 2.0], &[1.004, 2.02], 0.005).unwrap());
        assert!(early_stop_check(&[1.0, 2.0], &[1.004, 2.008], 0.005).unwrap());
        assert!(!early_stop_check(&[1.0], &[1.0 + 1e-300], 0.0).unwrap());
        assert!(early_stop_check(&[1.0], &[50.0], 1e9).unwrap());
        assert_eq!(early_stop_check(&[0.0], &[1.0], 0.1), Err(Error::UninitializedState));
        assert_eq!(Error::UninitializedState.to_string(), "uninitialized state");
        assert!(!early_stop_check(&[1.0, f64::NAN], &[1.5, f64::NAN], 0.1).unwrap());
        assert!(early_stop_check(&[1.0, f64::NAN], &[1.01, f64::NAN], 0.1).unwrap());
        assert!(!early_stop_check(&[f64::NAN], &[f64::NAN], 0.1).unwrap());
    }

    // (m, l, acc) per row from tests/oracles/fixtures.py
    const PASS1_S4: [(f64, f64, [f64; 2]); 8] = [
        (0.7071067811865475, 1.0, [1.0, 0.0]),
        (1.414213562373095, 1.4930686913952398, [1.0, 0.9861373827904797]),
        (
            2.1213203435596424,
            1.3629899845379763,
            [1.3596197503112861, 0.6061067189721906],
        ),
        (
            1.414213562373095,
            1.3921331776492187,
            [-0.6694536862320584, -0.7311103066812334],
        ),
        (1.414213562373095, 1.0, [2.0, 2.0]),
        (0.7071067811865475, 2.0, [2.0, 3.0]),
        (
            4.242640687119285,
            1.1342428461942011,
            [2.1198732501037623, 1.774623095882915],
        ),
        (
            1.414213562373095,
            1.4828632346417383,
            [4.482863234641738, -0.12661371855714232],
        ),
    ];

    #[test]
    fn pass1_matches_partial_softmax_fixture() {
        let (q, k, v) = fixture();
        for tiles in [TileSpec::square(1).unwrap(), tiles2(), TileSpec::new(3, 4).unwrap()] {
            let bufs = pass1_dense_init(&q, &k, &v, &KernelConfig::new(4, 0.0, tiles)).unwrap();
            for (i, (m, l, acc)) in PASS1_S4.iter().enumerate() {
                let s = bufs.state(0, 0, i);
                assert!((s.max - m).abs() < 1e-12, "row {i}");
                // rows share the same max, so norm and acc compare directly
                assert!((s.norm - l).abs() < 1e-12, "row {i}");
                for d in 0..2 {
                    assert!((s.acc[d] - acc[d]).abs() < 1e-12, "row {i}");
                }
            }
        }
    }

    #[test]
    fn pass1_with_unit_segments_is_self_attention() {
        let (q, k, v) = fixture();
        let bufs = pass1_dense_init(&q, &k, &v, &KernelConfig::new(1, 0.0, tiles2())).unwrap();
        for i in 0..8 {
            let s = bufs.state(0, 0, i);
            assert_eq!(s.norm, 1.0);
            assert_eq!(s.acc, v.row(0, 0, i).iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
            let want = crate::tensor::dot_f64(q.row(0, 0, i), k.row(0, 0, i)) / 2f64.sqrt();
            assert_eq!(s.max, want);
        }
    }

    #[test]
    fn pass1_single_segment_finalizes_to_dense() {
        let (q, k, v) = fixture();
        let cfg = KernelConfig::new(8, 0.0, tiles2());
        let bufs = pass1_dense_init(&q, &k, &v, &cfg).unwrap();
        let dense = dense_causal_attention(&q, &k, &v).unwrap();
        for i in 0..8 {
            let o = bufs.state(0, 0, i).finalize().unwrap();
            for d in 0..2 {
                assert!((o[d] - f64::from(dense.row(0, 0, i)[d])).abs() < 1e-6);
            }
        }
    }

    // tau -> output rows, from tests/oracles/fixtures.py
    fn golden(tau: f64) -> ([[f64; 2]; 8], u64) {
        let head = [
            [1.0, 0.0],
            [0.6697615493266569, 0.6604769013466862],
            [0.9975273228234083, 0.4446890482307157],
            [-0.4808833644511727, -0.5251726763065869],
        ];
        let tail: [[f64; 2]; 4] = if tau == 0.0 {
            [
                [1.2057763713847012, 0.6466348392291518],
                [0.44445065264244615, 0.7226926217300027],
                [1.528716756844234, 1.212311365390155],
                [2.1890038396158413, 0.4847343423980432],
            ]
        } else if tau == 0.5 {
            [
                [1.0959169751199136, 0.327999038981211],
                [0.3833092781506322, 0.6166907218493678],
                [1.5428600342902197, 1.2043396479839512],
                [2.1890038396158413, 0.4847343423980432],
            ]
        } else if tau == 0.65 {
            [
                [1.0959169751199136, 0.327999038981211],
                [1.0, 1.5],
                [1.5428600342902197, 1.2043396479839512],
                [3.0231130760516858, -0.08538462320682753],
            ]
        } else {
            [
                [2.0, 2.0],
                [1.0, 1.5],
                [1.8689765222824293, 1.5645883082599317],
                [3.0231130760516858, -0.08538462320682753],
            ]
        };
        let pairs = match tau {
            t if t == 0.0 => 36,
            t if t == 0.5 => 30,
            t if t == 0.65 => 24,
            _ => 20,
        };
        let mut out = [[0.0; 2]; 8];
        out[..4].copy_from_slice(&head);
        out[4..].copy_from_slice(&tail);
        (out, pairs)
    }

    #[test]
    fn two_pass_matches_early_stop_fixture() {
        let (q, k, v) = fixture();
        for tau in [0.0, 0.5, 0.65, 1e9] {
            let run = s2o_attention(&q, &k, &v, &KernelConfig::new(4, tau, tiles2())).unwrap();
            let (want, pairs) = golden(tau);
            for (i, row) in want.iter().enumerate() {
                for d in 0..2 {
                    let got = f64::from(run.output.row(0, 0, i)[d]);
                    assert!((got - row[d]).abs() < 1e-6, "tau {tau} row {i}: {got} vs {}", row[d]);
                }
            }
            assert_eq!(run.trace.heads[0].computed_pairs(), pairs, "tau {tau}");
        }
    }

    #[test]
    fn tau_half_trace_shape() {
        let (q, k, v) = fixture();
        let run = s2o_attention(&q, &k, &v, &KernelConfig::new(4, 0.5, tiles2())).unwrap();
        let head = &run.trace.heads[0];
        let seg1: Vec<_> = head.tiles.iter().filter(|t| t.segment == 1).collect();
        assert_eq!(seg1.len(), 2);
        assert_eq!((seg1[0].processed_tiles, seg1[0].stopped_early), (1, true));
        assert_eq!((seg1[1].processed_tiles, seg1[1].stopped_early), (2, false));
        assert_eq!(run.trace.visible_keys(&run.plan, 0, 0, 6).unwrap(), vec![0, 3, 4, 5, 6]);
        assert!(head.tiles.iter().all(|t| t.processed_tiles <= t.prefix_tiles));
    }

    #[test]
    fn fused_matches_two_pass_without_reorder() {
        let (q, k, v) = fixture();
        for tau in [0.0, 0.5, 0.65, 1e9] {
            let base = KernelConfig::new(4, tau, tiles2()).with_q_reorder(false);
            let two = s2o_attention(&q, &k, &v, &base).unwrap();
            let fused = s2o_attention(&q, &k, &v, &base.fused()).unwrap();
            assert_eq!(two.output, fused.output);
            assert_eq!(two.trace, fused.trace);
        }
    }

    #[test]
    fn config_validation() {
        let t = tiles2();
        assert!(KernelConfig::new(4, -1.0, t).validate(8).is_err());
        assert!(KernelConfig::new(4, f64::NAN, t).validate(8).is_err());
        assert!(KernelConfig::new(9, 0.0, t).validate(8).is_err());
        let mut both = KernelConfig::new(4, 0.0, t).fused();
        both.q_reorder = true;
        assert!(both.validate(8).is_err());
        let mut w = KernelConfig::new(4, 0.0, t);
        w.window = 2;
        assert!(w.validate(8).is_err());
        assert!(KernelConfig::new(4, f64::INFINITY, t).validate(8).is_ok());
    }

    #[test]
    fn plan_segment_mismatch_rejected() {
        let (q, k, v) = fixture();
        let cfg = KernelConfig::new(4, 0.0, tiles2());
        let bufs = pass1_dense_init(&q, &k, &v, &cfg).unwrap();
        let (plan, _) = build_plan(&q, &k, 2).unwrap();
        assert!(matches!(
            pass2_sparse(&q, &k, &v, &bufs, &plan, &cfg),
            Err(Error::InvalidConfig(_))
        ));
        assert!(fused_single_pass(&q, &k, &v, &plan, &cfg.fused()).is_err());
    }

    #[test]
    fn single_segment_equals_dense() {
        let (q, k, v) = fixture();
        let run = s2o_attention(&q, &k, &v, &KernelConfig::new(8, 0.3, tiles2())).unwrap();
        let dense = dense_causal_attention(&q, &k, &v).unwrap();
        for (a, b) in run.output.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(run.trace.heads[0].pass2_pairs, 0);
    }

    #[test]
    fn poisoned_future_rows_leave_earlier_rows_alone() {
        let (q, k, v) = fixture();
        for tau in [0.0, 0.3, 0.5, 0.65, 1e9] {
            for reorder in [true, false] {
                let cfg = KernelConfig::new(4, tau, tiles2()).with_q_reorder(reorder);
                let clean = s2o_attention(&q, &k, &v, &cfg).unwrap();
                for i in 0..7 {
                    let (mut kp, mut vp) = (k.clone(), v.clone());
                    for j in i + 1..8 {
                        kp.row_mut(0, 0, j).fill(f32::NAN);
                        vp.row_mut(0, 0, j).fill(f32::NAN);
                    }
                    let run = s2o_attention(&q, &kp, &vp, &cfg).unwrap();
                    for r in 0..=i {
                        assert_eq!(
                            run.output.row(0, 0, r),
                            clean.output.row(0, 0, r),
                            "tau {tau} cut {i} row {r}"
                        );
                        assert_eq!(
                            run.trace.heads[0].row_prefix_keys[r],
                            clean.trace.heads[0].row_prefix_keys[r]
                        );
                    }
                }
            }
        }
    }
}
