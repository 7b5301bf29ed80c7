//! Exact dense causal attention and the tiled online-softmax engine.
//!
//! All scores are `q·k / sqrt(D)` accumulated in f64. The dense path
//! materializes each causal row and normalizes explicitly; the tiled path
//! streams key tiles through [`OnlineSoftmaxState`] and is what the sparse
//! kernels reorder and truncate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot_f64, Dims, Tensor4};

/// Query-tile height and key-tile width, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub query_rows: usize,
    pub key_cols: usize,
}

impl TileSpec {
    pub fn new(query_rows: usize, key_cols: usize) -> Result<Self> {
        let t = Self { query_rows, key_cols };
        t.validate()?;
        Ok(t)
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_rows == 0 || self.key_cols == 0 {
            return Err(Error::InvalidConfig(format!(
                "tile sizes must be >= 1, got {}x{}",
                self.query_rows, self.key_cols
            )));
        }
        Ok(())
    }
}

/// Running `(max, normalizer, accumulator)` for one query row.
///
/// `norm` is `sum exp(s - max)` over absorbed keys and `acc` the matching
/// weighted sum of value rows, both expressed relative to `max`.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSoftmaxState {
    pub max: f64,
    pub norm: f64,
    pub acc: Vec<f64>,
}

impl OnlineSoftmaxState {
    /// The empty state `(-inf, 0, 0)`.
    pub fn new(head_dim: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            norm: 0.0,
            acc: vec![0.0; head_dim],
        }
    }

    /// True once any key was absorbed, even if its scores were NaN.
    pub fn is_initialized(&self) -> bool {
        self.norm != 0.0
    }

    /// Normalizer re-expressed relative to `new_max` (`norm * exp(max - new_max)`).
    pub fn norm_at(&self, new_max: f64) -> f64 {
        if self.norm == 0.0 {
            0.0
        } else {
            self.norm * (self.max - new_max).exp()
        }
    }

    /// Merges a tile of pre-scaled scores. `f64::NEG_INFINITY` marks a masked
    /// key, whose value row is never read.
    pub fn absorb(&mut self, scores: &[f64], values: &[f32]) {
        let d = self.acc.len();
        debug_assert_eq!(scores.len() * d, values.len());
        let tile_max = scores
            .iter()
            .copied()
            .filter(|s| *s != f64::NEG_INFINITY)
            .fold(f64::NEG_INFINITY, |m, s| {
                if m.is_nan() || s.is_nan() {
                    f64::NAN
                } else {
                    m.max(s)
                }
            });
        if tile_max.is_nan() {
            self.max = f64::NAN;
            self.norm = f64::NAN;
            self.acc.fill(f64::NAN);
            return;
        }
        if tile_max == f64::NEG_INFINITY {
            return;
        }
        let new_max = self.max.max(tile_max);
        let alpha = if self.max == f64::NEG_INFINITY {
            0.0
        } else {
            (self.max - new_max).exp()
        };
        self.norm *= alpha;
        for a in &mut self.acc {
            *a *= alpha;
        }
        for (&s, v) in scores.iter().zip(values.chunks_exact(d)) {
            if s == f64::NEG_INFINITY {
                continue;
            }
            let p = (s - new_max).exp();
            self.norm += p;
            for (a, &x) in self.acc.iter_mut().zip(v) {
                *a += p * f64::from(x);
            }
        }
        self.max = new_max;
    }

    /// Scores `q` against the flat `[n, D]` key tile and absorbs it.
    /// Keys for which `visible(j)` is false are skipped without touching K or V.
    pub fn update(
        &mut self,
        q: &[f32],
        keys: &[f32],
        values: &[f32],
        visible: impl Fn(usize) -> bool,
        scores: &mut Vec<f64>,
    ) {
        let d = q.len();
        let scale = softmax_scale(d);
        scores.clear();
        scores.extend(keys.chunks_exact(d).enumerate().map(|(j, k)| {
            if visible(j) {
                dot_f64(q, k) * scale
            } else {
                f64::NEG_INFINITY
            }
        }));
        self.absorb(scores, values);
    }

    /// `acc / norm`, or `None` when no key was absorbed.
    pub fn finalize(&self) -> Option<Vec<f64>> {
        if !self.is_initialized() {
            return None;
        }
        Some(self.acc.iter().map(|a| a / self.norm).collect())
    }
}

/// `1 / sqrt(D)`.
#[inline]
pub fn softmax_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// One online-softmax step for a tile of query rows.
///
/// `q_tile` is `[rows, D]`, `k_tile`/`v_tile` are `[cols, D]`, and
/// `mask(r, c)` is true where query `r` may see key `c`.
pub fn os_update(
    states: &[OnlineSoftmaxState],
    q_tile: &[f32],
    k_tile: &[f32],
    v_tile: &[f32],
    mask: impl Fn(usize, usize) -> bool,
) -> Result<Vec<OnlineSoftmaxState>> {
    let d = states.first().map_or(0, |s| s.acc.len());
    if d == 0 || q_tile.len() != states.len() * d || k_tile.len() != v_tile.len() || k_tile.len() % d != 0 {
        return Err(Error::DimMismatch("inconsistent online-softmax tile shapes".into()));
    }
    let mut scores = Vec::new();
    Ok(states
        .iter()
        .zip(q_tile.chunks_exact(d))
        .enumerate()
        .map(|(r, (state, q))| {
            let mut next = state.clone();
            next.update(q, k_tile, v_tile, |c| mask(r, c), &mut scores);
            next
        })
        .collect())
}

pub(crate) fn check_qkv(q: &Tensor4, k: &Tensor4, v: &Tensor4) -> Result<Dims> {
    let dims = q.dims();
    if k.dims() != dims || v.dims() != dims {
        return Err(Error::DimMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            dims.as_array(),
            k.dims().as_array(),
            v.dims().as_array()
        )));
    }
    Ok(dims)
}

/// Explicit softmax of query row `i` over the key rows in `keys`, in f64.
///
/// Panics if `keys` is empty.
pub fn softmax_row(
    q: &Tensor4,
    k: &Tensor4,
    v: &Tensor4,
    (z, h): (usize, usize),
    i: usize,
    keys: &[usize],
) -> Vec<f64> {
    assert!(!keys.is_empty(), "softmax over an empty key set");
    let d = q.dims().head_dim;
    let scale = softmax_scale(d);
    let qi = q.row(z, h, i);
    let scores: Vec<f64> = keys.iter().map(|&j| dot_f64(qi, k.row(z, h, j)) * scale).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0f64; d];
    let mut total = 0.0;
    for (&s, &j) in scores.iter().zip(keys) {
        let w = (s - max).exp();
        total += w;
        for (o, &x) in out.iter_mut().zip(v.row(z, h, j)) {
            *o += w * f64::from(x);
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// Full causal softmax weights for head `(z, h)` as a row-major `[L, L]`
/// matrix (zero above the diagonal).
pub fn causal_attention_weights(q: &Tensor4, k: &Tensor4, z: usize, h: usize) -> Vec<f64> {
    let dims = q.dims();
    let l = dims.seq_len;
    let scale = softmax_scale(dims.head_dim);
    let mut w = vec![0.0f64; l * l];
    for i in 0..l {
        let qi = q.row(z, h, i);
        let row = &mut w[i * l..i * l + i + 1];
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot_f64(qi, k.row(z, h, j)) * scale;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        row.iter_mut().for_each(|s| *s /= total);
    }
    w
}

/// Exact causal attention, `O[i] = softmax_{j<=i}(q_i·k_j / sqrt(D)) V`.
/// This is the reference every approximation is scored against.
pub fn dense_causal_attention(q: &Tensor4, k: &Tensor4, v: &Tensor4) -> Result<Tensor4> {
    let dims = check_qkv(q, k, v)?;
    let heads: Vec<(usize, usize)> = dims.head_indices().collect();
    let slabs: Vec<Vec<f32>> = heads
        .par_iter()
        .map(|&zh| {
            let mut out = Vec::with_capacity(dims.seq_len * dims.head_dim);
            let mut keys = Vec::with_capacity(dims.seq_len);
            for i in 0..dims.seq_len {
                keys.push(i);
                out.extend(softmax_row(q, k, v, zh, i, &keys).into_iter().map(|x| x as f32));
            }
            out
        })
        .collect();
    Tensor4::from_heads(dims, slabs)
}

/// Tiled causal attention over `B_M x B_N` tiles in canonical order.
pub fn flash_causal_attention(q: &Tensor4, k: &Tensor4, v: &Tensor4, tiles: TileSpec) -> Result<Tensor4> {
    let dims = check_qkv(q, k, v)?;
    tiles.validate()?;
    let heads: Vec<(usize, usize)> = dims.head_indices().collect();
    let slabs = heads
        .par_iter()
        .map(|&(z, h)| flash_head(q, k, v, z, h, tiles))
        .collect::<Result<Vec<_>>>()?;
    Tensor4::from_heads(dims, slabs)
}

fn flash_head(q: &Tensor4, k: &Tensor4, v: &Tensor4, z: usize, h: usize, tiles: TileSpec) -> Result<Vec<f32>> {
    let Dims {
        seq_len: l,
        head_dim: d,
        ..
    } = q.dims();
    let (kh, vh) = (k.head(z, h), v.head(z, h));
    let mut out = vec![0.0f32; l * d];
    let mut scores = Vec::with_capacity(tiles.key_cols);
    for q_start in (0..l).step_by(tiles.query_rows) {
        let q_end = (q_start + tiles.query_rows).min(l);
        let mut states = vec![OnlineSoftmaxState::new(d); q_end - q_start];
        // key tiles starting past the last query are fully masked
        for k_start in (0..q_end).step_by(tiles.key_cols) {
            let k_end = (k_start + tiles.key_cols).min(l);
            let keys = &kh[k_start * d..k_end * d];
            let values = &vh[k_start * d..k_end * d];
            for (r, state) in states.iter_mut().enumerate() {
                let i = q_start + r;
                state.update(q.row(z, h, i), keys, values, |c| k_start + c <= i, &mut scores);
            }
        }
        for (r, state) in states.iter().enumerate() {
            let i = q_start + r;
            let o = state.finalize().ok_or(Error::UncoveredRow(i))?;
            for (dst, x) in out[i * d..(i + 1) * d].iter_mut().zip(o) {
                *dst = x as f32;
            }
        }
    }
    Ok(out)
}
