//! Attention heatmaps in original or permuted order, as binary PGM or CSV.
//!
//! In the permuted modes each segment's rows show its ranked prefix keys
//! first (in `kv_perm` order), then its own keys and the masked future in
//! natural order. `QkvPerm` also reorders the rows of each segment by
//! `q_perm`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use s2o_core::attention::causal_attention_weights;
use s2o_core::metrics::MassMatrix;
use s2o_core::{build_plan, Tensor4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest side drawn one pixel per (query, key) without a pool factor.
pub const MAX_UNPOOLED: usize = 1024;
/// Largest sequence for which full weight matrices are materialized.
pub const MAX_SEQ_LEN: usize = 4096;
/// Decades of relative mass spread over the grey levels.
pub const DECADES: f64 = 6.0;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("sequence length {0} needs an explicit pool factor (limit {MAX_UNPOOLED} without pooling)")]
    NeedsPooling(usize),
    #[error("sequence length {0} exceeds the heatmap limit of {MAX_SEQ_LEN}")]
    TooLong(usize),
    #[error("pool factor must be >= 1")]
    ZeroPool,
    #[error("head ({0}, {1}) out of range")]
    NoSuchHead(usize, usize),
    #[error("unknown heatmap mode {0:?}")]
    UnknownMode(String),
    #[error(transparent)]
    Core(#[from] s2o_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapMode {
    Original,
    KvPerm,
    QkvPerm,
}

impl FromStr for HeatmapMode {
    type Err = HeatmapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(HeatmapMode::Original),
            "kv-perm" => Ok(HeatmapMode::KvPerm),
            "qkv-perm" => Ok(HeatmapMode::QkvPerm),
            other => Err(HeatmapError::UnknownMode(other.to_string())),
        }
    }
}

/// Row and column orders for the display: `rows[r]` is the query drawn on
/// line `r`, `cols[i][c]` the key drawn in column `c` of query `i`'s line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisplayOrder {
    pub rows: Vec<usize>,
    pub cols: Vec<Vec<usize>>,
}

impl DisplayOrder {
    pub fn identity(seq_len: usize) -> Self {
        Self {
            rows: (0..seq_len).collect(),
            cols: vec![(0..seq_len).collect(); seq_len],
        }
    }
}

pub fn display_order(
    q: &Tensor4,
    k: &Tensor4,
    z: usize,
    h: usize,
    mode: HeatmapMode,
    segment_len: usize,
) -> Result<DisplayOrder, HeatmapError> {
    let l = q.dims().seq_len;
    if mode == HeatmapMode::Original {
        return Ok(DisplayOrder::identity(l));
    }
    let (plan, _) = build_plan(q, k, segment_len)?;
    let segs = plan.segments;
    let mut order = DisplayOrder::identity(l);
    for n in 0..segs.count {
        let start = segs.start(n);
        let prefix = plan.kv_perm(z, h, n).as_slice();
        for i in segs.range(n) {
            order.cols[i][..start].copy_from_slice(prefix);
        }
        if mode == HeatmapMode::QkvPerm {
            for (r, &off) in plan.q_perm(z, h, n).as_slice().iter().enumerate() {
                order.rows[start + r] = start + off;
            }
        }
    }
    Ok(order)
}

/// Dense causal weights of head `(z, h)` laid out in `mode`'s display order.
pub fn heatmap_weights(
    q: &Tensor4,
    k: &Tensor4,
    z: usize,
    h: usize,
    mode: HeatmapMode,
    segment_len: usize,
) -> Result<MassMatrix, HeatmapError> {
    let dims = q.dims();
    if z >= dims.batch || h >= dims.heads {
        return Err(HeatmapError::NoSuchHead(z, h));
    }
    let l = dims.seq_len;
    if l > MAX_SEQ_LEN {
        return Err(HeatmapError::TooLong(l));
    }
    let order = display_order(q, k, z, h, mode, segment_len)?;
    let w = causal_attention_weights(q, k, z, h);
    let mut data = Vec::with_capacity(l * l);
    for &i in &order.rows {
        data.extend(order.cols[i].iter().map(|&j| w[i * l + j]));
    }
    Ok(MassMatrix::new(l, l, data)?)
}

/// Mean over `factor x factor` cells; edge cells average what they cover.
pub fn pool(m: &MassMatrix, factor: usize) -> Result<MassMatrix, HeatmapError> {
    if factor == 0 {
        return Err(HeatmapError::ZeroPool);
    }
    let (rows, cols) = (m.rows.div_ceil(factor), m.cols.div_ceil(factor));
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (r0, r1) = (r * factor, ((r + 1) * factor).min(m.rows));
            let (c0, c1) = (c * factor, ((c + 1) * factor).min(m.cols));
            let sum: f64 = (r0..r1).map(|i| m.row(i)[c0..c1].iter().sum::<f64>()).sum();
            data[r * cols + c] = sum / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    Ok(MassMatrix::new(rows, cols, data)?)
}

/// Grey level: 0 for zero mass, otherwise `1..=255` spanning [`DECADES`]
/// decades below the map's maximum.
fn grey(m: f64, max: f64) -> u8 {
    if m.is_nan() || max.is_nan() || m <= 0.0 || max <= 0.0 {
        return 0;
    }
    let level = 1.0 + 254.0 * (1.0 + (m / max).log10() / DECADES);
    level.round().clamp(1.0, 255.0) as u8
}

pub fn pgm_header(width: usize, height: usize) -> String {
    format!("P5\n{width} {height}\n255\n")
}

pub fn encode_pgm(m: &MassMatrix) -> Vec<u8> {
    let max = m.data.iter().copied().fold(0.0, f64::max);
    let mut out = pgm_header(m.cols, m.rows).into_bytes();
    out.extend(m.data.iter().map(|&x| grey(x, max)));
    out
}

pub fn encode_csv(m: &MassMatrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows {
        let line: Vec<String> = m.row(r).iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}", line.join(",")).expect("write to string");
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), HeatmapError> {
    std::fs::write(path, bytes).map_err(|source| HeatmapError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the map (pooled by `pool_factor` when given) as PGM and/or CSV.
/// Maps wider than [`MAX_UNPOOLED`] must be pooled explicitly.
pub fn export_heatmap(
    m: &MassMatrix,
    pool_factor: Option<usize>,
    pgm: Option<&Path>,
    csv: Option<&Path>,
) -> Result<MassMatrix, HeatmapError> {
    let map = match pool_factor {
        Some(f) => pool(m, f)?,
        None if m.rows.max(m.cols) > MAX_UNPOOLED => return Err(HeatmapError::NeedsPooling(m.rows.max(m.cols))),
        None => m.clone(),
    };
    if let Some(path) = pgm {
        write(path, &encode_pgm(&map))?;
    }
    if let Some(path) = csv {
        write(path, encode_csv(&map).as_bytes())?;
    }
    Ok(map)
}
