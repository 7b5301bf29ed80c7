//! Configuration sweeps over kernel variants, segment lengths, thresholds
//! and baseline budgets, with JSON and CSV reports.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use s2o_core::metrics::{error_metrics, sparsity_from_trace, HeadSparsity, SparsityReport, VariantConfig};
use s2o_core::{
    block_topk_attention, dense_causal_attention, generate_synthetic, matched_budget, s2o_attention, BlockBudget, Dims,
    KernelConfig, RankingCost, SyntheticSpec, Tensor4, TileSpec,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_file::{load_tensor_file, FormatError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Core(#[from] s2o_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl SweepError {
    /// Whether the error stems from the arguments rather than the run.
    pub fn is_usage(&self) -> bool {
        matches!(self, SweepError::InvalidConfig(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    TwoPass,
    Fused,
    NoQReorder,
    BaselineTopk,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::TwoPass => "two-pass",
            Variant::Fused => "fused",
            Variant::NoQReorder => "no-q-reorder",
            Variant::BaselineTopk => "baseline-topk",
        }
    }

    fn kernel(self, segment_len: usize, tau: f64, tiles: TileSpec) -> Option<KernelConfig> {
        let cfg = KernelConfig::new(segment_len, tau, tiles);
        match self {
            Variant::TwoPass => Some(cfg),
            Variant::Fused => Some(cfg.fused()),
            Variant::NoQReorder => Some(cfg.with_q_reorder(false)),
            Variant::BaselineTopk => None,
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            Variant::TwoPass,
            Variant::Fused,
            Variant::NoQReorder,
            Variant::BaselineTopk,
        ]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum InputSource {
    Synthetic {
        spec: SyntheticSpec,
        dims: Dims,
    },
    /// Directory holding `q.s2ot`, `k.s2ot` and `v.s2ot`.
    Files {
        dir: PathBuf,
    },
}

/// Baseline budgets: explicit `k` values, or one budget matched to the pair
/// count of every S2O point in the sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopkBudgets {
    List(Vec<usize>),
    Matched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: InputSource,
    pub segment_lens: Vec<usize>,
    pub taus: Vec<f64>,
    pub tiles: TileSpec,
    pub variants: Vec<Variant>,
    pub topk: TopkBudgets,
    /// Timed runs after one warm-up; the median is reported. `0` times the
    /// warm-up run alone.
    pub repeats: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: &str| Err(SweepError::InvalidConfig(m.to_string()));
        if self.variants.is_empty() {
            return bad("no variants");
        }
        let has_kernel = self.variants.iter().any(|v| *v != Variant::BaselineTopk);
        if has_kernel && (self.segment_lens.is_empty() || self.taus.is_empty()) {
            return bad("segment length and tau lists must be non-empty");
        }
        if self.taus.iter().any(|t| t.is_nan() || *t < 0.0) {
            return bad("tau values must be >= 0");
        }
        if self.segment_lens.contains(&0) {
            return bad("segment lengths must be >= 1");
        }
        self.tiles
            .validate()
            .map_err(|e| SweepError::InvalidConfig(e.to_string()))?;
        if self.variants.contains(&Variant::BaselineTopk) {
            match &self.topk {
                TopkBudgets::List(ks) if ks.is_empty() => return bad("baseline budget list is empty"),
                TopkBudgets::Matched if !has_kernel => return bad("matched baseline budgets need an S2O variant"),
                _ => {}
            }
        }
        if let InputSource::Synthetic { spec, dims } = &self.input {
            spec.validate(*dims)
                .map_err(|e| SweepError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub variant: Variant,
    pub segment_len: Option<usize>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub point: SweepPoint,
    pub report: SparsityReport,
    /// Median wall time in seconds; informational only.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: RunConfig,
    pub dims: Dims,
    /// False when a point failed; `points` then holds what finished before it.
    pub complete: bool,
    pub failed_point: Option<SweepPoint>,
    pub error: Option<String>,
    pub points: Vec<PointResult>,
}

/// One CSV summary line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub variant: String,
    #[serde(rename = "S")]
    pub segment_len: Option<usize>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub sparsity: f64,
    pub mse: f64,
    pub mae: f64,
    pub pairs: u64,
    pub dot_products: u64,
    pub seconds: f64,
}

impl From<&PointResult> for CsvRow {
    fn from(p: &PointResult) -> Self {
        let a = &p.report.aggregate;
        Self {
            variant: p.point.variant.name().to_string(),
            segment_len: p.point.segment_len,
            tau: p.point.tau,
            k: p.point.k,
            sparsity: a.mean_sparsity,
            mse: a.mean_mse,
            mae: a.mean_mae,
            pairs: a.computed_pairs,
            dot_products: p.report.ranking_cost.dot_products,
            seconds: p.seconds,
        }
    }
}

pub fn load_inputs(input: &InputSource) -> Result<(Tensor4, Tensor4, Tensor4), SweepError> {
    match input {
        InputSource::Synthetic { spec, dims } => {
            let inst = generate_synthetic(spec, *dims)?;
            Ok((inst.q, inst.k, inst.v))
        }
        InputSource::Files { dir } => {
            let q = load_tensor_file(dir.join("q.s2ot"))?;
            let k = load_tensor_file(dir.join("k.s2ot"))?;
            let v = load_tensor_file(dir.join("v.s2ot"))?;
            if k.dims() != q.dims() || v.dims() != q.dims() {
                return Err(SweepError::InvalidConfig(format!(
                    "q, k and v in {} differ in shape",
                    dir.display()
                )));
            }
            Ok((q, k, v))
        }
    }
}

struct Inputs<'a> {
    q: &'a Tensor4,
    k: &'a Tensor4,
    v: &'a Tensor4,
    dense: &'a Tensor4,
}

fn evaluate(inputs: &Inputs<'_>, point: &SweepPoint, tiles: TileSpec) -> Result<SparsityReport, SweepError> {
    let dims = inputs.q.dims();
    let errors_of = |out: &Tensor4| error_metrics(out, inputs.dense);
    match point
        .variant
        .kernel(point.segment_len.unwrap_or(0), point.tau.unwrap_or(0.0), tiles)
    {
        Some(cfg) => {
            let run = s2o_attention(inputs.q, inputs.k, inputs.v, &cfg)?;
            let sparsity = sparsity_from_trace(&run.trace, dims)?;
            Ok(SparsityReport::new(
                VariantConfig::S2o(cfg),
                &errors_of(&run.output)?,
                &sparsity,
                run.cost,
            )?)
        }
        None => {
            let budget = BlockBudget::new(tiles.query_rows, tiles.key_cols, point.k.unwrap_or(0))?;
            let run = block_topk_attention(inputs.q, inputs.k, inputs.v, budget)?;
            let sparsity = dims
                .head_indices()
                .zip(&run.pairs_per_head)
                .map(|((z, h), &pairs)| HeadSparsity::new(z, h, pairs, dims))
                .collect::<s2o_core::Result<Vec<_>>>()?;
            Ok(SparsityReport::new(
                VariantConfig::BlockTopK(budget),
                &errors_of(&run.output)?,
                &sparsity,
                RankingCost::default(),
            )?)
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn timed(inputs: &Inputs<'_>, point: &SweepPoint, cfg: &RunConfig) -> Result<PointResult, SweepError> {
    let start = Instant::now();
    let report = evaluate(inputs, point, cfg.tiles)?;
    let mut times = vec![start.elapsed().as_secs_f64()];
    if cfg.repeats > 0 {
        times.clear();
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            evaluate(inputs, point, cfg.tiles)?;
            times.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(PointResult {
        point: *point,
        report,
        seconds: median(times),
    })
}

fn kernel_points(cfg: &RunConfig) -> Vec<SweepPoint> {
    let mut points = Vec::new();
    for &variant in cfg.variants.iter().filter(|v| **v != Variant::BaselineTopk) {
        for &s in &cfg.segment_lens {
            for &tau in &cfg.taus {
                points.push(SweepPoint {
                    variant,
                    segment_len: Some(s),
                    tau: Some(tau),
                    k: None,
                });
            }
        }
    }
    points
}

fn baseline_point(k: usize) -> SweepPoint {
    SweepPoint {
        variant: Variant::BaselineTopk,
        segment_len: None,
        tau: None,
        k: Some(k),
    }
}

/// Runs the dense oracle once, then every point: S2O variants in the order
/// given (segment length outer, tau inner), then baseline budgets. A failing
/// point stops the sweep and is recorded in the returned report.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepReport, SweepError> {
    cfg.validate()?;
    let (q, k, v) = load_inputs(&cfg.input)?;
    let dims = q.dims();
    let dense = dense_causal_attention(&q, &k, &v)?;
    let inputs = Inputs {
        q: &q,
        k: &k,
        v: &v,
        dense: &dense,
    };
    let mut report = SweepReport {
        config: cfg.clone(),
        dims,
        complete: true,
        failed_point: None,
        error: None,
        points: Vec::new(),
    };
    let mut pending = kernel_points(cfg);
    let mut baseline_done = false;
    while !pending.is_empty() || !baseline_done {
        if pending.is_empty() {
            baseline_done = true;
            if cfg.variants.contains(&Variant::BaselineTopk) {
                pending = baseline_budgets(cfg, &report.points, dims.seq_len, dims.head_count())?
                    .into_iter()
                    .map(baseline_point)
                    .collect();
            }
            continue;
        }
        let point = pending.remove(0);
        match timed(&inputs, &point, cfg) {
            Ok(result) => report.points.push(result),
            Err(e) => {
                report.complete = false;
                report.failed_point = Some(point);
                report.error = Some(e.to_string());
                return Ok(report);
            }
        }
    }
    Ok(report)
}

fn baseline_budgets(
    cfg: &RunConfig,
    done: &[PointResult],
    seq_len: usize,
    heads: usize,
) -> Result<Vec<usize>, SweepError> {
    let mut ks = match &cfg.topk {
        TopkBudgets::List(ks) => return Ok(ks.clone()),
        TopkBudgets::Matched => Vec::new(),
    };
    for p in done {
        let per_head = p.report.aggregate.computed_pairs / heads as u64;
        let budget = matched_budget(cfg.tiles.query_rows, cfg.tiles.key_cols, seq_len, per_head)?;
        if !ks.contains(&budget.k) {
            ks.push(budget.k);
        }
    }
    Ok(ks)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn csv_string(report: &SweepReport) -> Result<String, SweepError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &report.points {
        w.serialize(CsvRow::from(p))?;
    }
    if report.points.is_empty() {
        w.write_record([
            "variant",
            "S",
            "tau",
            "k",
            "sparsity",
            "mse",
            "mae",
            "pairs",
            "dot_products",
            "seconds",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| SweepError::Io {
        path: "<csv>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_reports(report: &SweepReport, json: Option<&Path>, csv: Option<&Path>) -> Result<(), SweepError> {
    if let Some(path) = json {
        let text = serde_json::to_string_pretty(report)?;
        std::fs::write(path, text).map_err(io_err(path))?;
    }
    if let Some(path) = csv {
        std::fs::write(path, csv_string(report)?).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Vec<CsvRow>, SweepError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<CsvRow>, _>>()?)
}
