//! Command-line surface: `gen`, `run`, `sweep` and `heatmap`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s2o_core::{generate_synthetic, Dims, Pattern, SyntheticSpec, TileSpec};

use crate::heatmap::{export_heatmap, heatmap_weights, HeatmapMode};
use crate::sweep::{
    csv_string, load_inputs, run_sweep, write_reports, InputSource, RunConfig, SweepError, TopkBudgets, Variant,
};
use crate::tensor_file::save_tensor_file;

pub const EXIT_RUN_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "s2o", version, about = "Sparse attention benchmark harness")]
pub struct Cli {
    /// Worker threads for head-level parallelism.
    #[arg(long, env = "S2O_THREADS", global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic instance and write q/k/v S2OT files.
    Gen(GenArgs),
    /// Evaluate a single configuration point.
    Run(RunArgs),
    /// Evaluate a grid of configuration points.
    Sweep(SweepArgs),
    /// Export an attention heatmap in original or permuted order.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value = "mixed")]
    pub pattern: Pattern,
    #[arg(long, default_value_t = 128)]
    pub stripe_count: usize,
    #[arg(long, default_value_t = 6.0)]
    pub stripe_gain: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
}

impl SyntheticArgs {
    fn source(&self) -> Result<InputSource, CliError> {
        let dims = Dims::new(self.batch, self.heads, self.seq_len, self.head_dim)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let spec = SyntheticSpec::new(self.pattern, self.stripe_count, self.stripe_gain, self.seed);
        spec.validate(dims).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(InputSource::Synthetic { spec, dims })
    }
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Directory with q.s2ot, k.s2ot and v.s2ot; replaces the synthetic input.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
}

impl InputArgs {
    fn source(&self) -> Result<InputSource, CliError> {
        match &self.input {
            Some(dir) => Ok(InputSource::Files { dir: dir.clone() }),
            None => self.synthetic.source(),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

/// Baseline budget: a block count, or `matched` to match each S2O point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KArg {
    Count(usize),
    Matched,
}

impl std::str::FromStr for KArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "matched" {
            return Ok(KArg::Matched);
        }
        s.parse()
            .map(KArg::Count)
            .map_err(|_| format!("expected a block count or `matched`, got {s:?}"))
    }
}

/// `BMxBN`, or a single size for square tiles.
pub fn parse_tile(s: &str) -> Result<TileSpec, String> {
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("bad tile size {s:?}"));
    let (m, n) = match s.split_once(['x', 'X']) {
        Some((m, n)) => (parse(m)?, parse(n)?),
        None => {
            let m = parse(s)?;
            (m, m)
        }
    };
    TileSpec::new(m, n).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct PointArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "16x16", value_parser = parse_tile)]
    pub tile: TileSpec,
    /// Timed repetitions after one warm-up run (median reported).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV summary path; the summary also goes to stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: PointArgs,
    #[arg(long, default_value_t = 128)]
    pub segment_len: usize,
    #[arg(long, default_value_t = 0.005)]
    pub tau: f64,
    #[arg(long, default_value = "two-pass")]
    pub variant: Variant,
    #[arg(long, default_value = "matched")]
    pub k: KArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: PointArgs,
    #[arg(long, value_delimiter = ',', default_value = "128")]
    pub segment_len: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.002,0.005,0.01,0.02")]
    pub tau: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "two-pass")]
    pub variant: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "matched")]
    pub k: Vec<KArg>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 128)]
    pub segment_len: usize,
    #[arg(long, default_value = "original")]
    pub mode: HeatmapMode,
    #[arg(long, default_value_t = 0)]
    pub z: usize,
    #[arg(long, default_value_t = 0)]
    pub h: usize,
    /// Average `pool x pool` cells into one pixel.
    #[arg(long)]
    pub pool: Option<usize>,
    /// PGM output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Heatmap(#[from] crate::heatmap::HeatmapError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
    #[error("sweep stopped at a failing point: {0}")]
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Sweep(e) if e.is_usage() => EXIT_USAGE,
            _ => EXIT_RUN_FAILURE,
        }
    }
}

fn topk(ks: &[KArg]) -> TopkBudgets {
    if ks.contains(&KArg::Matched) {
        TopkBudgets::Matched
    } else {
        TopkBudgets::List(ks.iter().map(|k| if let KArg::Count(c) = k { *c } else { 0 }).collect())
    }
}

fn sweep(cfg: RunConfig, common: &PointArgs) -> Result<(), CliError> {
    let report = run_sweep(&cfg)?;
    write_reports(&report, common.out.as_deref(), common.csv.as_deref())?;
    print!("{}", csv_string(&report)?);
    match report.error {
        Some(e) if !report.complete => Err(CliError::Partial(e)),
        _ => Ok(()),
    }
}

fn gen(args: &GenArgs) -> Result<(), CliError> {
    let InputSource::Synthetic { spec, dims } = args.synthetic.source()? else {
        unreachable!("synthetic arguments always give a synthetic source")
    };
    let inst = generate_synthetic(&spec, dims).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(anyhow::Error::from)?;
    for (name, t) in [("q", &inst.q), ("k", &inst.k), ("v", &inst.v)] {
        save_tensor_file(t, args.out.join(format!("{name}.s2ot"))).map_err(SweepError::from)?;
    }
    let planted = serde_json::json!({ "spec": spec, "dims": dims, "planted": inst.planted });
    let text = serde_json::to_string_pretty(&planted).map_err(SweepError::from)?;
    std::fs::write(args.out.join("planted.json"), text).map_err(anyhow::Error::from)?;
    Ok(())
}

fn heatmap(args: &HeatmapArgs) -> Result<(), CliError> {
    let (q, k, _) = load_inputs(&args.input.source()?)?;
    let map = heatmap_weights(&q, &k, args.z, args.h, args.mode, args.segment_len)?;
    let written = export_heatmap(&map, args.pool, args.out.as_deref(), args.csv.as_deref()).map_err(|e| match e {
        crate::heatmap::HeatmapError::NeedsPooling(_) => CliError::Usage(e.to_string()),
        other => other.into(),
    })?;
    println!("{}x{} heatmap", written.cols, written.rows);
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("S2O_THREADS must be >= 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Gen(args) => gen(args),
        Command::Run(args) => {
            let cfg = RunConfig {
                input: args.common.input.source()?,
                segment_lens: vec![args.segment_len],
                taus: vec![args.tau],
                tiles: args.common.tile,
                topk: topk(&[args.k]),
                variants: match (args.variant, args.k) {
                    (Variant::BaselineTopk, KArg::Matched) => vec![Variant::TwoPass, Variant::BaselineTopk],
                    (v, _) => vec![v],
                },
                repeats: args.common.repeats,
            };
            sweep(cfg, &args.common)
        }
        Command::Sweep(args) => {
            let cfg = RunConfig {
                input: args.common.input.source()?,
                segment_lens: args.segment_len.clone(),
                taus: args.tau.clone(),
                tiles: args.common.tile,
                variants: args.variant.clone(),
                topk: topk(&args.k),
                repeats: args.common.repeats,
            };
            sweep(cfg, &args.common)
        }
        Command::Heatmap(args) => heatmap(args),
    }
}

/// Parses `args`, runs the command and maps failures to exit codes:
/// 0 ok, 1 run failure, 2 bad arguments.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles() {
        assert_eq!(parse_tile("16x32").unwrap(), TileSpec::new(16, 32).unwrap());
        assert_eq!(parse_tile("8").unwrap(), TileSpec::square(8).unwrap());
        assert!(parse_tile("0x4").is_err());
        assert!(parse_tile("ax4").is_err());
    }

    #[test]
    fn k_values() {
        assert_eq!("matched".parse::<KArg>().unwrap(), KArg::Matched);
        assert_eq!("3".parse::<KArg>().unwrap(), KArg::Count(3));
        assert!("-1".parse::<KArg>().is_err());
        assert_eq!(topk(&[KArg::Count(1), KArg::Count(4)]), TopkBudgets::List(vec![1, 4]));
    }

    #[test]
    fn sweep_lists_parse() {
        let cli = Cli::try_parse_from([
            "s2o",
            "sweep",
            "--tau",
            "0.1,0.2",
            "--variant",
            "fused,baseline-topk",
            "--k",
            "1,2",
        ])
        .unwrap();
        let Command::Sweep(args) = cli.command else {
            panic!("expected sweep")
        };
        assert_eq!(args.tau, vec![0.1, 0.2]);
        assert_eq!(args.variant, vec![Variant::Fused, Variant::BaselineTopk]);
        assert_eq!(args.k, vec![KArg::Count(1), KArg::Count(2)]);
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let err = Cli::try_parse_from(["s2o", "run", "--bogus"]).unwrap_err();
        assert!(err.use_stderr());
    }
}
