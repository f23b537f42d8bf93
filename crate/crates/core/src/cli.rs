//! The `affinequant` command line. Exit codes: 0 success, 1 usage or
//! validation error, 2 numerical divergence. Progress goes to stderr;
//! machine-readable output to stdout and files.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::affine::{gradual_mask, mask_for_kind, MaskSchedule, TransformKind};
use crate::block::{BlockParams, TransformSet};
use crate::error::{Error, Result};
use crate::fusion::{fuse_block, merge_error_csv, merge_error_experiment, verify_fusion, MergeErrorConfig, MergeSampling};
use crate::io::{self, RunConfig};
use crate::linalg::PrecisionScheme;
use crate::optimizer::{alpha_sweep, optimize_model, synthetic_batches, OptimizationReport, SweepTable};
use crate::suites;
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "affinequant", version, about = "Post-training quantization with learned affine transforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Calibrate transforms block by block, then fuse and export.
    Quantize(QuantizeArgs),
    /// Mean MSE of merging a random transform into a linear layer.
    MergeError(MergeErrorArgs),
    /// Print the gradual mask for one epoch as CSV.
    MaskDump(MaskDumpArgs),
    /// Run an invariant suite.
    Check(CheckArgs),
    /// Fuse learned transforms into a model and write the container.
    Export(ExportArgs),
    /// Stability-factor sweep and transform heatmaps.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, multiple = false)]
struct ModelSource {
    /// Model container written by `save_model`.
    #[arg(long, group = "source")]
    model: Option<PathBuf>,
    /// Random blocks with the dimensions and seed from the config.
    #[arg(long, group = "source")]
    synthetic: bool,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MergeErrorArgs {
    #[arg(long, default_value_t = 512)]
    dims: usize,
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value = "double")]
    scheme: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// One row per precision scheme.
    #[arg(long)]
    all_schemes: bool,
    /// `gaussian` or `diagonally-dominant`.
    #[arg(long, default_value = "gaussian")]
    sampling: String,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskDumpArgs {
    #[arg(long)]
    hidden: usize,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    epoch: usize,
    #[arg(long)]
    alpha: f64,
    /// Per-head mask with this many heads.
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// grad, sdd, equiv, quant or mask.
    #[arg(long)]
    suite: String,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Run directory from `quantize` (uses its model.afqt and transforms.afqt).
    #[arg(long, conflicts_with_all = ["model", "transforms"])]
    run: Option<PathBuf>,
    #[arg(long, requires = "transforms")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    transforms: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Fold the transforms without quantizing, for equivalence debugging.
    #[arg(long)]
    no_quant: bool,
    /// Precision scheme the transforms were learned under; read from the
    /// run's report when --run is given.
    #[arg(long, conflicts_with = "run")]
    precision: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated stability factors, e.g. "0,1e-4,1e-2".
    #[arg(long)]
    alpha_sweep: Option<String>,
    /// Configuration for a sweep without a prior run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write heatmaps scaled by their largest magnitude.
    #[arg(long)]
    normalize: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    let result = match cli.command {
        Command::Quantize(a) => quantize(a),
        Command::MergeError(a) => merge_error(a),
        Command::MaskDump(a) => mask_dump(a),
        Command::Check(a) => check(a),
        Command::Export(a) => export(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

/// `AFQ_THREADS` caps the worker pool.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("AFQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("AFQ_THREADS must be a positive integer, got `{v}`")))?;
    // a pool may already exist when run from tests; the cap then stays as it was
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn synthetic_model(cfg: &RunConfig) -> Result<Vec<BlockParams>> {
    let m = &cfg.model;
    (0..m.blocks)
        .map(|i| BlockParams::random(m.hidden, m.heads, m.seed + i as u64))
        .collect()
}

#[derive(Serialize)]
struct RunReport<'a> {
    label: String,
    config: &'a RunConfig,
    blocks: &'a [OptimizationReport],
    /// Max relative error of each fused block against its transformed form.
    fusion_error: Vec<f64>,
}

fn quantize(a: QuantizeArgs) -> Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    let blocks = match &a.source.model {
        Some(p) => io::load_model(p)?,
        None => synthetic_model(&cfg)?,
    };
    let hidden = blocks[0].hidden();
    let calib = io::load_calibration(&cfg.calibration, hidden)?;
    let placement = cfg.placement()?;
    let opt = cfg.optimizer();
    create_dir(&a.out)?;

    let results = optimize_model(&blocks, &calib, &placement, &opt)?;
    let reports: Vec<OptimizationReport> = results.iter().map(|r| r.report.clone()).collect();
    let sets: Vec<TransformSet> = results.into_iter().map(|r| r.transforms).collect();
    for r in &reports {
        eprintln!("block {}: loss {:.6e} -> {:.6e} ({})", r.block, r.initial_loss, r.final_loss, r.label);
    }
    io::save_model(a.out.join("model.afqt"), &blocks)?;
    io::save_transforms(a.out.join("transforms.afqt"), &sets)?;
    write(&a.out.join("report.csv"), reports_csv(&reports))?;

    let storage = opt.precision.storage();
    let calib_p: Vec<Tensor> = calib.iter().map(|x| x.to_precision(storage)).collect();
    let fused: Result<Vec<(_, f64)>> = blocks
        .iter()
        .zip(&sets)
        .map(|(b, ts)| {
            let b = b.to_precision(storage);
            let f = fuse_block(&b, ts)?;
            let err = verify_fusion(&b, ts, &f, &calib_p)?;
            Ok((f, err))
        })
        .collect();

    // the report is written even when the layout cannot be fused
    let label = if reports.iter().any(|r| r.label == "affine") { "affine" } else { "diagonal-only" };
    let report = RunReport {
        label: label.into(),
        config: &cfg,
        blocks: &reports,
        fusion_error: fused.as_ref().map(|v| v.iter().map(|x| x.1).collect()).unwrap_or_default(),
    };
    write(&a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let fused: Vec<_> = fused?.into_iter().map(|x| x.0).collect();
    io::save_fused(a.out.join("fused.afqt"), &fused)?;
    println!("{}", a.out.join("report.json").display());
    Ok(0)
}

fn reports_csv(reports: &[OptimizationReport]) -> String {
    let mut s = String::new();
    for (i, r) in reports.iter().enumerate() {
        let csv = r.to_csv();
        let body = if i == 0 { &csv[..] } else { csv.split_once('\n').map_or("", |x| x.1) };
        s.push_str(body);
    }
    s
}

fn merge_error(a: MergeErrorArgs) -> Result<i32> {
    let sampling = match a.sampling.as_str() {
        "gaussian" => MergeSampling::Gaussian,
        "diagonally-dominant" => MergeSampling::DiagonallyDominant,
        other => return Err(Error::Config(format!("unknown sampling `{other}`"))),
    };
    let schemes = if a.all_schemes {
        PrecisionScheme::ALL.to_vec()
    } else {
        vec![a.scheme.parse()?]
    };
    let mut rows = Vec::new();
    for scheme in schemes {
        let cfg = MergeErrorConfig {
            sampling,
            ..MergeErrorConfig::new(a.dims, a.tokens, a.trials, scheme, a.seed)
        };
        let r = merge_error_experiment(&cfg)?;
        eprintln!("{scheme}: mean mse {:e}", r.mean_mse);
        rows.push(r);
    }
    let csv = merge_error_csv(&rows);
    if let Some(p) = &a.out {
        write(p, &csv)?;
    }
    print!("{csv}");
    Ok(0)
}

/// Row-major CSV with shortest round-trip formatting.
fn matrix_csv(m: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn mask_dump(a: MaskDumpArgs) -> Result<i32> {
    let s = MaskSchedule {
        target_epochs: a.epochs,
        stability_factor: a.alpha,
        hidden_size: a.hidden,
    };
    let m = match a.heads {
        None => gradual_mask(a.epoch, &s)?,
        Some(h) if h > 0 && a.hidden.is_multiple_of(h) => {
            mask_for_kind(TransformKind::PerHead { head_dim: a.hidden / h }, a.hidden, a.epoch, &s)?
        }
        Some(h) => return Err(Error::Config(format!("heads ({h}) must divide hidden ({})", a.hidden))),
    };
    let csv = matrix_csv(&m);
    if let Some(p) = &a.out {
        write(p, &csv)?;
    }
    print!("{csv}");
    Ok(0)
}

fn check(a: CheckArgs) -> Result<i32> {
    let r = suites::run_suite(&a.suite)?;
    let status = if r.passed() { "pass" } else { "FAIL" };
    println!("{}: {status}: {}", r.suite, r.summary);
    for f in &r.failures {
        println!("  {f}");
    }
    Ok(if r.passed() { 0 } else { 1 })
}

fn export(a: ExportArgs) -> Result<i32> {
    let (model, transforms, scheme) = match (&a.run, &a.model, &a.transforms) {
        (Some(run), _, _) => (run.join("model.afqt"), run.join("transforms.afqt"), run_config(run)?.precision),
        (None, Some(m), Some(t)) => {
            let scheme = a.precision.as_deref().map_or(Ok(PrecisionScheme::Double), str::parse)?;
            (m.clone(), t.clone(), scheme)
        }
        _ => return Err(Error::Config("export needs --run DIR, or --model and --transforms".into())),
    };
    let blocks = io::load_model(&model)?;
    let mut sets = io::load_transforms(&transforms)?;
    if sets.len() != blocks.len() {
        return Err(Error::Config(format!(
            "{} blocks but {} transform sets",
            blocks.len(),
            sets.len()
        )));
    }
    if a.no_quant {
        for ts in &mut sets {
            ts.config.weight_quant = None;
            ts.config.act_quant = None;
            ts.clips.clear();
        }
    }
    let mut fused = Vec::with_capacity(blocks.len());
    println!("block,fusion_error");
    for (i, (b, ts)) in blocks.iter().zip(&sets).enumerate() {
        let b = b.to_precision(scheme.storage());
        let f = fuse_block(&b, ts)?;
        let probe = synthetic_batches(i as u64, 2, 16, b.hidden());
        let err = verify_fusion(&b, ts, &f, &probe)?;
        println!("{i},{err:e}");
        fused.push(f);
    }
    io::save_fused(&a.out, &fused)?;
    Ok(0)
}

fn parse_alphas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|a| *a >= 0.0 && a.is_finite())
                .ok_or_else(|| Error::Config(format!("bad stability factor `{t}` in --alpha-sweep")))
        })
        .collect()
}

fn heatmaps(dir: &Path, tag: &str, ts: &TransformSet, normalize: bool) -> Result<()> {
    for (p, t) in &ts.transforms {
        let m = t.effective()?;
        write(&dir.join(format!("heatmap_{tag}_{p}.csv")), matrix_csv(&m))?;
        if normalize {
            let s = m.max_abs();
            let n = if s > 0.0 { m.scale(1.0 / s) } else { m };
            write(&dir.join(format!("heatmap_{tag}_{p}_normalized.csv")), matrix_csv(&n))?;
        }
    }
    Ok(())
}

/// The configuration recorded in a run directory's report.
fn run_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let c = v
        .get("config")
        .ok_or_else(|| Error::Config(format!("{}: no `config` field", path.display())))?;
    RunConfig::from_json(&c.to_string())
}

#[derive(Serialize)]
struct SweepReport<'a> {
    alphas: &'a [f64],
    table: &'a SweepTable,
}

fn report(a: ReportArgs) -> Result<i32> {
    let report_path = a.run.join("report.json");
    let have_run = report_path.exists();
    if !have_run && a.alpha_sweep.is_none() {
        return Err(Error::Config(format!(
            "{} has no run artifacts (report.json) and no --alpha-sweep was given",
            a.run.display()
        )));
    }
    let cfg = if have_run {
        run_config(&a.run)?
    } else {
        load_config(a.config.as_deref())?
    };
    create_dir(&a.run)?;

    let blocks = if a.run.join("model.afqt").exists() {
        io::load_model(a.run.join("model.afqt"))?
    } else {
        synthetic_model(&cfg)?
    };
    if have_run {
        let sets = io::load_transforms(a.run.join("transforms.afqt"))?;
        for (i, ts) in sets.iter().enumerate() {
            heatmaps(&a.run, &format!("block{i}"), ts, a.normalize)?;
        }
    }

    let Some(sweep) = &a.alpha_sweep else {
        return Ok(0);
    };
    let alphas = parse_alphas(sweep)?;
    let hidden = blocks[0].hidden();
    let calib = io::load_calibration(&cfg.calibration, hidden)?;
    let tokens = calib[0].rows();
    let heldout = synthetic_batches(cfg.optimizer.seed.wrapping_add(1), 2, tokens, hidden);
    let res = alpha_sweep(&blocks[0], &calib, &heldout, &cfg.placement()?, &cfg.optimizer(), &alphas)?;
    for (alpha, ts) in alphas.iter().zip(&res.transforms) {
        if let Some(ts) = ts {
            heatmaps(&a.run, &format!("alpha{alpha:e}"), ts, a.normalize)?;
        }
    }
    let csv = res.table.to_csv();
    write(&a.run.join("sweep.csv"), &csv)?;
    let json = SweepReport {
        alphas: &alphas,
        table: &res.table,
    };
    write(&a.run.join("sweep.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    print!("{csv}");
    if let Some(r) = res.table.pearson {
        println!("# pearson(final_loss, ce_gap) = {r:e}");
    }
    Ok(0)
}
