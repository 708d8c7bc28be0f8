//! Command-line front end: run configuration, subcommand dispatch, and the
//! on-disk artifact layout. Every command writes its artifacts under
//! `--out` together with a copy of the fully resolved configuration, so a
//! finished run directory is self-describing and re-runnable.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evalmetrics::{
    ablation_suite, ablation_to_csv, cct_feature_stats, compute_metrics, config_fingerprint,
    curve_to_csv, report_to_csv, standard_ablation_rows, CctStats, EvalError, MetricReport,
};
use crate::geometry::GeometryError;
use crate::model::{ModelConfig, ModelError};
use crate::plot::{cct_box_plot, curve_chart, PlotError};
use crate::results::{
    gt_as_pred, load_results, refine_dataset, save_results, ResultsError, ResultsFile,
};
use crate::synthdata::{
    generate_dataset, list_splits, read_split, write_splits, DataError, GenConfig,
};
use crate::trainrefine::{
    load_checkpoint, save_checkpoint, train_with_progress, EpochStats, ModelPredictor,
    TrainConfig, TrainError, DEFAULT_REFINE_ITERS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable consulted for the seed when no `--seed` flag is
/// given; the config file's seed ranks below both.
pub const SEED_ENV: &str = "GEOREF_SEED";

/// Format tag for report-style JSON artifacts (metric reports, curves,
/// feature-distance statistics, flag-sweep tables).
pub const REPORT_FORMAT: &str = "georef-report/1";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{context}: {source}")]
    Json {
        context: String,
        source: serde_json::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

/// The run configuration file. Every section is optional; commands fill in
/// defaults for the sections they need. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed applied to every section when set (outranked by `--seed` and
    /// the `GEOREF_SEED` environment variable).
    pub seed: Option<u64>,
    pub data: Option<GenConfig>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub refine_iters: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let raw = fs::read_to_string(path).map_err(|e| {
            RunError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&raw)
            .map_err(|e| RunError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Envelope for report-style JSON artifacts so every file on disk names
/// its format version and config fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact<T> {
    pub format: String,
    pub fingerprint: String,
    pub payload: T,
}

impl<T: Serialize + DeserializeOwned> Artifact<T> {
    pub fn new(fingerprint: &str, payload: T) -> Self {
        Self {
            format: REPORT_FORMAT.to_string(),
            fingerprint: fingerprint.to_string(),
            payload,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        let json = serde_json::to_string_pretty(self).map_err(|source| RunError::Json {
            context: format!("serializing {}", path.display()),
            source,
        })?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let raw = fs::read_to_string(path)?;
        let artifact: Self = serde_json::from_str(&raw).map_err(|source| RunError::Json {
            context: format!("parsing {}", path.display()),
            source,
        })?;
        if artifact.format != REPORT_FORMAT {
            return Err(RunError::Results(ResultsError::Format {
                found: artifact.format,
            }));
        }
        Ok(artifact)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "georef",
    version,
    about = "Category-level object pose refinement on point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run configuration file (JSON); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; all artifacts land here.
    #[arg(long)]
    out: PathBuf,
    /// Seed override; beats GEOREF_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Resolve a missing seed to the config default instead of fresh
    /// entropy. Given the same seed, runs are bit-identical either way.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of observed/prior cloud pairs.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Points per cloud.
        #[arg(long)]
        n_points: Option<usize>,
    },
    /// Train a refinement model on a generated dataset.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        dataset: PathBuf,
        /// Training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Records per optimizer step.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Refine initial poses with a trained checkpoint.
    Refine {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory (from train).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Dataset split to refine.
        #[arg(long, default_value = "test")]
        split: String,
        /// Refinement iterations; 0 returns the initial poses.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Compute accuracy metrics for a results file or a dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Results file (from refine).
        #[arg(long)]
        results: Option<PathBuf>,
        /// Dataset directory (with --gt-as-pred).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Dataset split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Score ground truth against itself (pipeline identity check).
        #[arg(long)]
        gt_as_pred: bool,
    },
    /// Train and evaluate every architecture flag-sweep row.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Training epochs per row.
        #[arg(long)]
        epochs: Option<usize>,
        /// Refinement iterations for evaluation.
        #[arg(long)]
        iters: Option<usize>,
        /// Comma-separated row names to run (default: all).
        #[arg(long)]
        rows: Option<String>,
    },
    /// Feature-distance statistics around the cross-cloud mixing step.
    CctStats {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Dataset split to measure on.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render SVG figures from saved artifacts.
    Plot {
        #[command(flatten)]
        common: CommonArgs,
        /// Results file: renders the metric-vs-iteration curve.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Feature-distance artifact (from cct-stats): renders a box plot.
        #[arg(long)]
        cct: Option<PathBuf>,
    },
}

/// Parse and run, returning the process exit code: 0 success, 1 usage
/// error, 2 runtime failure.
pub fn cli_dispatch(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<(), RunError> {
    match command {
        Command::GenData { common, n_points } => run_gen_data(&common, n_points),
        Command::Train {
            common,
            dataset,
            epochs,
            batch_size,
            resume,
        } => run_train(&common, &dataset, epochs, batch_size, resume.as_deref()),
        Command::Refine {
            common,
            ckpt,
            dataset,
            split,
            iters,
        } => run_refine(&common, &ckpt, &dataset, &split, iters),
        Command::Eval {
            common,
            results,
            dataset,
            split,
            gt_as_pred,
        } => run_eval(&common, results.as_deref(), dataset.as_deref(), &split, gt_as_pred),
        Command::Ablate {
            common,
            dataset,
            epochs,
            iters,
            rows,
        } => run_ablate(&common, &dataset, epochs, iters, rows.as_deref()),
        Command::CctStats {
            common,
            ckpt,
            dataset,
            split,
        } => run_cct_stats(&common, &ckpt, &dataset, &split),
        Command::Plot {
            common,
            results,
            cct,
        } => run_plot(&common, results.as_deref(), cct.as_deref()),
    }
}

/// Seed precedence: `--seed` flag, then `GEOREF_SEED`, then the config
/// file. With none of those, `--deterministic` keeps the section defaults;
/// otherwise a fresh entropy seed is drawn (and recorded in the resolved
/// config, so even an unseeded run can be reproduced afterwards).
fn resolve_seed(common: &CommonArgs, cfg_seed: Option<u64>) -> Result<Option<u64>, RunError> {
    if let Some(s) = common.seed {
        return Ok(Some(s));
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        let s = v.parse::<u64>().map_err(|_| {
            RunError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))
        })?;
        return Ok(Some(s));
    }
    if let Some(s) = cfg_seed {
        return Ok(Some(s));
    }
    Ok(if common.deterministic {
        None
    } else {
        Some(rand::random())
    })
}

/// Load the config file (if any), apply the seed override, and return the
/// resolved configuration.
fn resolve_config(common: &CommonArgs) -> Result<RunConfig, RunError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(common, cfg.seed)?;
    if let Some(s) = seed {
        cfg.seed = Some(s);
        if let Some(data) = &mut cfg.data {
            data.seed = s;
        }
        if let Some(train) = &mut cfg.train {
            train.seed = s;
        }
    }
    Ok(cfg)
}

/// Create the output directory and drop the resolved config into it.
fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), RunError> {
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(cfg).map_err(|source| RunError::Json {
        context: "serializing resolved config".into(),
        source,
    })?;
    fs::write(out.join("config.json"), json)?;
    Ok(())
}

fn sha_hex(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Content-derived dataset descriptor folded into fingerprints.
fn dataset_desc(split: &str, records: &[crate::synthdata::SampleRecord]) -> String {
    let n_points = records.first().map(|r| r.observed.len()).unwrap_or(0);
    format!("split={split} n={} n_points={n_points}", records.len())
}

fn run_gen_data(common: &CommonArgs, n_points: Option<usize>) -> Result<(), RunError> {
    let mut cfg = resolve_config(common)?;
    let mut data = cfg.data.clone().unwrap_or_default();
    if let Some(s) = cfg.seed {
        data.seed = s;
    }
    if let Some(n) = n_points {
        data.n_points = n;
    }
    cfg.data = Some(data.clone());
    prepare_out(&common.out, &cfg)?;
    let splits = generate_dataset(&data)?;
    write_splits(&common.out, &splits, Some(&data))?;
    let total: usize = splits.values().map(Vec::len).sum();
    println!(
        "wrote {} splits ({} records) to {}",
        splits.len(),
        total,
        common.out.display()
    );
    Ok(())
}

fn run_train(
    common: &CommonArgs,
    dataset: &Path,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    resume: Option<&Path>,
) -> Result<(), RunError> {
    let mut cfg = resolve_config(common)?;
    let model = cfg.model.clone().unwrap_or_default();
    let mut train_cfg = cfg.train.clone().unwrap_or_default();
    if let Some(s) = cfg.seed {
        train_cfg.seed = s;
    }
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    if let Some(b) = batch_size {
        train_cfg.batch_size = b;
    }
    cfg.model = Some(model.clone());
    cfg.train = Some(train_cfg.clone());
    prepare_out(&common.out, &cfg)?;

    let train_set = read_split(dataset, "train")?;
    let val_set = if list_splits(dataset)?.iter().any(|s| s == "val") {
        read_split(dataset, "val")?
    } else {
        Vec::new()
    };
    let resume_ck = match resume {
        Some(dir) => Some(load_checkpoint::<f32>(dir)?),
        None => None,
    };
    let mut report = |s: &EpochStats| {
        eprintln!(
            "epoch {:3}: train loss {:.6}, val loss {:.6}, lr {:.2e}",
            s.epoch, s.train_loss, s.val_loss, s.lr
        );
    };
    let out = train_with_progress::<f32>(
        &model,
        &train_cfg,
        &train_set,
        &val_set,
        resume_ck,
        Some(&mut report),
    )?;
    save_checkpoint(&common.out.join("last"), &out.last)?;
    save_checkpoint(&common.out.join("best"), &out.best)?;
    let history = Artifact::new(
        &config_fingerprint(&model, Some(&train_cfg), &dataset_desc("train", &train_set)),
        out.last.history.clone(),
    );
    history.save(&common.out.join("history.json"))?;
    if let Some(stats) = out.last.history.last() {
        println!(
            "trained {} epochs: train loss {:.6}, val loss {:.6}",
            out.last.epoch, stats.train_loss, stats.val_loss
        );
    }
    println!("checkpoints: {}/last, {}/best", common.out.display(), common.out.display());
    Ok(())
}

fn run_refine(
    common: &CommonArgs,
    ckpt: &Path,
    dataset: &Path,
    split: &str,
    iters: Option<usize>,
) -> Result<(), RunError> {
    let cfg = resolve_config(common)?;
    let iters = iters
        .or(cfg.refine_iters)
        .unwrap_or(DEFAULT_REFINE_ITERS);
    prepare_out(&common.out, &cfg)?;
    let mut ck = load_checkpoint::<f32>(ckpt)?;
    let records = read_split(dataset, split)?;
    let fingerprint = config_fingerprint(
        &ck.model,
        ck.train.as_ref(),
        &dataset_desc(split, &records),
    );
    let mut predictor = ModelPredictor {
        cfg: &ck.model,
        params: &mut ck.params,
    };
    let results = refine_dataset(&mut predictor, &records, iters, &fingerprint)?;
    let path = common.out.join("results.json");
    save_results(&path, &results)?;
    println!(
        "refined {} records for {iters} iterations -> {}",
        records.len(),
        path.display()
    );
    Ok(())
}

/// Per-iteration metric reports recomputed from stored trajectories.
fn curve_from_results(results: &ResultsFile) -> Result<Vec<MetricReport>, RunError> {
    let cats = results.categories();
    (0..=results.iters)
        .map(|k| {
            let instances = results.at_iteration(k)?;
            Ok(compute_metrics(&instances, &cats, &results.fingerprint)?)
        })
        .collect()
}

fn write_eval_artifacts(out: &Path, results: &ResultsFile) -> Result<(), RunError> {
    let curve = curve_from_results(results)?;
    let report = curve.last().expect("curve has iteration 0").clone();
    Artifact::new(&results.fingerprint, report.clone()).save(&out.join("report.json"))?;
    fs::write(out.join("report.csv"), report_to_csv(&report))?;
    Artifact::new(&results.fingerprint, curve.clone()).save(&out.join("curve.json"))?;
    fs::write(out.join("curve.csv"), curve_to_csv(&curve))?;
    println!(
        "mean over {} categories: 5deg2cm {:.3}, 5deg5cm {:.3}, IoU75 {:.3} ({} instances)",
        report.per_category.len(),
        report.mean.deg5_cm2,
        report.mean.deg5_cm5,
        report.mean.iou75,
        report.mean.n_instances
    );
    Ok(())
}

fn run_eval(
    common: &CommonArgs,
    results: Option<&Path>,
    dataset: Option<&Path>,
    split: &str,
    gt_pred: bool,
) -> Result<(), RunError> {
    let cfg = resolve_config(common)?;
    prepare_out(&common.out, &cfg)?;
    let results = match (results, dataset, gt_pred) {
        (Some(path), None, false) => load_results(path)?,
        (None, Some(dir), true) => {
            let records = read_split(dir, split)?;
            let fp = sha_hex(&["gt-as-pred", &dataset_desc(split, &records)]);
            gt_as_pred(&records, &fp)
        }
        (None, Some(_), false) => {
            return Err(RunError::Usage(
                "eval on a dataset needs --gt-as-pred (or refine first and pass --results)".into(),
            ))
        }
        _ => {
            return Err(RunError::Usage(
                "eval needs exactly one input: --results FILE or --dataset DIR --gt-as-pred".into(),
            ))
        }
    };
    write_eval_artifacts(&common.out, &results)
}

fn run_ablate(
    common: &CommonArgs,
    dataset: &Path,
    epochs: Option<usize>,
    iters: Option<usize>,
    rows: Option<&str>,
) -> Result<(), RunError> {
    let mut cfg = resolve_config(common)?;
    let base = cfg.model.clone().unwrap_or_default();
    let mut train_cfg = cfg.train.clone().unwrap_or_default();
    if let Some(s) = cfg.seed {
        train_cfg.seed = s;
    }
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    let iters = iters.or(cfg.refine_iters).unwrap_or(DEFAULT_REFINE_ITERS);
    cfg.model = Some(base.clone());
    cfg.train = Some(train_cfg.clone());
    cfg.refine_iters = Some(iters);
    prepare_out(&common.out, &cfg)?;

    let mut all_rows = standard_ablation_rows(&base);
    if let Some(filter) = rows {
        let wanted: Vec<String> = filter
            .split(',')
            .map(|s| s.trim().to_ascii_uppercase())
            .filter(|s| !s.is_empty())
            .collect();
        for name in &wanted {
            if !all_rows.iter().any(|r| &r.name == name) {
                let known: Vec<&str> = all_rows.iter().map(|r| r.name.as_str()).collect();
                return Err(RunError::Usage(format!(
                    "unknown row {name:?}; known rows: {known:?}"
                )));
            }
        }
        all_rows.retain(|r| wanted.iter().any(|w| w == &r.name));
    }

    let train_set = read_split(dataset, "train")?;
    let val_set = if list_splits(dataset)?.iter().any(|s| s == "val") {
        read_split(dataset, "val")?
    } else {
        Vec::new()
    };
    let eval_set = read_split(dataset, "test")?;
    let report = ablation_suite::<f32>(&all_rows, &train_set, &val_set, &eval_set, &train_cfg, iters);
    let fingerprint = config_fingerprint(
        &base,
        Some(&train_cfg),
        &dataset_desc("test", &eval_set),
    );
    Artifact::new(&fingerprint, report.clone()).save(&common.out.join("ablation.json"))?;
    fs::write(common.out.join("ablation.csv"), ablation_to_csv(&report))?;
    for row in &report.rows {
        match (&row.report, &row.error) {
            (Some(rep), _) => println!(
                "{}: 5deg2cm {:.3}, IoU75 {:.3}",
                row.name, rep.mean.deg5_cm2, rep.mean.iou75
            ),
            (None, Some(err)) => println!("{}: failed ({err})", row.name),
            (None, None) => println!("{}: missing", row.name),
        }
    }
    Ok(())
}

fn run_cct_stats(
    common: &CommonArgs,
    ckpt: &Path,
    dataset: &Path,
    split: &str,
) -> Result<(), RunError> {
    let cfg = resolve_config(common)?;
    prepare_out(&common.out, &cfg)?;
    let mut ck = load_checkpoint::<f32>(ckpt)?;
    let records = read_split(dataset, split)?;
    let stats = cct_feature_stats(&ck.model, &mut ck.params, &records)?;
    let fingerprint = config_fingerprint(
        &ck.model,
        ck.train.as_ref(),
        &dataset_desc(split, &records),
    );
    Artifact::new(&fingerprint, stats.clone()).save(&common.out.join("cct_stats.json"))?;
    println!(
        "feature distance over {} samples: median {:.6} before, {:.6} after mixing",
        stats.before.len(),
        stats.summary_before.median,
        stats.summary_after.median
    );
    Ok(())
}

fn run_plot(
    common: &CommonArgs,
    results: Option<&Path>,
    cct: Option<&Path>,
) -> Result<(), RunError> {
    if results.is_none() && cct.is_none() {
        return Err(RunError::Usage(
            "plot needs at least one input: --results FILE and/or --cct FILE".into(),
        ));
    }
    let cfg = resolve_config(common)?;
    prepare_out(&common.out, &cfg)?;
    if let Some(path) = results {
        let file = load_results(path)?;
        let curve = curve_from_results(&file)?;
        let svg = curve_chart(&curve)?;
        let out = common.out.join("iteration_curve.svg");
        fs::write(&out, svg)?;
        println!("wrote {}", out.display());
    }
    if let Some(path) = cct {
        let artifact: Artifact<CctStats> = Artifact::load(path)?;
        let svg = cct_box_plot(&artifact.payload)?;
        let out = common.out.join("cct_distances.svg");
        fs::write(&out, svg)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PerturbLimits;
    use crate::synthdata::NoiseModel;
    use std::collections::BTreeMap;
    use tempfile::tempdir;

    fn argv(parts: &[&str]) -> Vec<String> {
        std::iter::once("georef")
            .chain(parts.iter().copied())
            .map(String::from)
            .collect()
    }

    /// Small but non-degenerate end-to-end configuration.
    fn tiny_config() -> RunConfig {
        let mut split_sizes = BTreeMap::new();
        split_sizes.insert("train".to_string(), 6);
        split_sizes.insert("val".to_string(), 2);
        split_sizes.insert("test".to_string(), 4);
        let data = GenConfig {
            seed: 0,
            n_points: 16,
            instances_per_category: 2,
            split_sizes,
            noise: NoiseModel::none(),
            perturb: PerturbLimits::default(),
            categories: crate::synthdata::default_categories()[..2].to_vec(),
        };
        RunConfig {
            seed: Some(7),
            data: Some(data),
            model: Some(ModelConfig::tiny()),
            train: Some(TrainConfig {
                epochs: 1,
                batch_size: 3,
                seed: 7,
                ..TrainConfig::default()
            }),
            refine_iters: Some(1),
        }
    }

    fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
        let path = dir.join("run.json");
        fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
        path
    }

    fn path_str(p: &Path) -> String {
        p.to_str().unwrap().to_string()
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(cli_dispatch(&argv(&["--help"])), EXIT_OK);
        assert_eq!(cli_dispatch(&argv(&["--version"])), EXIT_OK);
        assert_eq!(cli_dispatch(&argv(&["gen-data", "--help"])), EXIT_OK);
    }

    #[test]
    fn usage_errors_exit_one() {
        // no subcommand
        assert_eq!(cli_dispatch(&argv(&[])), EXIT_USAGE);
        // unknown subcommand
        assert_eq!(cli_dispatch(&argv(&["frobnicate"])), EXIT_USAGE);
        // unknown flag
        let dir = tempdir().unwrap();
        let out = path_str(&dir.path().join("o"));
        assert_eq!(
            cli_dispatch(&argv(&["gen-data", "--out", &out, "--bogus"])),
            EXIT_USAGE
        );
        // missing required --out
        assert_eq!(cli_dispatch(&argv(&["gen-data"])), EXIT_USAGE);
    }

    #[test]
    fn misspelled_config_key_is_usage_error() {
        let dir = tempdir().unwrap();
        let cfg_path = dir.path().join("bad.json");
        fs::write(&cfg_path, r#"{"sed": 1}"#).unwrap();
        let out = path_str(&dir.path().join("o"));
        let code = cli_dispatch(&argv(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            &out,
            "--seed",
            "1",
        ]));
        assert_eq!(code, EXIT_USAGE);
        // missing config file is also a usage error
        let code = cli_dispatch(&argv(&[
            "gen-data",
            "--config",
            dir.path().join("nope.json").to_str().unwrap(),
            "--out",
            &out,
            "--seed",
            "1",
        ]));
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn runtime_failures_exit_two() {
        let dir = tempdir().unwrap();
        let out = path_str(&dir.path().join("o"));
        let missing = path_str(&dir.path().join("missing"));
        // dataset directory does not exist
        let code = cli_dispatch(&argv(&[
            "train", "--dataset", &missing, "--out", &out, "--seed", "1",
        ]));
        assert_eq!(code, EXIT_RUNTIME);
        let code = cli_dispatch(&argv(&[
            "refine", "--ckpt", &missing, "--dataset", &missing, "--out", &out, "--seed", "1",
        ]));
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn gen_data_writes_dataset_and_resolved_config() {
        let dir = tempdir().unwrap();
        let cfg_path = write_config(dir.path(), &tiny_config());
        let out = dir.path().join("ds");
        let code = cli_dispatch(&argv(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            path_str(&out).as_str(),
            "--seed",
            "7",
        ]));
        assert_eq!(code, EXIT_OK);
        assert!(out.join("config.json").exists());
        let resolved = RunConfig::load(&out.join("config.json")).unwrap();
        assert_eq!(resolved.seed, Some(7));
        assert_eq!(resolved.data.unwrap().seed, 7);
        let splits = list_splits(&out).unwrap();
        assert_eq!(splits, ["test", "train", "val"]);
        assert_eq!(read_split(&out, "train").unwrap().len(), 6);
    }

    #[test]
    fn eval_gt_as_pred_scores_one() {
        let dir = tempdir().unwrap();
        let cfg_path = write_config(dir.path(), &tiny_config());
        let ds = path_str(&dir.path().join("ds"));
        assert_eq!(
            cli_dispatch(&argv(&[
                "gen-data", "--config", cfg_path.to_str().unwrap(), "--out", &ds, "--seed", "7",
            ])),
            EXIT_OK
        );
        let ev = dir.path().join("eval");
        let code = cli_dispatch(&argv(&[
            "eval",
            "--dataset",
            &ds,
            "--gt-as-pred",
            "--out",
            path_str(&ev).as_str(),
            "--seed",
            "7",
        ]));
        assert_eq!(code, EXIT_OK);
        let report: Artifact<MetricReport> = Artifact::load(&ev.join("report.json")).unwrap();
        assert_eq!(report.format, REPORT_FORMAT);
        assert_eq!(report.payload.mean.deg5_cm2, 1.0);
        assert_eq!(report.payload.mean.iou75, 1.0);
        assert!(ev.join("report.csv").exists());
        assert!(ev.join("curve.csv").exists());
        // eval without an input mode is a usage error
        assert_eq!(
            cli_dispatch(&argv(&["eval", "--out", path_str(&ev).as_str(), "--seed", "7"])),
            EXIT_USAGE
        );
        assert_eq!(
            cli_dispatch(&argv(&[
                "eval", "--dataset", &ds, "--out", path_str(&ev).as_str(), "--seed", "7",
            ])),
            EXIT_USAGE
        );
    }

    /// gen-data, train, refine, eval, cct-stats, and plot chained through
    /// the real CLI surface.
    #[test]
    fn full_pipeline_round_trip() {
        let dir = tempdir().unwrap();
        let cfg_path = write_config(dir.path(), &tiny_config());
        let cfg_flag = cfg_path.to_str().unwrap();
        let ds = path_str(&dir.path().join("ds"));
        let tr = path_str(&dir.path().join("train"));
        let rf = path_str(&dir.path().join("refine"));
        let ev = path_str(&dir.path().join("eval"));
        let cs = path_str(&dir.path().join("cct"));
        let pl = path_str(&dir.path().join("plots"));

        assert_eq!(
            cli_dispatch(&argv(&[
                "gen-data", "--config", cfg_flag, "--out", &ds, "--seed", "7",
            ])),
            EXIT_OK
        );
        assert_eq!(
            cli_dispatch(&argv(&[
                "train", "--config", cfg_flag, "--dataset", &ds, "--out", &tr, "--seed", "7",
            ])),
            EXIT_OK
        );
        let ckpt = format!("{tr}/best");
        assert_eq!(
            cli_dispatch(&argv(&[
                "refine", "--ckpt", &ckpt, "--dataset", &ds, "--split", "test", "--iters", "2",
                "--out", &rf, "--seed", "7",
            ])),
            EXIT_OK
        );
        let results_path = format!("{rf}/results.json");
        let results = load_results(Path::new(&results_path)).unwrap();
        assert_eq!(results.iters, 2);
        assert_eq!(results.records.len(), 4);
        for rec in &results.records {
            assert_eq!(rec.trajectory.len(), 3);
        }
        assert_eq!(
            cli_dispatch(&argv(&[
                "eval", "--results", &results_path, "--out", &ev, "--seed", "7",
            ])),
            EXIT_OK
        );
        let curve: Artifact<Vec<MetricReport>> =
            Artifact::load(Path::new(&format!("{ev}/curve.json"))).unwrap();
        assert_eq!(curve.payload.len(), 3);
        assert_eq!(curve.fingerprint, results.fingerprint);
        assert_eq!(
            cli_dispatch(&argv(&[
                "cct-stats", "--ckpt", &ckpt, "--dataset", &ds, "--split", "test", "--out", &cs,
                "--seed", "7",
            ])),
            EXIT_OK
        );
        let cct_path = format!("{cs}/cct_stats.json");
        let stats: Artifact<CctStats> = Artifact::load(Path::new(&cct_path)).unwrap();
        assert_eq!(stats.payload.before.len(), 4);
        assert_eq!(
            cli_dispatch(&argv(&[
                "plot", "--results", &results_path, "--cct", &cct_path, "--out", &pl, "--seed",
                "7",
            ])),
            EXIT_OK
        );
        for name in ["iteration_curve.svg", "cct_distances.svg"] {
            let svg = fs::read_to_string(Path::new(&pl).join(name)).unwrap();
            assert!(svg.starts_with("<svg"));
            assert!(svg.trim_end().ends_with("</svg>"));
        }
        // plot with no inputs is a usage error
        assert_eq!(
            cli_dispatch(&argv(&["plot", "--out", &pl, "--seed", "7"])),
            EXIT_USAGE
        );
    }

    #[test]
    fn refine_zero_iters_returns_initial_poses() {
        let dir = tempdir().unwrap();
        let cfg_path = write_config(dir.path(), &tiny_config());
        let cfg_flag = cfg_path.to_str().unwrap();
        let ds = path_str(&dir.path().join("ds"));
        let tr = path_str(&dir.path().join("train"));
        let rf = dir.path().join("refine");
        assert_eq!(
            cli_dispatch(&argv(&[
                "gen-data", "--config", cfg_flag, "--out", &ds, "--seed", "7",
            ])),
            EXIT_OK
        );
        assert_eq!(
            cli_dispatch(&argv(&[
                "train", "--config", cfg_flag, "--dataset", &ds, "--out", &tr, "--seed", "7",
            ])),
            EXIT_OK
        );
        let ckpt = format!("{tr}/best");
        assert_eq!(
            cli_dispatch(&argv(&[
                "refine", "--ckpt", &ckpt, "--dataset", &ds, "--split", "test", "--iters", "0",
                "--out", path_str(&rf).as_str(), "--seed", "7",
            ])),
            EXIT_OK
        );
        let results = load_results(&rf.join("results.json")).unwrap();
        let records = read_split(Path::new(&ds), "test").unwrap();
        assert_eq!(results.records.len(), records.len());
        for (res, rec) in results.records.iter().zip(&records) {
            assert_eq!(res.trajectory.len(), 1);
            assert_eq!(res.trajectory[0], rec.init);
        }
    }

    #[test]
    fn train_twice_same_seed_is_bit_identical() {
        let dir = tempdir().unwrap();
        let cfg_path = write_config(dir.path(), &tiny_config());
        let cfg_flag = cfg_path.to_str().unwrap();
        let ds = path_str(&dir.path().join("ds"));
        assert_eq!(
            cli_dispatch(&argv(&[
                "gen-data", "--config", cfg_flag, "--out", &ds, "--seed", "7",
            ])),
            EXIT_OK
        );
        let mut blobs = Vec::new();
        for name in ["t1", "t2"] {
            let out = path_str(&dir.path().join(name));
            assert_eq!(
                cli_dispatch(&argv(&[
                    "train", "--config", cfg_flag, "--dataset", &ds, "--out", &out,
                    "--deterministic",
                ])),
                EXIT_OK
            );
            blobs.push(fs::read(Path::new(&out).join("last/arrays.bin")).unwrap());
        }
        assert_eq!(blobs[0], blobs[1]);
    }

    #[test]
    fn seed_env_is_honored() {
        let dir = tempdir().unwrap();
        let cfg_path = write_config(
            dir.path(),
            &RunConfig {
                seed: None,
                ..tiny_config()
            },
        );
        std::env::set_var(SEED_ENV, "123");
        let out = dir.path().join("ds");
        let code = cli_dispatch(&argv(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            path_str(&out).as_str(),
        ]));
        std::env::remove_var(SEED_ENV);
        assert_eq!(code, EXIT_OK);
        let resolved = RunConfig::load(&out.join("config.json")).unwrap();
        assert_eq!(resolved.seed, Some(123));
        assert_eq!(resolved.data.unwrap().seed, 123);
    }

    #[test]
    fn ablate_runs_selected_rows() {
        let dir = tempdir().unwrap();
        let cfg_path = write_config(dir.path(), &tiny_config());
        let cfg_flag = cfg_path.to_str().unwrap();
        let ds = path_str(&dir.path().join("ds"));
        assert_eq!(
            cli_dispatch(&argv(&[
                "gen-data", "--config", cfg_flag, "--out", &ds, "--seed", "7",
            ])),
            EXIT_OK
        );
        let ab = dir.path().join("ablate");
        let code = cli_dispatch(&argv(&[
            "ablate", "--config", cfg_flag, "--dataset", &ds, "--rows", "A0,B0", "--epochs", "1",
            "--iters", "1", "--out", path_str(&ab).as_str(), "--seed", "7",
        ]));
        assert_eq!(code, EXIT_OK);
        let report: Artifact<crate::evalmetrics::AblationReport> =
            Artifact::load(&ab.join("ablation.json")).unwrap();
        assert_eq!(report.payload.rows.len(), 2);
        assert!(report.payload.rows.iter().all(|r| r.report.is_some()));
        let csv = fs::read_to_string(ab.join("ablation.csv")).unwrap();
        assert_eq!(csv.trim().lines().count(), 3);
        // unknown row name is a usage error
        let code = cli_dispatch(&argv(&[
            "ablate", "--config", cfg_flag, "--dataset", &ds, "--rows", "Z9", "--out",
            path_str(&ab).as_str(), "--seed", "7",
        ]));
        assert_eq!(code, EXIT_USAGE);
    }
}
