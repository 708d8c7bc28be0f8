//! Evaluation: pose-accuracy metrics with per-category and uniform-mean
//! aggregation, refinement iteration curves, cross-cloud feature distance
//! statistics, and the architecture flag-sweep harness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{iou3d, rotation_error_deg, GeometryError, PoseState, SymmetrySpec};
use crate::model::{ablation_rows as model_ablation_rows, AblationRow, ModelConfig, ModelError};
use crate::netblocks::{Graph, ParamSet};
use crate::synthdata::SampleRecord;
use crate::trainrefine::{
    refine_iterative, train, ErrorPredictor, ModelPredictor, TrainConfig, TrainError,
};
use crate::tape::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown category {found:?}; known categories: {known:?}")]
    UnknownCategory { found: String, known: Vec<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One evaluated instance: a predicted pose against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub category: String,
    pub symmetry: SymmetrySpec,
    pub pred: PoseState,
    pub gt: PoseState,
}

/// Accuracy fractions for one category (or the aggregate row). All values
/// lie in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iou50: f64,
    pub iou75: f64,
    pub deg5_cm2: f64,
    pub deg5_cm5: f64,
    pub deg10_cm2: f64,
    pub deg10_cm5: f64,
    pub cm2: f64,
    pub deg5: f64,
    pub n_instances: usize,
}

impl MetricRow {
    fn zero() -> Self {
        Self {
            iou50: 0.0,
            iou75: 0.0,
            deg5_cm2: 0.0,
            deg5_cm5: 0.0,
            deg10_cm2: 0.0,
            deg10_cm5: 0.0,
            cm2: 0.0,
            deg5: 0.0,
            n_instances: 0,
        }
    }

    /// Ordering invariants that hold for any instance set: loosening a
    /// threshold can only admit more instances.
    fn assert_monotone(&self) {
        let eps = 1e-12;
        assert!(
            self.deg5_cm5 + eps >= self.deg5_cm2,
            "5deg5cm {} below 5deg2cm {}",
            self.deg5_cm5,
            self.deg5_cm2
        );
        assert!(
            self.iou50 + eps >= self.iou75,
            "IoU50 {} below IoU75 {}",
            self.iou50,
            self.iou75
        );
        assert!(self.deg10_cm2 + eps >= self.deg5_cm2);
        assert!(self.deg10_cm5 + eps >= self.deg10_cm2);
        assert!(self.deg5 + eps >= self.deg5_cm5);
        assert!(self.cm2 + eps >= self.deg5_cm2);
        for v in [
            self.iou50,
            self.iou75,
            self.deg5_cm2,
            self.deg5_cm5,
            self.deg10_cm2,
            self.deg10_cm5,
            self.cm2,
            self.deg5,
        ] {
            assert!((0.0..=1.0).contains(&v), "metric fraction {v} out of range");
        }
    }
}

/// Metrics over one result set: per-category rows plus their uniform mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_category: BTreeMap<String, MetricRow>,
    /// Uniform mean over categories (every category weighted equally).
    pub mean: MetricRow,
    pub fingerprint: String,
}

/// Hash of everything that determines an evaluation: model and training
/// configuration plus a free-form dataset descriptor.
pub fn config_fingerprint(
    model: &ModelConfig,
    train: Option<&TrainConfig>,
    dataset_meta: &str,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(model).expect("config serializes").as_bytes());
    if let Some(t) = train {
        hasher.update(serde_json::to_string(t).expect("config serializes").as_bytes());
    }
    hasher.update(dataset_meta.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-instance raw errors backing the threshold metrics.
#[derive(Debug, Clone, Copy)]
pub struct InstanceErrors {
    pub rot_deg: f64,
    pub trans_m: f64,
    pub iou: f64,
}

/// Errors of one prediction against its ground truth.
pub fn instance_errors(r: &InstanceResult) -> InstanceErrors {
    InstanceErrors {
        rot_deg: rotation_error_deg(&r.pred.rotation, &r.gt.rotation, &r.symmetry),
        trans_m: (r.pred.translation - r.gt.translation).norm(),
        iou: iou3d(&r.pred, &r.gt),
    }
}

fn row_from_errors(errors: &[InstanceErrors]) -> MetricRow {
    let n = errors.len();
    if n == 0 {
        return MetricRow::zero();
    }
    let frac = |pred: &dyn Fn(&InstanceErrors) -> bool| {
        errors.iter().filter(|e| pred(e)).count() as f64 / n as f64
    };
    let row = MetricRow {
        iou50: frac(&|e| e.iou >= 0.5),
        iou75: frac(&|e| e.iou >= 0.75),
        deg5_cm2: frac(&|e| e.rot_deg <= 5.0 && e.trans_m <= 0.02),
        deg5_cm5: frac(&|e| e.rot_deg <= 5.0 && e.trans_m <= 0.05),
        deg10_cm2: frac(&|e| e.rot_deg <= 10.0 && e.trans_m <= 0.02),
        deg10_cm5: frac(&|e| e.rot_deg <= 10.0 && e.trans_m <= 0.05),
        cm2: frac(&|e| e.trans_m <= 0.02),
        deg5: frac(&|e| e.rot_deg <= 5.0),
        n_instances: n,
    };
    row.assert_monotone();
    row
}

/// Threshold metrics over a result set. Every result's category must appear
/// in `categories`; the mean row weights categories uniformly.
pub fn compute_metrics(
    results: &[InstanceResult],
    categories: &[String],
    fingerprint: &str,
) -> Result<MetricReport, EvalError> {
    let mut by_cat: BTreeMap<String, Vec<InstanceErrors>> = BTreeMap::new();
    for r in results {
        if !categories.contains(&r.category) {
            return Err(EvalError::UnknownCategory {
                found: r.category.clone(),
                known: categories.to_vec(),
            });
        }
        by_cat.entry(r.category.clone()).or_default().push(instance_errors(r));
    }
    let per_category: BTreeMap<String, MetricRow> = by_cat
        .iter()
        .map(|(cat, errs)| (cat.clone(), row_from_errors(errs)))
        .collect();
    let k = per_category.len().max(1) as f64;
    let sum = |f: &dyn Fn(&MetricRow) -> f64| per_category.values().map(|r| f(r)).sum::<f64>() / k;
    let mean = MetricRow {
        iou50: sum(&|r| r.iou50),
        iou75: sum(&|r| r.iou75),
        deg5_cm2: sum(&|r| r.deg5_cm2),
        deg5_cm5: sum(&|r| r.deg5_cm5),
        deg10_cm2: sum(&|r| r.deg10_cm2),
        deg10_cm5: sum(&|r| r.deg10_cm5),
        cm2: sum(&|r| r.cm2),
        deg5: sum(&|r| r.deg5),
        n_instances: results.len(),
    };
    mean.assert_monotone();
    Ok(MetricReport {
        per_category,
        mean,
        fingerprint: fingerprint.to_string(),
    })
}

/// Refine every record `k_max` times and report metrics at each iteration
/// (index 0 is the initial pose).
pub fn iteration_curve(
    predictor: &mut dyn ErrorPredictor,
    eval_set: &[SampleRecord],
    k_max: usize,
    fingerprint: &str,
) -> Result<Vec<MetricReport>, EvalError> {
    let categories: Vec<String> = {
        let mut c: Vec<String> = eval_set.iter().map(|r| r.category.clone()).collect();
        c.sort();
        c.dedup();
        c
    };
    let mut per_iter: Vec<Vec<InstanceResult>> = vec![Vec::new(); k_max + 1];
    for rec in eval_set {
        let traj = refine_iterative(predictor, &rec.observed, &rec.prior, &rec.init, k_max)?;
        for (i, state) in traj.into_iter().enumerate() {
            per_iter[i].push(InstanceResult {
                category: rec.category.clone(),
                symmetry: rec.symmetry.clone(),
                pred: state,
                gt: rec.gt.clone(),
            });
        }
    }
    per_iter
        .iter()
        .map(|results| compute_metrics(results, &categories, fingerprint))
        .collect()
}

/// Five-number summary plus mean of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistSummary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

impl DistSummary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        Self {
            min: sorted.first().copied().unwrap_or(f64::NAN),
            q25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
            max: sorted.last().copied().unwrap_or(f64::NAN),
            mean: if sorted.is_empty() {
                f64::NAN
            } else {
                sorted.iter().sum::<f64>() / sorted.len() as f64
            },
        }
    }
}

/// Per-sample cross-cloud feature distances before and after mixing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CctStats {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub summary_before: DistSummary,
    pub summary_after: DistSummary,
}

/// Symmetric Chamfer distance between two feature maps (columns are
/// points): the average over both directions of the mean nearest-neighbor
/// distance.
pub fn chamfer_columns<F: Scalar>(a: &ndarray::Array2<F>, b: &ndarray::Array2<F>) -> f64 {
    let directed = |x: &ndarray::Array2<F>, y: &ndarray::Array2<F>| {
        let mut total = 0.0;
        for i in 0..x.ncols() {
            let mut best = f64::INFINITY;
            for j in 0..y.ncols() {
                let mut d2 = 0.0;
                for r in 0..x.nrows() {
                    let d = (x[[r, i]] - y[[r, j]]).to_f64();
                    d2 += d * d;
                }
                best = best.min(d2.sqrt());
            }
            total += best;
        }
        total / x.ncols() as f64
    };
    0.5 * (directed(a, b) + directed(b, a))
}

/// Alignment statistics of the cross-cloud transform: with every pose set
/// to its ground truth, measure the Chamfer distance between the observed
/// and prior rotation feature maps immediately before and after mixing.
pub fn cct_feature_stats<F: Scalar>(
    cfg: &ModelConfig,
    params: &mut ParamSet<F>,
    eval_set: &[SampleRecord],
) -> Result<CctStats, EvalError> {
    if !cfg.cct {
        return Err(EvalError::Config(
            "cross-cloud feature statistics require the cct flag".into(),
        ));
    }
    let mut before = Vec::with_capacity(eval_set.len());
    let mut after = Vec::with_capacity(eval_set.len());
    for rec in eval_set {
        let (obs, pri) =
            crate::model::focalized_inputs::<F>(&rec.observed, &rec.prior, &rec.gt)?;
        let mut g = Graph::new(params, false);
        let fwd = crate::model::build_forward(&mut g, cfg, &obs, &pri, &rec.gt.size)?;
        let (Some((pre_o, pre_p)), Some((post_o, post_p))) = (fwd.pre_cct_r, fwd.post_cct_r)
        else {
            return Err(EvalError::Config(
                "cross-cloud mixing is not active under this fusion mode".into(),
            ));
        };
        before.push(chamfer_columns(g.tape.value(pre_o), g.tape.value(pre_p)));
        after.push(chamfer_columns(g.tape.value(post_o), g.tape.value(post_p)));
    }
    Ok(CctStats {
        summary_before: DistSummary::of(&before),
        summary_after: DistSummary::of(&after),
        before,
        after,
    })
}

/// Outcome of one flag-sweep row: a metric report, or the error that
/// stopped it (other rows still run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub name: String,
    pub config: ModelConfig,
    pub report: Option<MetricReport>,
    pub final_val_loss: Option<f64>,
    pub error: Option<String>,
}

/// Results of the whole sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationOutcome>,
    pub train_config: TrainConfig,
    pub refine_iters: usize,
}

fn run_ablation_row<F: Scalar>(
    row: &AblationRow,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    eval_set: &[SampleRecord],
    train_cfg: &TrainConfig,
    refine_iters: usize,
) -> Result<(MetricReport, Option<f64>), EvalError> {
    let out = train::<F>(&row.config, train_cfg, train_set, val_set, None)?;
    let mut best = out.best;
    let fingerprint = config_fingerprint(
        &row.config,
        Some(train_cfg),
        &format!("ablation eval n={}", eval_set.len()),
    );
    let mut predictor = ModelPredictor {
        cfg: &row.config,
        params: &mut best.params,
    };
    let curve = iteration_curve(&mut predictor, eval_set, refine_iters, &fingerprint)?;
    let last = curve
        .into_iter()
        .next_back()
        .ok_or_else(|| EvalError::Config("iteration curve was empty".into()))?;
    let val = out.last.history.last().map(|h| h.val_loss);
    Ok((last, val))
}

/// Train and evaluate every row under identical seeds and budgets. A row's
/// failure is recorded and the sweep continues.
pub fn ablation_suite<F: Scalar>(
    rows: &[AblationRow],
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    eval_set: &[SampleRecord],
    train_cfg: &TrainConfig,
    refine_iters: usize,
) -> AblationReport {
    let outcomes = rows
        .iter()
        .map(|row| {
            match run_ablation_row::<F>(row, train_set, val_set, eval_set, train_cfg, refine_iters)
            {
                Ok((report, val)) => AblationOutcome {
                    name: row.name.clone(),
                    config: row.config.clone(),
                    report: Some(report),
                    final_val_loss: val,
                    error: None,
                },
                Err(e) => AblationOutcome {
                    name: row.name.clone(),
                    config: row.config.clone(),
                    report: None,
                    final_val_loss: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    AblationReport {
        rows: outcomes,
        train_config: train_cfg.clone(),
        refine_iters,
    }
}

/// The standard row set, sized from `base`.
pub fn standard_ablation_rows(base: &ModelConfig) -> Vec<AblationRow> {
    model_ablation_rows(base)
}

const CSV_HEADER: &str =
    "category,n_instances,iou50,iou75,deg5_cm2,deg5_cm5,deg10_cm2,deg10_cm5,cm2,deg5";

fn csv_row(label: &str, r: &MetricRow) -> String {
    format!(
        "{label},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        r.n_instances,
        r.iou50,
        r.iou75,
        r.deg5_cm2,
        r.deg5_cm5,
        r.deg10_cm2,
        r.deg10_cm5,
        r.cm2,
        r.deg5
    )
}

/// Render a report as CSV: one row per category plus the uniform mean.
pub fn report_to_csv(report: &MetricReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (cat, row) in &report.per_category {
        out.push_str(&csv_row(cat, row));
        out.push('\n');
    }
    out.push_str(&csv_row("mean", &report.mean));
    out.push('\n');
    out
}

/// Render an iteration curve as CSV of the mean rows.
pub fn curve_to_csv(curve: &[MetricReport]) -> String {
    let mut out = String::from("iteration,iou50,iou75,deg5_cm2,deg5_cm5,deg10_cm2,deg10_cm5,cm2,deg5");
    out.push('\n');
    for (i, rep) in curve.iter().enumerate() {
        let r = &rep.mean;
        out.push_str(&format!(
            "{i},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.iou50, r.iou75, r.deg5_cm2, r.deg5_cm5, r.deg10_cm2, r.deg10_cm5, r.cm2, r.deg5
        ));
    }
    out
}

/// Render a flag-sweep report as CSV; failed rows carry the error text.
pub fn ablation_to_csv(report: &AblationReport) -> String {
    let mut out =
        String::from("row,status,iou50,iou75,deg5_cm2,deg5_cm5,deg10_cm2,deg10_cm5,cm2,deg5");
    out.push('\n');
    for row in &report.rows {
        match (&row.report, &row.error) {
            (Some(rep), _) => {
                let r = &rep.mean;
                out.push_str(&format!(
                    "{},ok,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    row.name,
                    r.iou50,
                    r.iou75,
                    r.deg5_cm2,
                    r.deg5_cm5,
                    r.deg10_cm2,
                    r.deg10_cm5,
                    r.cm2,
                    r.deg5
                ));
            }
            (None, Some(err)) => {
                out.push_str(&format!("{},error: {},,,,,,,,\n", row.name, err.replace(',', ";")));
            }
            (None, None) => out.push_str(&format!("{},missing,,,,,,,,\n", row.name)),
        }
    }
    out
}
