//! Training and iterative refinement: the symmetry-aware error loss,
//! cosine-annealed learning-rate schedule, on-the-fly data augmentation,
//! a decoupled-weight-decay adaptive optimizer, checkpointing, and the
//! refinement loop that composes predicted errors onto the running pose.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    compose_update, error_between, perturbed_initial, sample_pose_perturbation, GeometryError,
    PerturbLimits, PointCloud, PoseError, PoseState, SymmetrySpec,
};
use crate::model::{build_forward, focalized_inputs, forward, ForwardVars, ModelConfig, ModelError};
use crate::netblocks::{update_running_stats, Graph, ParamSet};
use crate::synthdata::{stream_rng, SampleRecord};
use crate::tape::{Scalar, Var};

/// Checkpoint format identifier.
pub const CHECKPOINT_FORMAT: &str = "georef-ckpt/1";
/// Default number of refinement iterations.
pub const DEFAULT_REFINE_ITERS: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(
        "non-finite loss at epoch {epoch}, step {step}, batch records {batch:?}; \
         largest parameter norms: {param_norms:?}"
    )]
    NonFinite {
        epoch: usize,
        step: u64,
        batch: Vec<usize>,
        param_norms: Vec<(String, f64)>,
    },
    #[error("refinement failed at iteration {iteration}: {source}")]
    Refine {
        iteration: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{context}: {source}")]
    Json {
        context: String,
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format {found:?}, expected {CHECKPOINT_FORMAT:?}")]
    Format { found: String },
    #[error("checkpoint stores {found} precision, expected {expected}")]
    Precision { found: String, expected: String },
    #[error("checkpoint array data truncated: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Loss term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_r: f64,
    pub w_t: f64,
    pub w_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_r: 1.0,
            w_t: 1.0,
            w_s: 1.0,
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// Fraction of total steps after which cosine annealing begins.
    pub anneal_start_frac: f64,
    /// Fraction of observed points re-dropped (and resampled) per epoch.
    pub point_dropout: f64,
    /// Extra Gaussian noise in meters added to observed points per epoch.
    pub noise_sigma: f64,
    /// Limits for re-perturbing the initial pose per epoch; all-zero limits
    /// disable re-perturbation.
    pub pert_limits: PerturbLimits,
    pub loss_weights: LossWeights,
    pub weight_decay: f64,
    /// Optimizer steps during which running normalization statistics track
    /// the data before freezing. Frozen constants keep the loss surface
    /// stationary; tracking indefinitely lets the statistics chase the
    /// weights and the feedback diverges.
    pub norm_freeze_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            epochs: 150,
            base_lr: 1e-4,
            anneal_start_frac: 0.72,
            point_dropout: 0.05,
            noise_sigma: 0.001,
            pert_limits: PerturbLimits::default(),
            loss_weights: LossWeights::default(),
            weight_decay: 1e-4,
            norm_freeze_steps: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced preset sized for single-core experiments.
    pub fn desk() -> Self {
        Self {
            epochs: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.anneal_start_frac) {
            return Err(TrainError::Config(
                "anneal_start_frac must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.point_dropout) {
            return Err(TrainError::Config("point_dropout must lie in [0, 1)".into()));
        }
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return Err(TrainError::Config("base_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Rotation part of the loss: mean absolute difference over all nine
/// entries, or over the rotated symmetry axis only (spin about the axis is
/// unpenalized).
fn rotation_loss(pred: &PoseError, target: &PoseError, symmetry: &SymmetrySpec) -> f64 {
    match symmetry.axis() {
        Option::None => {
            let d = pred.rotation - target.rotation;
            d.iter().map(|v| v.abs()).sum::<f64>() / 9.0
        }
        Some(axis) => {
            let a = axis.normalize();
            let d = pred.rotation * a - target.rotation * a;
            d.iter().map(|v| v.abs()).sum::<f64>() / 3.0
        }
    }
}

/// The training loss: weighted sum of mean absolute errors on the rotation
/// update, translation offset (meters) and size offset (meters).
pub fn compute_loss(
    pred: &PoseError,
    target: &PoseError,
    weights: &LossWeights,
    symmetry: &SymmetrySpec,
) -> f64 {
    let l_rot = rotation_loss(pred, target, symmetry);
    let l_t = (pred.translation - target.translation)
        .iter()
        .map(|v| v.abs())
        .sum::<f64>()
        / 3.0;
    let l_s = (pred.size - target.size).iter().map(|v| v.abs()).sum::<f64>() / 3.0;
    weights.w_r * l_rot + weights.w_t * l_t + weights.w_s * l_s
}

/// The same loss built on the tape, differentiable with respect to the
/// forward pass outputs.
pub fn loss_on_graph<F: Scalar>(
    g: &mut Graph<F>,
    fwd: &ForwardVars,
    target: &PoseError,
    weights: &LossWeights,
    symmetry: &SymmetrySpec,
) -> Result<Var, TrainError> {
    let to_arr = |m: &[f64], rows: usize, cols: usize| {
        Array2::from_shape_fn((rows, cols), |(i, j)| F::from_f64(m[i * cols + j]))
    };
    let l_rot = match symmetry.axis() {
        Option::None => {
            let tgt: Vec<f64> = target
                .rotation
                .row_iter()
                .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
                .collect();
            let tgt_var = g.input(to_arr(&tgt, 3, 3));
            g.tape.l1_loss(fwd.dr, tgt_var).map_err(ModelError::from)?
        }
        Some(axis) => {
            let a = axis.normalize();
            let a_var = g.input(to_arr(&[a.x, a.y, a.z], 3, 1));
            let col_pred = g.tape.matmul(fwd.dr, a_var).map_err(ModelError::from)?;
            let col_tgt = target.rotation * a;
            let tgt_var = g.input(to_arr(&[col_tgt.x, col_tgt.y, col_tgt.z], 3, 1));
            g.tape.l1_loss(col_pred, tgt_var).map_err(ModelError::from)?
        }
    };
    let dt_tgt = g.input(to_arr(
        &[
            target.translation.x,
            target.translation.y,
            target.translation.z,
        ],
        3,
        1,
    ));
    let l_t = g.tape.l1_loss(fwd.dt, dt_tgt).map_err(ModelError::from)?;
    let ds_tgt = g.input(to_arr(&[target.size.x, target.size.y, target.size.z], 3, 1));
    let l_s = g.tape.l1_loss(fwd.ds, ds_tgt).map_err(ModelError::from)?;

    let wr = g.tape.affine(l_rot, weights.w_r, 0.0);
    let wt = g.tape.affine(l_t, weights.w_t, 0.0);
    let ws = g.tape.affine(l_s, weights.w_s, 0.0);
    let rt = g.tape.add(wr, wt).map_err(ModelError::from)?;
    Ok(g.tape.add(rt, ws).map_err(ModelError::from)?)
}

/// Learning rate at `step` of `total_steps`: constant at `base_lr` until
/// the anneal start, then a cosine decay reaching zero at the last step.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, anneal_start_frac: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s0 = anneal_start_frac * total_steps as f64;
    let s = step as f64;
    if s < s0 {
        base_lr
    } else {
        let span = (total_steps as f64 - s0).max(f64::MIN_POSITIVE);
        let frac = ((s - s0) / span).clamp(0.0, 1.0);
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// Per-epoch augmentation: re-drop and resample observed points, add fresh
/// Gaussian noise, and re-perturb the initial pose within the limits. The
/// ground truth never changes.
pub fn augment<R: Rng>(
    record: &SampleRecord,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SampleRecord, TrainError> {
    let mut out = record.clone();
    let pts = record.observed.points();
    let n = pts.nrows();
    let n_drop = (cfg.point_dropout * n as f64).floor() as usize;

    let kept: Vec<usize> = if n_drop > 0 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut kept = idx[..n - n_drop].to_vec();
        kept.sort_unstable();
        kept
    } else {
        (0..n).collect()
    };
    // resample back to n: keep the survivors and pad with replacement
    let mut rows: Vec<usize> = kept.clone();
    while rows.len() < n {
        rows.push(kept[rng.random_range(0..kept.len())]);
    }
    let mut new_pts = Array2::zeros((n, 3));
    for (r, &src) in rows.iter().enumerate() {
        for c in 0..3 {
            new_pts[[r, c]] = pts[[src, c]];
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| TrainError::Config(format!("bad noise_sigma: {e}")))?;
        for v in new_pts.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    out.observed = PointCloud::new(new_pts)?;

    if !cfg.pert_limits.is_zero() {
        let pert = sample_pose_perturbation(rng, &cfg.pert_limits);
        out.init = perturbed_initial(&record.gt, &pert);
    }
    Ok(out)
}

/// Adaptive-moment optimizer with decoupled weight decay. Normalization
/// running statistics are not optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F: Scalar> {
    pub m: BTreeMap<String, Array2<F>>,
    pub v: BTreeMap<String, Array2<F>>,
    pub step: u64,
}

impl<F: Scalar> OptState<F> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

impl<F: Scalar> Default for OptState<F> {
    fn default() -> Self {
        Self::new()
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One optimizer step over the gradient map.
pub fn adamw_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &BTreeMap<String, Array2<F>>,
    state: &mut OptState<F>,
    lr: f64,
    weight_decay: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::from_f64(ADAM_BETA1);
    let b2 = F::from_f64(ADAM_BETA2);
    let one = F::one();
    let bc1 = F::from_f64(1.0 - ADAM_BETA1.powi(t));
    let bc2 = F::from_f64(1.0 - ADAM_BETA2.powi(t));
    let eps = F::from_f64(ADAM_EPS);
    let lr_f = F::from_f64(lr);
    let wd = F::from_f64(weight_decay * lr);
    for (name, grad) in grads {
        if ParamSet::<F>::is_running_stat(name) {
            continue;
        }
        let Some(p) = params.get(name) else { continue };
        let shape = p.dim();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(shape));
        *m = m.mapv(|v| v * b1) + grad.mapv(|g| g * (one - b1));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(shape));
        *v = v.mapv(|x| x * b2) + grad.mapv(|g| g * g * (one - b2));
        let m_hat = m.mapv(|x| x / bc1);
        let v_hat = v.mapv(|x| x / bc2);
        let update = &m_hat / &v_hat.mapv(|x| x.sqrt() + eps);
        let p_old = p.clone();
        let p_new = &p_old - &update.mapv(|u| u * lr_f) - p_old.mapv(|x| x * wd);
        params.set(name, p_new);
    }
}

/// Serialized training artifact: model and train configuration plus every
/// named array (parameters, running statistics, optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Scalar> {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub params: ParamSet<F>,
    pub opt: Option<OptState<F>>,
    pub epoch: usize,
    pub step: u64,
    pub best_val: Option<f64>,
    pub history: Vec<EpochStats>,
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    precision: String,
    param_seed: u64,
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    step: u64,
    best_val: Option<f64>,
    history: Vec<EpochStats>,
    has_opt: bool,
    opt_step: u64,
    arrays: Vec<ArrayMeta>,
}

fn json_err(context: &str) -> impl FnOnce(serde_json::Error) -> TrainError + '_ {
    move |source| TrainError::Json {
        context: context.to_string(),
        source,
    }
}

/// Write a checkpoint as `ckpt.json` plus a flat little-endian array blob
/// in the given directory. Arrays are ordered exactly as listed in the
/// metadata, so the round-trip is bit-exact.
pub fn save_checkpoint<F: Scalar>(dir: &Path, ck: &Checkpoint<F>) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let mut arrays: Vec<(String, &Array2<F>)> = ck
        .params
        .iter()
        .map(|(n, a)| (format!("param.{n}"), a))
        .collect();
    if let Some(opt) = &ck.opt {
        arrays.extend(opt.m.iter().map(|(n, a)| (format!("opt.m.{n}"), a)));
        arrays.extend(opt.v.iter().map(|(n, a)| (format!("opt.v.{n}"), a)));
    }
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.to_string(),
        precision: F::precision().to_string(),
        param_seed: ck.params.seed(),
        model: ck.model.clone(),
        train: ck.train.clone(),
        epoch: ck.epoch,
        step: ck.step,
        best_val: ck.best_val,
        history: ck.history.clone(),
        has_opt: ck.opt.is_some(),
        opt_step: ck.opt.as_ref().map_or(0, |o| o.step),
        arrays: arrays
            .iter()
            .map(|(n, a)| ArrayMeta {
                name: n.clone(),
                rows: a.nrows(),
                cols: a.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(json_err("encoding checkpoint"))?;
    fs::write(dir.join("ckpt.json"), json)?;

    let mut blob = Vec::new();
    for (_, a) in &arrays {
        for v in a.iter() {
            if F::precision() == "f32" {
                blob.write_f32::<LittleEndian>((*v).to_f64() as f32)?;
            } else {
                blob.write_f64::<LittleEndian>((*v).to_f64())?;
            }
        }
    }
    fs::write(dir.join("arrays.bin"), blob)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`], checking the format
/// version and precision tag.
pub fn load_checkpoint<F: Scalar>(dir: &Path) -> Result<Checkpoint<F>, TrainError> {
    let meta_text = fs::read_to_string(dir.join("ckpt.json"))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_text).map_err(json_err("decoding checkpoint"))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Format { found: meta.format });
    }
    if meta.precision != F::precision() {
        return Err(TrainError::Precision {
            found: meta.precision,
            expected: F::precision().to_string(),
        });
    }
    let blob = fs::read(dir.join("arrays.bin"))?;
    let width = if meta.precision == "f32" { 4 } else { 8 };
    let expected: usize = meta.arrays.iter().map(|a| a.rows * a.cols).sum();
    if blob.len() != expected * width {
        return Err(TrainError::Truncated {
            expected,
            found: blob.len() / width,
        });
    }
    let mut cursor = std::io::Cursor::new(blob);
    let mut params = ParamSet::new(meta.param_seed);
    let mut opt = meta.has_opt.then(OptState::<F>::new);
    if let Some(o) = opt.as_mut() {
        o.step = meta.opt_step;
    }
    for am in &meta.arrays {
        let mut data = Vec::with_capacity(am.rows * am.cols);
        for _ in 0..am.rows * am.cols {
            let v = if width == 4 {
                F::from_f64(cursor.read_f32::<LittleEndian>()? as f64)
            } else {
                F::from_f64(cursor.read_f64::<LittleEndian>()?)
            };
            data.push(v);
        }
        let arr = Array2::from_shape_vec((am.rows, am.cols), data)
            .expect("shape matches data length by construction");
        if let Some(name) = am.name.strip_prefix("param.") {
            params.set(name, arr);
        } else if let Some(name) = am.name.strip_prefix("opt.m.") {
            opt.as_mut()
                .ok_or_else(|| TrainError::Config("optimizer array without has_opt".into()))?
                .m
                .insert(name.to_string(), arr);
        } else if let Some(name) = am.name.strip_prefix("opt.v.") {
            opt.as_mut()
                .ok_or_else(|| TrainError::Config("optimizer array without has_opt".into()))?
                .v
                .insert(name.to_string(), arr);
        } else {
            return Err(TrainError::Config(format!(
                "unrecognized array name {:?} in checkpoint",
                am.name
            )));
        }
    }
    Ok(Checkpoint {
        model: meta.model,
        train: meta.train,
        params,
        opt,
        epoch: meta.epoch,
        step: meta.step,
        best_val: meta.best_val,
        history: meta.history,
    })
}

/// Training output: the final state and the best-validation state.
#[derive(Debug)]
pub struct TrainOutput<F: Scalar> {
    pub last: Checkpoint<F>,
    pub best: Checkpoint<F>,
}

fn top_param_norms<F: Scalar>(params: &ParamSet<F>, k: usize) -> Vec<(String, f64)> {
    let mut norms: Vec<(String, f64)> = params
        .iter()
        .map(|(n, a)| {
            (
                n.clone(),
                a.iter().map(|v| (*v).to_f64() * (*v).to_f64()).sum::<f64>().sqrt(),
            )
        })
        .collect();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    norms.truncate(k);
    norms
}

fn mean_val_loss<F: Scalar>(
    cfg: &ModelConfig,
    params: &mut ParamSet<F>,
    records: &[SampleRecord],
    weights: &LossWeights,
) -> Result<f64, TrainError> {
    if records.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for rec in records {
        let pred = forward(cfg, params, &rec.observed, &rec.prior, &rec.init)?;
        let target = error_between(&rec.gt, &rec.init);
        total += compute_loss(&pred, &target, weights, &rec.symmetry);
    }
    Ok(total / records.len() as f64)
}

/// Augmentation stream for a given (seed, epoch, record index), independent
/// of batch composition so interrupted runs resume bit-exactly.
fn augment_rng(seed: u64, epoch: usize, record: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, (1 << 50) | ((epoch as u64) << 25) | record as u64)
}

/// Per-epoch progress observer; receives each epoch's stats as they land.
pub type ProgressFn<'a> = &'a mut dyn FnMut(&EpochStats);

/// Minibatch training with single-step error supervision: each record's
/// target is the pose error between its ground truth and its (augmented)
/// initial estimate. Returns the last state and the best-validation state;
/// pass a loaded checkpoint to resume from its epoch.
pub fn train<F: Scalar>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    resume: Option<Checkpoint<F>>,
) -> Result<TrainOutput<F>, TrainError> {
    train_with_progress(model_cfg, train_cfg, train_set, val_set, resume, Option::None)
}

/// [`train`] with an optional per-epoch callback, for long runs that want
/// live progress reporting.
pub fn train_with_progress<F: Scalar>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    resume: Option<Checkpoint<F>>,
    mut progress: Option<ProgressFn<'_>>,
) -> Result<TrainOutput<F>, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(train_cfg.batch_size);
    let total_steps = (train_cfg.epochs * batches_per_epoch) as u64;

    let (mut params, mut opt, start_epoch, mut history, mut best_val, mut best_params) =
        match resume {
            Some(ck) => {
                if &ck.model != model_cfg {
                    return Err(TrainError::Config(
                        "checkpoint model configuration differs from the requested one".into(),
                    ));
                }
                let best = ck.params.clone();
                (
                    ck.params,
                    ck.opt.unwrap_or_default(),
                    ck.epoch,
                    ck.history,
                    ck.best_val,
                    best,
                )
            }
            Option::None => {
                let params: ParamSet<F> = ParamSet::new(train_cfg.seed);
                let best = params.clone();
                (params, OptState::new(), 0, Vec::new(), Option::None, best)
            }
        };
    let mut step = (start_epoch * batches_per_epoch) as u64;

    for epoch in start_epoch..train_cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(train_cfg.seed, (2 << 50) | epoch as u64));

        let mut epoch_loss = 0.0;
        let mut last_lr = train_cfg.base_lr;
        for batch in order.chunks(train_cfg.batch_size) {
            let lr = lr_at(step, total_steps, train_cfg.base_lr, train_cfg.anneal_start_frac);
            last_lr = lr;
            let mut grad_acc: BTreeMap<String, Array2<F>> = BTreeMap::new();
            let mut norm_log = Vec::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let rec = augment(&train_set[i], train_cfg, &mut augment_rng(train_cfg.seed, epoch, i))?;
                let target = error_between(&rec.gt, &rec.init);
                let (obs, pri) = focalized_inputs::<F>(&rec.observed, &rec.prior, &rec.init)?;
                let mut g = Graph::new(&mut params, true);
                let fwd = build_forward(&mut g, model_cfg, &obs, &pri, &rec.init.size)?;
                let loss = loss_on_graph(&mut g, &fwd, &target, &train_cfg.loss_weights, &rec.symmetry)?;
                let loss_val = g.tape.value(loss)[[0, 0]].to_f64();
                if !loss_val.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        batch: batch.to_vec(),
                        param_norms: top_param_norms(&params, 5),
                    });
                }
                batch_loss += loss_val;
                let grads_vec = g.tape.backward(loss);
                let grads = g.param_grads(&grads_vec);
                norm_log.extend(g.norm_log.drain(..));
                drop(g);
                for (name, grad) in grads {
                    grad_acc
                        .entry(name)
                        .and_modify(|a| *a = &*a + &grad)
                        .or_insert(grad);
                }
            }
            let scale = F::from_f64(1.0 / batch.len() as f64);
            for g_arr in grad_acc.values_mut() {
                *g_arr = g_arr.mapv(|v| v * scale);
            }
            adamw_step(&mut params, &grad_acc, &mut opt, lr, train_cfg.weight_decay);
            if step < train_cfg.norm_freeze_steps {
                update_running_stats(&mut params, &norm_log);
            }
            epoch_loss += batch_loss / batch.len() as f64;
            step += 1;
        }

        let val_loss = mean_val_loss(model_cfg, &mut params, val_set, &train_cfg.loss_weights)?;
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches_per_epoch as f64,
            val_loss,
            lr: last_lr,
        });
        if let Some(cb) = progress.as_mut() {
            cb(history.last().expect("just pushed"));
        }
        let improved = match best_val {
            Option::None => true,
            Some(b) => val_loss.is_finite() && val_loss < b,
        };
        if improved {
            best_val = if val_loss.is_finite() {
                Some(val_loss)
            } else {
                best_val
            };
            best_params = params.clone();
        }
    }

    let make_ck = |params: ParamSet<F>, opt: Option<OptState<F>>| Checkpoint {
        model: model_cfg.clone(),
        train: Some(train_cfg.clone()),
        params,
        opt,
        epoch: train_cfg.epochs,
        step,
        best_val,
        history: history.clone(),
    };
    Ok(TrainOutput {
        last: make_ck(params, Some(opt)),
        best: make_ck(best_params, Option::None),
    })
}

/// Anything that maps (observed, prior, initial pose) to a pose error.
pub trait ErrorPredictor {
    fn predict(
        &mut self,
        observed: &PointCloud,
        prior: &PointCloud,
        init: &PoseState,
    ) -> Result<PoseError, TrainError>;
}

/// The learned model as a predictor.
pub struct ModelPredictor<'a, F: Scalar> {
    pub cfg: &'a ModelConfig,
    pub params: &'a mut ParamSet<F>,
}

impl<F: Scalar> ErrorPredictor for ModelPredictor<'_, F> {
    fn predict(
        &mut self,
        observed: &PointCloud,
        prior: &PointCloud,
        init: &PoseState,
    ) -> Result<PoseError, TrainError> {
        Ok(forward(self.cfg, self.params, observed, prior, init)?)
    }
}

/// Predictor that knows the ground truth; refinement with it must land on
/// the truth in one step and stay there.
pub struct OraclePredictor {
    pub gt: PoseState,
}

impl ErrorPredictor for OraclePredictor {
    fn predict(
        &mut self,
        _observed: &PointCloud,
        _prior: &PointCloud,
        init: &PoseState,
    ) -> Result<PoseError, TrainError> {
        Ok(error_between(&self.gt, init))
    }
}

/// Ground-truth oracle for whole datasets. The observed cloud is the one
/// refinement input that never changes across iterations, so it serves as
/// the lookup key (bit-for-bit match).
pub struct DatasetOracle {
    entries: Vec<(PointCloud, PoseState)>,
}

impl DatasetOracle {
    pub fn for_records(records: &[SampleRecord]) -> Self {
        Self {
            entries: records.iter().map(|r| (r.observed.clone(), r.gt.clone())).collect(),
        }
    }
}

impl ErrorPredictor for DatasetOracle {
    fn predict(
        &mut self,
        observed: &PointCloud,
        _prior: &PointCloud,
        init: &PoseState,
    ) -> Result<PoseError, TrainError> {
        let gt = self
            .entries
            .iter()
            .find(|(cloud, _)| cloud == observed)
            .map(|(_, gt)| gt)
            .ok_or_else(|| {
                TrainError::Config("oracle holds no record with this observed cloud".into())
            })?;
        Ok(error_between(gt, init))
    }
}

/// Iterative refinement: starting from `init`, predict an error and compose
/// it onto the running pose, `iters` times. The returned trajectory has
/// `iters + 1` entries and starts with `init` itself.
pub fn refine_iterative(
    predictor: &mut dyn ErrorPredictor,
    observed: &PointCloud,
    prior: &PointCloud,
    init: &PoseState,
    iters: usize,
) -> Result<Vec<PoseState>, TrainError> {
    let mut trajectory = Vec::with_capacity(iters + 1);
    trajectory.push(init.clone());
    for it in 0..iters {
        let current = trajectory.last().expect("trajectory starts non-empty");
        let err = predictor
            .predict(observed, prior, current)
            .map_err(|e| TrainError::Refine {
                iteration: it,
                source: Box::new(e),
            })?;
        let next = compose_update(current, &err).map_err(|e| TrainError::Refine {
            iteration: it,
            source: Box::new(TrainError::Geometry(e)),
        })?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_pose, rot_y_deg};
    use crate::model::Fusion;
    use crate::synthdata::{
        build_category_library, default_categories, mean_shape_prior, sample_record, NoiseModel,
    };
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3, Vector3};
    use tempfile::tempdir;

    fn test_records(seed: u64, n_points: usize, count: usize) -> Vec<SampleRecord> {
        let cats = default_categories();
        let mut rng = stream_rng(seed, 3);
        let lib = build_category_library(&cats[0], 2, &mut rng).unwrap();
        let prior = mean_shape_prior(&lib, n_points).unwrap();
        (0..count)
            .map(|i| {
                sample_record(
                    &lib[i % lib.len()],
                    &prior,
                    Vector3::new(0.1, 0.2, 1.0),
                    n_points,
                    &NoiseModel::none(),
                    &PerturbLimits::default(),
                    &mut rng,
                )
                .unwrap()
            })
            .collect()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 2,
            base_lr: 1e-3,
            point_dropout: 0.1,
            noise_sigma: 0.001,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_mean_reduction_example() {
        // a 0.1 m error on one translation component alone contributes
        // 0.1/3 to the translation term
        let pred = PoseError::new(
            Matrix3::identity(),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::zeros(),
        )
        .unwrap();
        let target = PoseError::identity();
        let w = LossWeights::default();
        let l = compute_loss(&pred, &target, &w, &SymmetrySpec::None);
        assert_abs_diff_eq!(l, 0.1 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_zero_at_exact_prediction() {
        let target = PoseError::new(
            rot_y_deg(30.0),
            Vector3::new(0.01, -0.02, 0.03),
            Vector3::new(0.001, 0.0, -0.004),
        )
        .unwrap();
        let w = LossWeights::default();
        assert_eq!(compute_loss(&target, &target, &w, &SymmetrySpec::None), 0.0);
    }

    #[test]
    fn axial_symmetry_ignores_spin() {
        // rotation about the symmetry axis leaves the axis column unchanged
        let spin = PoseError::new(rot_y_deg(85.0), Vector3::zeros(), Vector3::zeros()).unwrap();
        let target = PoseError::identity();
        let w = LossWeights::default();
        let sym = SymmetrySpec::axial_y();
        assert_abs_diff_eq!(compute_loss(&spin, &target, &w, &sym), 0.0, epsilon = 1e-15);
        // the same spin is penalized without symmetry
        assert!(compute_loss(&spin, &target, &w, &SymmetrySpec::None) > 0.1);
        // a tilt off the axis is penalized even with symmetry
        let tilt = PoseError::new(
            crate::geometry::rot_x_deg(30.0),
            Vector3::zeros(),
            Vector3::zeros(),
        )
        .unwrap();
        assert!(compute_loss(&tilt, &target, &w, &sym) > 0.05);
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        let recs = test_records(1, 16, 2);
        let cfg = ModelConfig::tiny();
        let w = LossWeights {
            w_r: 0.7,
            w_t: 1.3,
            w_s: 2.1,
        };
        for sym in [SymmetrySpec::None, SymmetrySpec::axial_y()] {
            for rec in &recs {
                let mut params: ParamSet<f64> = ParamSet::new(17);
                // tilt the heads for nonzero predictions
                let _ = forward(&cfg, &mut params, &rec.observed, &rec.prior, &rec.init).unwrap();
                for name in ["pred_rot.path_a.2.w", "pred_ts.path_a.2.w", "pred_ts.path_b.2.w"] {
                    let mut r = stream_rng(19, 5);
                    let arr = params.get(name).unwrap().mapv(|v| v + r.random_range(-0.4..0.4));
                    params.set(name, arr);
                }
                let target = error_between(&rec.gt, &rec.init);
                let (obs, pri) =
                    focalized_inputs::<f64>(&rec.observed, &rec.prior, &rec.init).unwrap();
                let mut g = Graph::new(&mut params, false);
                let fwd = build_forward(&mut g, &cfg, &obs, &pri, &rec.init.size).unwrap();
                let loss = loss_on_graph(&mut g, &fwd, &target, &w, &sym).unwrap();
                let tape_val = g.tape.value(loss)[[0, 0]];
                let pred = crate::model::read_pose_error(&g, &fwd).unwrap();
                drop(g);
                let value_val = compute_loss(&pred, &target, &w, &sym);
                assert_abs_diff_eq!(tape_val, value_val, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn lr_schedule_contract() {
        let base = 1e-4;
        let total = 100;
        // constant before the anneal start
        for step in 0..72 {
            assert_eq!(lr_at(step, total, base, 0.72), base);
        }
        // continuous at the boundary
        assert_abs_diff_eq!(lr_at(72, total, base, 0.72), base, epsilon = 1e-18);
        // exact midpoint of the cosine
        assert_abs_diff_eq!(lr_at(86, total, base, 0.72), 0.5 * base, epsilon = 1e-18);
        // reaches zero at the end
        assert_abs_diff_eq!(lr_at(100, total, base, 0.72), 0.0, epsilon = 1e-18);
        // monotone non-increasing over the anneal
        let mut prev = base;
        for step in 72..=100 {
            let lr = lr_at(step, total, base, 0.72);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn augment_preserves_gt_and_count() {
        let recs = test_records(2, 32, 1);
        let cfg = tiny_train_cfg();
        let mut rng = stream_rng(3, 1);
        let aug = augment(&recs[0], &cfg, &mut rng).unwrap();
        assert_eq!(aug.gt, recs[0].gt);
        assert_eq!(aug.observed.len(), recs[0].observed.len());
        assert_eq!(aug.prior, recs[0].prior);
        // init re-perturbed within limits
        let err = error_between(&aug.gt, &aug.init);
        assert!(err.rotation_angle_deg() <= cfg.pert_limits.rot_deg + 1e-9);
        for i in 0..3 {
            assert!(err.translation[i].abs() <= cfg.pert_limits.trans_m + 1e-12);
            assert!(err.size[i].abs() <= cfg.pert_limits.scale_frac * aug.gt.size[i] + 1e-12);
        }
    }

    #[test]
    fn augment_zero_limits_keeps_init() {
        let recs = test_records(4, 24, 1);
        let cfg = TrainConfig {
            pert_limits: PerturbLimits::zero(),
            point_dropout: 0.0,
            noise_sigma: 0.0,
            ..tiny_train_cfg()
        };
        let mut rng = stream_rng(5, 2);
        let aug = augment(&recs[0], &cfg, &mut rng).unwrap();
        assert_eq!(aug.init, recs[0].init);
        assert_eq!(aug.observed, recs[0].observed);
    }

    #[test]
    fn augment_is_seeded() {
        let recs = test_records(6, 24, 1);
        let cfg = tiny_train_cfg();
        let a = augment(&recs[0], &cfg, &mut stream_rng(9, 9)).unwrap();
        let b = augment(&recs[0], &cfg, &mut stream_rng(9, 9)).unwrap();
        let c = augment(&recs[0], &cfg, &mut stream_rng(9, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut params: ParamSet<f64> = ParamSet::new(0);
        params.set("x", Array2::from_elem((1, 1), 5.0));
        let mut state = OptState::new();
        for _ in 0..2000 {
            let x = params.get("x").unwrap()[[0, 0]];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Array2::from_elem((1, 1), 2.0 * (x - 3.0)));
            adamw_step(&mut params, &grads, &mut state, 0.01, 0.0);
        }
        assert_abs_diff_eq!(params.get("x").unwrap()[[0, 0]], 3.0, epsilon = 1e-3);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut params: ParamSet<f64> = ParamSet::new(0);
        params.set("w", Array2::from_elem((1, 1), 1.0));
        let mut state = OptState::new();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array2::from_elem((1, 1), 0.0));
        adamw_step(&mut params, &grads, &mut state, 0.1, 0.5);
        // zero gradient: only the decay acts, w <- w - lr*wd*w
        assert_abs_diff_eq!(params.get("w").unwrap()[[0, 0]], 1.0 - 0.1 * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn adamw_skips_running_stats() {
        let mut params: ParamSet<f64> = ParamSet::new(0);
        params.set("n.running_mean", Array2::from_elem((2, 1), 0.5));
        let mut state = OptState::new();
        let mut grads = BTreeMap::new();
        grads.insert("n.running_mean".to_string(), Array2::from_elem((2, 1), 1.0));
        adamw_step(&mut params, &grads, &mut state, 0.1, 0.1);
        assert_eq!(params.get("n.running_mean").unwrap()[[0, 0]], 0.5);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let recs = test_records(7, 16, 2);
        let cfg = ModelConfig::tiny();
        let tc = tiny_train_cfg();
        let out = train::<f32>(&cfg, &tc, &recs, &recs, Option::None).unwrap();
        let dir = tempdir().unwrap();
        save_checkpoint(dir.path(), &out.last).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.model, out.last.model);
        assert_eq!(back.train, out.last.train);
        assert_eq!(back.epoch, out.last.epoch);
        assert_eq!(back.step, out.last.step);
        assert_eq!(back.best_val, out.last.best_val);
        assert_eq!(back.history, out.last.history);
        assert_eq!(back.params, out.last.params);
        assert_eq!(back.opt, out.last.opt);
        // wrong precision is refused
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()),
            Err(TrainError::Precision { .. })
        ));
    }

    #[test]
    fn checkpoint_format_version_checked() {
        let dir = tempdir().unwrap();
        let ck: Checkpoint<f64> = Checkpoint {
            model: ModelConfig::tiny(),
            train: Option::None,
            params: ParamSet::new(0),
            opt: Option::None,
            epoch: 0,
            step: 0,
            best_val: Option::None,
            history: vec![],
        };
        save_checkpoint(dir.path(), &ck).unwrap();
        let text = std::fs::read_to_string(dir.path().join("ckpt.json")).unwrap();
        std::fs::write(
            dir.path().join("ckpt.json"),
            text.replace(CHECKPOINT_FORMAT, "georef-ckpt/9"),
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(dir.path()),
            Err(TrainError::Format { .. })
        ));
    }

    #[test]
    fn training_runs_and_tracks_history() {
        let recs = test_records(8, 16, 4);
        let cfg = ModelConfig::tiny();
        let tc = tiny_train_cfg();
        let out = train::<f32>(&cfg, &tc, &recs, &recs[..2], Option::None).unwrap();
        assert_eq!(out.last.history.len(), 2);
        assert!(out.last.history.iter().all(|h| h.train_loss.is_finite()));
        assert!(out.last.history.iter().all(|h| h.val_loss.is_finite()));
        assert!(out.best.best_val.is_some());
        assert_eq!(out.last.step, 2 * 2);
    }

    #[test]
    fn running_stats_freeze_after_warmup() {
        let recs = test_records(21, 16, 4);
        let cfg = ModelConfig::tiny();
        // 2 batches per epoch, so warmup covers exactly the first epoch
        let tc = TrainConfig { norm_freeze_steps: 2, ..tiny_train_cfg() };

        let frozen = TrainConfig { norm_freeze_steps: 0, ..tc.clone() };
        let out = train::<f64>(&cfg, &frozen, &recs, &recs[..2], Option::None).unwrap();
        for (name, arr) in out.last.params.iter() {
            if name.ends_with(".running_mean") {
                assert!(arr.iter().all(|v| *v == 0.0), "{name} moved with warmup 0");
            }
            if name.ends_with(".running_var") {
                assert!(arr.iter().all(|v| *v == 1.0), "{name} moved with warmup 0");
            }
        }

        let one = TrainConfig { epochs: 1, ..tc.clone() };
        let warm = train::<f64>(&cfg, &one, &recs, &recs[..2], Option::None).unwrap();
        let moved = warm
            .last
            .params
            .iter()
            .any(|(name, arr)| name.ends_with(".running_mean") && arr.iter().any(|v| *v != 0.0));
        assert!(moved, "warmup updated no running statistics");

        // epoch 2 runs past the freeze point without touching the stats
        let full = train::<f64>(&cfg, &tc, &recs, &recs[..2], Option::None).unwrap();
        for (name, arr) in warm.last.params.iter() {
            if name.contains(".running_") {
                assert_eq!(arr, full.last.params.get(name).unwrap(), "{name} moved after freeze");
            }
        }
    }

    #[test]
    fn training_resumes_bit_exactly() {
        let recs = test_records(9, 16, 4);
        let cfg = ModelConfig::tiny();
        let tc = tiny_train_cfg(); // 2 epochs
        let straight = train::<f32>(&cfg, &tc, &recs, &recs[..2], Option::None).unwrap();

        let one = TrainConfig { epochs: 1, ..tc.clone() };
        let half = train::<f32>(&cfg, &one, &recs, &recs[..2], Option::None).unwrap();
        let dir = tempdir().unwrap();
        save_checkpoint(dir.path(), &half.last).unwrap();
        let loaded: Checkpoint<f32> = load_checkpoint(dir.path()).unwrap();
        // continue under the 2-epoch schedule from epoch 1
        let mut resumed_from = loaded;
        resumed_from.epoch = 1;
        let resumed = train::<f32>(&cfg, &tc, &recs, &recs[..2], Some(resumed_from)).unwrap();

        for (name, arr) in straight.last.params.iter() {
            let other = resumed.last.params.get(name).unwrap();
            assert_eq!(arr, other, "parameter {name} diverged after resume");
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let recs = test_records(10, 16, 2);
        let cfg = ModelConfig::tiny();
        let tc = tiny_train_cfg();
        // poison a weight after materialization
        let mut params: ParamSet<f32> = ParamSet::new(tc.seed);
        let _ = forward(&cfg, &mut params, &recs[0].observed, &recs[0].prior, &recs[0].init)
            .unwrap();
        let w = params.get("enc.hs.0.a.w").unwrap().mapv(|_| f32::NAN);
        params.set("enc.hs.0.a.w", w);
        let poisoned = Checkpoint {
            model: cfg.clone(),
            train: Some(tc.clone()),
            params,
            opt: Option::None,
            epoch: 0,
            step: 0,
            best_val: Option::None,
            history: vec![],
        };
        let err = train::<f32>(&cfg, &tc, &recs, &recs, Some(poisoned)).unwrap_err();
        let TrainError::NonFinite { batch, param_norms, .. } = err else {
            panic!("expected a non-finite abort, got {err}");
        };
        assert!(!batch.is_empty());
        assert!(!param_norms.is_empty());
    }

    #[test]
    fn oracle_refinement_hits_gt_in_one_step() {
        let recs = test_records(11, 16, 3);
        for rec in &recs {
            let mut oracle = OraclePredictor { gt: rec.gt.clone() };
            let traj =
                refine_iterative(&mut oracle, &rec.observed, &rec.prior, &rec.init, 4).unwrap();
            assert_eq!(traj.len(), 5);
            assert_eq!(traj[0], rec.init);
            for state in &traj[1..] {
                assert!((state.rotation - rec.gt.rotation).norm() < 1e-9);
                assert!((state.translation - rec.gt.translation).norm() < 1e-9);
                assert!((state.size - rec.gt.size).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_iterations_returns_initial_pose() {
        let recs = test_records(12, 16, 1);
        let rec = &recs[0];
        let mut oracle = OraclePredictor { gt: rec.gt.clone() };
        let traj = refine_iterative(&mut oracle, &rec.observed, &rec.prior, &rec.init, 0).unwrap();
        assert_eq!(traj, vec![rec.init.clone()]);
    }

    #[test]
    fn fresh_model_trajectory_is_constant() {
        let recs = test_records(13, 16, 1);
        let rec = &recs[0];
        let cfg = ModelConfig::tiny();
        let mut params: ParamSet<f64> = ParamSet::new(3);
        let mut predictor = ModelPredictor { cfg: &cfg, params: &mut params };
        let traj =
            refine_iterative(&mut predictor, &rec.observed, &rec.prior, &rec.init, 3).unwrap();
        assert_eq!(traj.len(), 4);
        for state in &traj[1..] {
            assert_eq!(state.rotation, rec.init.rotation);
            assert_eq!(state.translation, rec.init.translation);
            assert_eq!(state.size, rec.init.size);
        }
    }

    #[test]
    fn refine_error_is_annotated_with_iteration() {
        struct FailAt(usize, usize);
        impl ErrorPredictor for FailAt {
            fn predict(
                &mut self,
                _o: &PointCloud,
                _p: &PointCloud,
                _i: &PoseState,
            ) -> Result<PoseError, TrainError> {
                if self.1 >= self.0 {
                    return Err(TrainError::Config("synthetic failure".into()));
                }
                self.1 += 1;
                Ok(PoseError::identity())
            }
        }
        let recs = test_records(14, 16, 1);
        let rec = &recs[0];
        let mut failing = FailAt(2, 0);
        let err =
            refine_iterative(&mut failing, &rec.observed, &rec.prior, &rec.init, 4).unwrap_err();
        let TrainError::Refine { iteration, .. } = err else {
            panic!("expected annotated refine error, got {err}")
        };
        assert_eq!(iteration, 2);
    }

    #[test]
    fn config_fusion_none_trains_too() {
        // a quick end-to-end pass for a non-default row shape
        let recs = test_records(15, 16, 2);
        let cfg = ModelConfig {
            cct: false,
            fusion: Fusion::None,
            ..ModelConfig::tiny()
        };
        let tc = TrainConfig { epochs: 1, ..tiny_train_cfg() };
        let out = train::<f32>(&cfg, &tc, &recs, &[], Option::None).unwrap();
        assert_eq!(out.last.history.len(), 1);
        assert!(out.last.history[0].val_loss.is_nan());
    }

    #[test]
    fn random_pose_round_trip_under_training_target() {
        // the supervision target composed onto the init recovers the gt
        let mut rng = stream_rng(16, 6);
        for _ in 0..50 {
            let gt = random_pose(&mut rng);
            let init = random_pose(&mut rng);
            let target = error_between(&gt, &init);
            let composed = compose_update(&init, &target).unwrap();
            assert!((composed.rotation - gt.rotation).norm() < 1e-12);
            assert!((composed.translation - gt.translation).norm() < 1e-12);
            assert!((composed.size - gt.size).norm() < 1e-12);
        }
    }
}
