//! Learnable building blocks: shared per-point layers, the two-path hybrid
//! scope layer, Matrix Nets emitting learnable affine transforms, the global
//! feature extractor and the pose-error predictor heads.
//!
//! Parameters live in a flat named store and are bound to tape leaves once
//! per graph, so weight sharing (the same name bound twice) accumulates
//! gradients naturally. Normalization layers read frozen running statistics
//! as constants and log per-forward batch statistics on the side, keeping
//! every forward a pure, per-sample-deterministic function.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tape::{Scalar, Tape, TapeError, Var};

/// Leaky-rectifier slope used everywhere.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Variance floor inside normalization layers.
pub const NORM_EPS: f64 = 1e-5;
/// Momentum for running-statistics updates.
pub const NORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum BlockError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("configuration error: {0}")]
    Config(String),
}

/// How a parameter array is filled at creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform Kaiming-style fan-in scaling.
    Kaiming,
    Zero,
    One,
    Identity,
}

/// Flat named parameter store. Initialization is a pure function of
/// (store seed, parameter name), so creation order never matters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Scalar> {
    seed: u64,
    arrays: BTreeMap<String, Array2<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            arrays: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.arrays.get(name)
    }

    pub fn set(&mut self, name: &str, value: Array2<F>) {
        self.arrays.insert(name.to_string(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Names of normalization running statistics; present in checkpoints but
    /// skipped by optimizers.
    pub fn is_running_stat(name: &str) -> bool {
        name.ends_with(".running_mean") || name.ends_with(".running_var")
    }

    /// Fetch `name`, creating it with the deterministic per-name initializer
    /// if absent.
    pub fn get_or_create(
        &mut self,
        name: &str,
        shape: (usize, usize),
        init: Init,
    ) -> Result<&Array2<F>, BlockError> {
        if !self.arrays.contains_key(name) {
            let value = init_array(self.seed, name, shape, init);
            self.arrays.insert(name.to_string(), value);
        }
        let arr = &self.arrays[name];
        if arr.dim() != shape {
            return Err(BlockError::ParamShape {
                name: name.to_string(),
                found: arr.dim(),
                expected: shape,
            });
        }
        Ok(arr)
    }

    /// Total element count across all arrays.
    pub fn n_elements(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    pub fn map_precision<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            seed: self.seed,
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| G::from_f64(x.to_f64()))))
                .collect(),
        }
    }
}

fn init_array<F: Scalar>(
    seed: u64,
    name: &str,
    shape: (usize, usize),
    init: Init,
) -> Array2<F> {
    match init {
        Init::Zero => Array2::zeros(shape),
        Init::One => Array2::from_elem(shape, F::one()),
        Init::Identity => {
            let mut a = Array2::zeros(shape);
            for i in 0..shape.0.min(shape.1) {
                a[[i, i]] = F::one();
            }
            a
        }
        Init::Kaiming => {
            let mut hasher = Sha256::new();
            hasher.update(seed.to_le_bytes());
            hasher.update(name.as_bytes());
            let digest = hasher.finalize();
            let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(
                digest[..8].try_into().expect("8 bytes"),
            ));
            let fan_in = shape.1.max(1);
            let bound = (6.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn(shape, |_| F::from_f64(rng.random_range(-bound..bound)))
        }
    }
}

/// Batch statistics logged by one normalization layer during one forward.
#[derive(Debug, Clone)]
pub struct NormBatch<F: Scalar> {
    pub name: String,
    pub mean: Array2<F>,
    pub var: Array2<F>,
}

/// A computation graph bound to a parameter store. Binding the same name
/// twice returns the same tape leaf, which is what makes encoder weight
/// sharing literal parameter identity.
pub struct Graph<'p, F: Scalar> {
    pub tape: Tape<F>,
    params: &'p mut ParamSet<F>,
    bound: BTreeMap<String, Var>,
    pub norm_log: Vec<NormBatch<F>>,
    pub train_mode: bool,
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p mut ParamSet<F>, train_mode: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            norm_log: Vec::new(),
            train_mode,
        }
    }

    /// Bind parameter `name` (creating it if needed) as a tape leaf.
    pub fn param(
        &mut self,
        name: &str,
        shape: (usize, usize),
        init: Init,
    ) -> Result<Var, BlockError> {
        if let Some(v) = self.bound.get(name) {
            if self.tape.shape(*v) != shape {
                return Err(BlockError::ParamShape {
                    name: name.to_string(),
                    found: self.tape.shape(*v),
                    expected: shape,
                });
            }
            return Ok(*v);
        }
        let value = self.params.get_or_create(name, shape, init)?.clone();
        let v = self.tape.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Read a non-parameter constant from the store (running statistics).
    fn stat(&mut self, name: &str, shape: (usize, usize), init: Init) -> Array2<F> {
        self.params
            .get_or_create(name, shape, init)
            .expect("stat shape is construction-time constant")
            .clone()
    }

    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.tape.leaf(value)
    }

    /// Collect per-parameter gradients from a backward sweep.
    pub fn param_grads(&self, grads: &[Option<Array2<F>>]) -> BTreeMap<String, Array2<F>> {
        self.bound
            .iter()
            .filter_map(|(name, var)| {
                grads[var.index()].as_ref().map(|g| (name.clone(), g.clone()))
            })
            .collect()
    }

    /// Names bound so far (parameters touched by this graph).
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.keys().cloned().collect()
    }
}

/// Options for per-point linear stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpOpts {
    pub norm: bool,
    pub act: bool,
    /// Apply activation (and normalization) after the last layer too.
    pub final_act: bool,
}

impl Default for MlpOpts {
    fn default() -> Self {
        Self {
            norm: true,
            act: true,
            final_act: true,
        }
    }
}

/// One linear layer y = W x + b applied per point (kernel-size-1
/// convolution).
pub fn linear<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    x: Var,
    out_c: usize,
    zero_init: bool,
) -> Result<Var, BlockError> {
    let (in_c, _) = g.tape.shape(x);
    let init = if zero_init { Init::Zero } else { Init::Kaiming };
    let w = g.param(&format!("{prefix}.w"), (out_c, in_c), init)?;
    let b = g.param(&format!("{prefix}.b"), (out_c, 1), Init::Zero)?;
    let y = g.tape.matmul(w, x)?;
    Ok(g.tape.add_col(y, b)?)
}

/// Per-channel normalization using frozen running statistics as constants,
/// with learnable scale and shift. In train mode the current map's
/// per-channel statistics are logged for a post-step running update.
pub fn normalize<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    x: Var,
) -> Result<Var, BlockError> {
    let (c, n) = g.tape.shape(x);
    let run_mean = g.stat(&format!("{prefix}.running_mean"), (c, 1), Init::Zero);
    let run_var = g.stat(&format!("{prefix}.running_var"), (c, 1), Init::One);

    if g.train_mode {
        let value = g.tape.value(x);
        let mean = value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .mapv(|s| s / F::from_f64(n as f64));
        let centered = value - &mean;
        let var = centered
            .mapv(|d| d * d)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .mapv(|s| s / F::from_f64(n as f64));
        g.norm_log.push(NormBatch {
            name: prefix.to_string(),
            mean,
            var,
        });
    }

    let eps = F::from_f64(NORM_EPS);
    let inv_std = run_var.mapv(|v| F::one() / (v + eps).sqrt());
    let shift = (&run_mean * &inv_std).mapv(|v| -v);
    let x_hat = g.tape.row_affine_const(x, &inv_std, &shift)?;
    let gamma = g.param(&format!("{prefix}.gamma"), (c, 1), Init::One)?;
    let beta = g.param(&format!("{prefix}.beta"), (c, 1), Init::Zero)?;
    let scaled = g.tape.mul_col(x_hat, gamma)?;
    Ok(g.tape.add_col(scaled, beta)?)
}

/// Fold logged batch statistics into the running statistics with momentum.
pub fn update_running_stats<F: Scalar>(params: &mut ParamSet<F>, log: &[NormBatch<F>]) {
    let momentum = F::from_f64(NORM_MOMENTUM);
    let one_minus = F::one() - momentum;
    // average duplicate entries (same layer seen several times per batch)
    let mut grouped: BTreeMap<&str, (Array2<F>, Array2<F>, usize)> = BTreeMap::new();
    for entry in log {
        grouped
            .entry(entry.name.as_str())
            .and_modify(|(m, v, k)| {
                *m = &*m + &entry.mean;
                *v = &*v + &entry.var;
                *k += 1;
            })
            .or_insert_with(|| (entry.mean.clone(), entry.var.clone(), 1));
    }
    for (name, (mean_sum, var_sum, k)) in grouped {
        let inv = F::from_f64(1.0 / k as f64);
        let mean = mean_sum.mapv(|v| v * inv);
        let var = var_sum.mapv(|v| v * inv);
        if let Some(rm) = params.arrays.get_mut(&format!("{name}.running_mean")) {
            *rm = rm.mapv(|v| v * momentum) + mean.mapv(|v| v * one_minus);
        }
        if let Some(rv) = params.arrays.get_mut(&format!("{name}.running_var")) {
            *rv = rv.mapv(|v| v * momentum) + var.mapv(|v| v * one_minus);
        }
    }
}

/// Linear (+ optional normalization and activation) block.
fn conv_block<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    x: Var,
    out_c: usize,
    opts: MlpOpts,
    last: bool,
) -> Result<Var, BlockError> {
    let mut y = linear(g, prefix, x, out_c, false)?;
    let decorate = !last || opts.final_act;
    if decorate && opts.norm {
        y = normalize(g, &format!("{prefix}.norm"), y)?;
    }
    if decorate && opts.act {
        y = g.tape.leaky_relu(y, LEAKY_SLOPE);
    }
    Ok(y)
}

/// Stack of per-point shared linear layers; `widths` are the successive
/// output channel counts. Permutation-equivariant over points.
pub fn shared_point_layers<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    x: Var,
    widths: &[usize],
    opts: MlpOpts,
) -> Result<Var, BlockError> {
    if widths.is_empty() {
        return Err(BlockError::Config("widths must be non-empty".into()));
    }
    let mut h = x;
    for (i, &w) in widths.iter().enumerate() {
        let last = i + 1 == widths.len();
        h = conv_block(g, &format!("{prefix}.{i}"), h, w, opts, last)?;
    }
    Ok(h)
}

/// Configuration of one hybrid-scope layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HsConfig {
    pub k_neighbors: usize,
    pub out_channels: usize,
}

/// Instrumentation record of one hybrid-scope layer application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HsInfo {
    /// True when the receptive fields came from feature space rather than
    /// Euclidean coordinates.
    pub feature_space: bool,
    /// Post-aggregation neighbor sets (farthest neighbor already dropped).
    pub neighbors: Vec<Vec<usize>>,
}

/// k nearest columns of `space` for each column, by squared L2 distance,
/// excluding the point itself. Ties break on the lower index.
fn knn_columns<F: Scalar>(space: &Array2<F>, k: usize) -> Vec<Vec<(f64, usize)>> {
    let n = space.ncols();
    let mut out = Vec::with_capacity(n);
    // Gram trick: d^2(i,j) = |xi|^2 + |xj|^2 - 2 xi.xj
    let gram = space.t().dot(space);
    let sq: Vec<f64> = (0..n).map(|i| gram[[i, i]].to_f64()).collect();
    for j in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&i| i != j)
            .map(|i| ((sq[i] + sq[j] - 2.0 * gram[[i, j]].to_f64()).max(0.0), i))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        dists.truncate(k);
        out.push(dists);
    }
    out
}

/// Graph convolution: each point's input is concatenated with the mean of
/// its neighborhood (k nearest in `space`, farthest of the k dropped) and
/// passed through a per-point block. Returns the output and the retained
/// neighbor sets.
pub fn graph_conv<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    x: Var,
    space: &Array2<F>,
    k_neighbors: usize,
    out_c: usize,
    opts: MlpOpts,
) -> Result<(Var, Vec<Vec<usize>>), BlockError> {
    let n = space.ncols();
    if k_neighbors >= n {
        return Err(BlockError::Config(format!(
            "k_neighbors = {k_neighbors} must be below the point count {n}"
        )));
    }
    if k_neighbors < 2 {
        return Err(BlockError::Config(
            "k_neighbors must be at least 2 so one outlier can be dropped".into(),
        ));
    }
    let knn = knn_columns(space, k_neighbors);
    // ORL: drop the single farthest of the k neighbors
    let neighbors: Vec<Vec<usize>> = knn
        .iter()
        .map(|d| d[..d.len() - 1].iter().map(|&(_, i)| i).collect())
        .collect();
    let agg = g.tape.neighbor_mean(x, neighbors.clone())?;
    let stacked = g.tape.concat(x, agg, Axis(0))?;
    let out = conv_block(g, prefix, stacked, out_c, opts, false)?;
    Ok((out, neighbors))
}

/// Two-path point feature layer. Path A: per-point linear layers on raw
/// coordinates, preserving absolute position. Path B: graph convolution
/// whose receptive field is the k nearest neighbors in the previous layer's
/// feature space (Euclidean fallback when `feats` is absent), aggregated by
/// the mean of the k neighbors after dropping the single farthest one.
/// Returns the projected concatenation plus both path outputs and the
/// instrumentation record.
pub fn hs_layer<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    points: Var,
    feats: Option<Var>,
    cfg: HsConfig,
    opts: MlpOpts,
) -> Result<(Var, Var, Var, HsInfo), BlockError> {
    let nn_source = feats.unwrap_or(points);
    let space = g.tape.value(nn_source).clone();

    let path_a = conv_block(g, &format!("{prefix}.a"), points, cfg.out_channels, opts, false)?;

    let x_b = feats.unwrap_or(points);
    let (path_b, neighbors) = graph_conv(
        g,
        &format!("{prefix}.b"),
        x_b,
        &space,
        cfg.k_neighbors,
        cfg.out_channels,
        opts,
    )?;
    let info = HsInfo {
        feature_space: feats.is_some(),
        neighbors,
    };

    let both = g.tape.concat(path_a, path_b, Axis(0))?;
    let out = conv_block(g, &format!("{prefix}.proj"), both, cfg.out_channels, opts, true)?;
    Ok((out, path_a, path_b, info))
}

/// A learnable affine transform emitted by a Matrix Net.
#[derive(Debug, Clone, Copy)]
pub enum Lat {
    /// 3×3 point transform.
    Point(Var),
    /// Two feature transforms (rotation branch, translation/size branch).
    Feature { m_r: Var, m_ts: Var },
}

/// Permutation-invariant matrix emitter: per-point front end, max-pool,
/// dense tail, reshaped into one 3×3 or two `fw`×`fw` matrices with identity
/// added (the final dense layer is zero-initialized, so a fresh net emits
/// exact identities). `f_lat` must be 9 or 2·fw².
pub fn matrix_net<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    points: Var,
    f_lat: usize,
    use_hs_front: bool,
    fw: usize,
    k_neighbors: usize,
) -> Result<Lat, BlockError> {
    if f_lat != 9 && f_lat != 2 * fw * fw {
        return Err(BlockError::Config(format!(
            "f_lat must be 9 or {} (two {fw}x{fw} matrices), got {f_lat}",
            2 * fw * fw
        )));
    }
    let opts = MlpOpts::default();
    let widths = [fw, 2 * fw, 16 * fw];
    let front = if use_hs_front {
        let cfg1 = HsConfig {
            k_neighbors,
            out_channels: widths[0],
        };
        let (h1, _, _, _) = hs_layer(g, &format!("{prefix}.front.0"), points, None, cfg1, opts)?;
        let cfg2 = HsConfig {
            k_neighbors,
            out_channels: widths[1],
        };
        let (h2, _, _, _) =
            hs_layer(g, &format!("{prefix}.front.1"), points, Some(h1), cfg2, opts)?;
        conv_block(g, &format!("{prefix}.front.2"), h2, widths[2], opts, false)?
    } else {
        shared_point_layers(g, &format!("{prefix}.front"), points, &widths, opts)?
    };
    let pooled = g.tape.max_pool_cols(front);
    let d1 = conv_block(g, &format!("{prefix}.dense.0"), pooled, 8 * fw, opts, false)?;
    let d2 = conv_block(g, &format!("{prefix}.dense.1"), d1, 4 * fw, opts, false)?;
    let flat = linear(g, &format!("{prefix}.dense.2"), d2, f_lat, true)?;

    if f_lat == 9 {
        let m = g.tape.reshape(flat, 3, 3)?;
        let eye = g.input(identity_array(3));
        Ok(Lat::Point(g.tape.add(m, eye)?))
    } else {
        let stacked = g.tape.reshape(flat, 2 * fw, fw)?;
        let top = g.tape.slice_rows(stacked, 0, fw)?;
        let bottom = g.tape.slice_rows(stacked, fw, fw)?;
        let eye = g.input(identity_array(fw));
        let m_r = g.tape.add(top, eye)?;
        let eye2 = g.input(identity_array(fw));
        let m_ts = g.tape.add(bottom, eye2)?;
        Ok(Lat::Feature { m_r, m_ts })
    }
}

fn identity_array<F: Scalar>(n: usize) -> Array2<F> {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        a[[i, i]] = F::one();
    }
    a
}

/// Hybrid-scope layer, two per-point layers, max-pool to a global vector,
/// broadcast and concatenate onto the input features:
/// output channels = C_in + 16·fw.
pub fn global_feature_extractor<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    points: Var,
    feats: Var,
    fw: usize,
    k_neighbors: usize,
) -> Result<Var, BlockError> {
    let (_, n_p) = g.tape.shape(points);
    let (_, n_f) = g.tape.shape(feats);
    if n_p != n_f {
        return Err(BlockError::Config(format!(
            "points ({n_p}) and features ({n_f}) disagree on point count"
        )));
    }
    let opts = MlpOpts::default();
    let cfg = HsConfig {
        k_neighbors,
        out_channels: 2 * fw,
    };
    let (h, _, _, _) = hs_layer(g, &format!("{prefix}.hs"), points, Some(feats), cfg, opts)?;
    let h = conv_block(g, &format!("{prefix}.conv.0"), h, 8 * fw, opts, false)?;
    let h = conv_block(g, &format!("{prefix}.conv.1"), h, 16 * fw, opts, true)?;
    let global = g.tape.max_pool_cols(h);
    let ones = g.input(Array2::from_elem((1, n_p), F::one()));
    let broadcast = g.tape.matmul(global, ones)?;
    Ok(g.tape.concat(feats, broadcast, Axis(0))?)
}

/// One predictor path: per-feature layers, transpose of the channel/point
/// axes before the final zero-initialized layer, mean-reduced to a 3-vector.
fn predictor_path<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    x: Var,
    fw: usize,
) -> Result<Var, BlockError> {
    let opts = MlpOpts {
        norm: false,
        ..MlpOpts::default()
    };
    let h = conv_block(g, &format!("{prefix}.0"), x, 4 * fw, opts, false)?;
    let h = conv_block(g, &format!("{prefix}.1"), h, 2 * fw, opts, false)?;
    let ht = g.tape.transpose(h);
    let out = linear(g, &format!("{prefix}.2"), ht, 3, true)?;
    Ok(g.tape.mean_cols(out))
}

/// Two identical-architecture, unshared prediction paths mapping fused
/// feature vectors to two 3-vectors. Zero-initialized final layers make a
/// fresh predictor emit exactly (0,0,0) twice.
pub fn pose_error_predictor<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    f_a: Var,
    f_b: Var,
    fw: usize,
) -> Result<(Var, Var), BlockError> {
    let a = predictor_path(g, &format!("{prefix}.path_a"), f_a, fw)?;
    let b = predictor_path(g, &format!("{prefix}.path_b"), f_b, fw)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Finite-difference check over every parameter touched by `build`.
    fn grad_check<B>(mut params: ParamSet<f64>, build: B, tol: f64)
    where
        B: Fn(&mut Graph<f64>) -> Var,
    {
        let (loss0, grads) = {
            let mut g = Graph::new(&mut params, false);
            let loss = build(&mut g);
            let grads_vec = g.tape.backward(loss);
            (g.tape.value(loss)[[0, 0]], g.param_grads(&grads_vec))
        };
        assert!(loss0.is_finite());
        let h = 1e-5;
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            if ParamSet::<f64>::is_running_stat(&name) {
                continue;
            }
            let shape = params.get(&name).unwrap().dim();
            let zero = Array2::zeros(shape);
            let analytic = grads.get(&name).unwrap_or(&zero);
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let eval = |delta: f64| {
                        let mut p2 = params.clone();
                        let mut arr = p2.get(&name).unwrap().clone();
                        arr[[r, c]] += delta;
                        p2.set(&name, arr);
                        let mut g = Graph::new(&mut p2, false);
                        let loss = build(&mut g);
                        g.tape.value(loss)[[0, 0]]
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let ana = analytic[[r, c]];
                    let diff = (numeric - ana).abs();
                    if diff < 1e-10 {
                        // below the central-difference noise floor
                        continue;
                    }
                    let rel = diff / (numeric.abs() + ana.abs()).max(1e-8);
                    assert!(
                        rel < tol,
                        "{name}[{r},{c}]: numeric {numeric} vs analytic {ana} (rel {rel})"
                    );
                }
            }
        }
    }

    #[test]
    fn identity_mlp_is_identity() {
        let mut params: ParamSet<f64> = ParamSet::new(0);
        params.set("mlp.0.w", identity_array(4));
        params.set("mlp.0.b", Array2::zeros((4, 1)));
        let x = randn(&mut rng(1), 4, 7);
        let mut g = Graph::new(&mut params, false);
        let xv = g.input(x.clone());
        let opts = MlpOpts {
            norm: false,
            act: false,
            final_act: false,
        };
        let y = shared_point_layers(&mut g, "mlp", xv, &[4], opts).unwrap();
        assert_eq!(g.tape.value(y), &x);
    }

    #[test]
    fn mlp_permutation_equivariant() {
        let mut params: ParamSet<f64> = ParamSet::new(3);
        let x = randn(&mut rng(2), 3, 9);
        let perm: Vec<usize> = vec![4, 0, 8, 2, 6, 1, 7, 3, 5];
        let run = |params: &mut ParamSet<f64>, input: &Array2<f64>| {
            let mut g = Graph::new(params, false);
            let xv = g.input(input.clone());
            let y = shared_point_layers(&mut g, "mlp", xv, &[8, 5], MlpOpts::default()).unwrap();
            g.tape.value(y).clone()
        };
        let y = run(&mut params, &x);
        let mut xp = Array2::zeros((3, 9));
        for (j, &p) in perm.iter().enumerate() {
            xp.column_mut(j).assign(&x.column(p));
        }
        let yp = run(&mut params, &xp);
        for (j, &p) in perm.iter().enumerate() {
            for i in 0..y.nrows() {
                assert_eq!(yp[[i, j]], y[[i, p]], "row {i} col {j}");
            }
        }
    }

    #[test]
    fn mlp_grad_check() {
        let mut rng_ = rng(4);
        for trial in 0..3 {
            let c = 2 + trial;
            let x = randn(&mut rng_, c, 6);
            let params: ParamSet<f64> = ParamSet::new(10 + trial as u64);
            grad_check(
                params,
                move |g| {
                    let xv = g.input(x.clone());
                    let y =
                        shared_point_layers(g, "mlp", xv, &[5, 4], MlpOpts::default()).unwrap();
                    g.tape.mean_all(y)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn hs_identical_points_identical_path_b() {
        // N = k+1 identical points: every neighborhood is the same set
        let n = 6;
        let x = Array2::from_elem((3, n), 0.5);
        let mut params: ParamSet<f64> = ParamSet::new(5);
        let mut g = Graph::new(&mut params, false);
        let xv = g.input(x);
        let cfg = HsConfig {
            k_neighbors: 5,
            out_channels: 4,
        };
        let (_, _, path_b, _) = hs_layer(&mut g, "hs", xv, None, cfg, MlpOpts::default()).unwrap();
        let pb = g.tape.value(path_b);
        for j in 1..n {
            for i in 0..pb.nrows() {
                assert_eq!(pb[[i, j]], pb[[i, 0]]);
            }
        }
    }

    #[test]
    fn hs_permutation_equivariant() {
        let n = 10;
        let x = randn(&mut rng(6), 3, n);
        let perm: Vec<usize> = vec![7, 3, 9, 0, 5, 2, 8, 1, 6, 4];
        let mut params: ParamSet<f64> = ParamSet::new(7);
        let run = |params: &mut ParamSet<f64>, input: &Array2<f64>| {
            let mut g = Graph::new(params, false);
            let xv = g.input(input.clone());
            let cfg = HsConfig {
                k_neighbors: 4,
                out_channels: 6,
            };
            let (out, _, _, _) = hs_layer(&mut g, "hs", xv, None, cfg, MlpOpts::default()).unwrap();
            g.tape.value(out).clone()
        };
        let y = run(&mut params, &x);
        let mut xp = Array2::zeros((3, n));
        for (j, &p) in perm.iter().enumerate() {
            xp.column_mut(j).assign(&x.column(p));
        }
        let yp = run(&mut params, &xp);
        for (j, &p) in perm.iter().enumerate() {
            for i in 0..y.nrows() {
                let d = (yp[[i, j]] - y[[i, p]]).abs();
                assert!(d < 1e-12, "row {i} col {j}: {d}");
            }
        }
    }

    #[test]
    fn orl_dampens_outlier_versus_plain_mean() {
        // k+1 points: one clean cluster plus one far outlier; compare the
        // aggregated neighbor feature of a cluster point with and without
        // the outlier against the ORL drop-farthest aggregation
        let k = 5;
        let mut pts = randn(&mut rng(8), 3, k + 1).mapv(|v| v * 0.05);
        for i in 0..3 {
            pts[[i, 0]] = 10.0; // the outlier
        }
        let knn = knn_columns(&pts, k);
        // consider the last point: its k nearest include the outlier? build
        // aggregations for every point and measure the shift caused by the
        // outlier under ORL vs plain mean
        let mut any_checked = false;
        for j in 1..k + 1 {
            let ids: Vec<usize> = knn[j].iter().map(|&(_, i)| i).collect();
            if !ids.contains(&0) {
                continue;
            }
            any_checked = true;
            // plain mean over all k neighbors
            let mean_with: Array2<f64> = {
                let mut m = Array2::zeros((3, 1));
                for &i in &ids {
                    m = m + pts.column(i).insert_axis(Axis(1)).to_owned();
                }
                m / k as f64
            };
            // ORL mean (farthest dropped — the outlier is farthest)
            let orl_ids: Vec<usize> = knn[j][..k - 1].iter().map(|&(_, i)| i).collect();
            assert!(!orl_ids.contains(&0), "outlier should be the dropped one");
            let mean_orl: Array2<f64> = {
                let mut m = Array2::zeros((3, 1));
                for &i in &orl_ids {
                    m = m + pts.column(i).insert_axis(Axis(1)).to_owned();
                }
                m / (k - 1) as f64
            };
            // reference: mean over the same k-1 clean neighbors
            let clean_ref = &mean_orl;
            let shift_plain = (&mean_with - clean_ref).mapv(f64::abs).sum();
            let shift_orl = (&mean_orl - clean_ref).mapv(f64::abs).sum();
            assert!(
                shift_orl < shift_plain,
                "ORL shift {shift_orl} not below plain-mean shift {shift_plain}"
            );
        }
        assert!(any_checked, "fixture never placed the outlier in a neighborhood");
    }

    #[test]
    fn hs_rejects_large_k() {
        let mut params: ParamSet<f64> = ParamSet::new(9);
        let mut g = Graph::new(&mut params, false);
        let xv = g.input(randn(&mut rng(9), 3, 5));
        let cfg = HsConfig {
            k_neighbors: 5,
            out_channels: 4,
        };
        assert!(matches!(
            hs_layer(&mut g, "hs", xv, None, cfg, MlpOpts::default()),
            Err(BlockError::Config(_))
        ));
    }

    #[test]
    fn rff_uses_feature_space_not_coordinates() {
        // points on a line; features make the far ends of the line nearest
        // neighbors in feature space
        let pts = arr2(&[
            [0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            [0.0; 6],
            [0.0; 6],
        ]);
        let feats = arr2(&[[0.0, 7.0, 9.0, 11.0, 13.0, 0.1]]);
        let mut params: ParamSet<f64> = ParamSet::new(11);
        let mut g = Graph::new(&mut params, false);
        let pv = g.input(pts.clone());
        let fv = g.input(feats);
        let cfg = HsConfig {
            k_neighbors: 2,
            out_channels: 4,
        };
        let (_, _, _, info_feat) =
            hs_layer(&mut g, "hs_f", pv, Some(fv), cfg, MlpOpts::default()).unwrap();
        let (_, _, _, info_eucl) =
            hs_layer(&mut g, "hs_e", pv, None, cfg, MlpOpts::default()).unwrap();
        assert!(info_feat.feature_space);
        assert!(!info_eucl.feature_space);
        // point 0 in feature space: nearest two are {5, 1}, ORL keeps {5};
        // in Euclidean space nearest two are {1, 2}, ORL keeps {1}
        assert_eq!(info_feat.neighbors[0], vec![5]);
        assert_eq!(info_eucl.neighbors[0], vec![1]);
        assert_ne!(info_feat.neighbors, info_eucl.neighbors);
    }

    #[test]
    fn hs_grad_check() {
        let mut rng_ = rng(12);
        for trial in 0..3u64 {
            let x = randn(&mut rng_, 3, 8);
            let params: ParamSet<f64> = ParamSet::new(20 + trial);
            grad_check(
                params,
                move |g| {
                    let xv = g.input(x.clone());
                    let cfg = HsConfig {
                        k_neighbors: 3,
                        out_channels: 4,
                    };
                    let (out, _, _, _) =
                        hs_layer(g, "hs", xv, None, cfg, MlpOpts::default()).unwrap();
                    g.tape.mean_all(out)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn matrix_net_point_shape_and_identity_at_init() {
        let mut params: ParamSet<f64> = ParamSet::new(13);
        let mut g = Graph::new(&mut params, false);
        let pts = g.input(randn(&mut rng(13), 3, 12));
        let lat = matrix_net(&mut g, "mn1", pts, 9, false, 4, 3).unwrap();
        let Lat::Point(m) = lat else {
            panic!("expected a point transform")
        };
        assert_eq!(g.tape.shape(m), (3, 3));
        let frob = (g.tape.value(m) - &identity_array::<f64>(3))
            .mapv(|v| v * v)
            .sum()
            .sqrt();
        assert!(frob < 0.1, "Frobenius distance from identity {frob}");
        assert_abs_diff_eq!(frob, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn matrix_net_feature_pair_shapes() {
        let fw = 4;
        let mut params: ParamSet<f64> = ParamSet::new(14);
        let mut g = Graph::new(&mut params, false);
        let pts = g.input(randn(&mut rng(14), 3, 10));
        let lat = matrix_net(&mut g, "mn2", pts, 2 * fw * fw, true, fw, 3).unwrap();
        let Lat::Feature { m_r, m_ts } = lat else {
            panic!("expected a feature transform pair")
        };
        assert_eq!(g.tape.shape(m_r), (fw, fw));
        assert_eq!(g.tape.shape(m_ts), (fw, fw));
        for m in [m_r, m_ts] {
            let frob = (g.tape.value(m) - &identity_array::<f64>(fw))
                .mapv(|v| v * v)
                .sum()
                .sqrt();
            assert!(frob < 0.1);
        }
    }

    #[test]
    fn matrix_net_rejects_other_widths() {
        let mut params: ParamSet<f64> = ParamSet::new(15);
        let mut g = Graph::new(&mut params, false);
        let pts = g.input(randn(&mut rng(15), 3, 8));
        assert!(matches!(
            matrix_net(&mut g, "mn", pts, 12, false, 4, 3),
            Err(BlockError::Config(_))
        ));
    }

    #[test]
    fn matrix_net_permutation_invariant() {
        let n = 9;
        let x = randn(&mut rng(16), 3, n);
        let perm: Vec<usize> = vec![5, 2, 8, 0, 7, 1, 4, 6, 3];
        let mut params: ParamSet<f64> = ParamSet::new(16);
        let run = |params: &mut ParamSet<f64>, input: &Array2<f64>| {
            let mut g = Graph::new(params, false);
            let pv = g.input(input.clone());
            let lat = matrix_net(&mut g, "mn", pv, 9, true, 4, 3).unwrap();
            let Lat::Point(m) = lat else { unreachable!() };
            g.tape.value(m).clone()
        };
        let base = run(&mut params, &x);
        let mut xp = Array2::zeros((3, n));
        for (j, &p) in perm.iter().enumerate() {
            xp.column_mut(j).assign(&x.column(p));
        }
        let permuted = run(&mut params, &xp);
        assert_eq!(base, permuted);
    }

    #[test]
    fn matrix_net_grad_check() {
        let mut rng_ = rng(17);
        let x = randn(&mut rng_, 3, 7);
        // zero-init final layer has zero gradient flow only through the add;
        // bump it so the check exercises the whole tail
        let mut params: ParamSet<f64> = ParamSet::new(30);
        {
            let mut g = Graph::new(&mut params, false);
            let pv = g.input(x.clone());
            let _ = matrix_net(&mut g, "mn", pv, 9, false, 2, 3).unwrap();
        }
        let w = params.get("mn.dense.2.w").unwrap().clone();
        params.set(
            "mn.dense.2.w",
            w + &randn(&mut rng_, 9, 8).mapv(|v| v * 0.05),
        );
        grad_check(
            params,
            move |g| {
                let pv = g.input(x.clone());
                let lat = matrix_net(g, "mn", pv, 9, false, 2, 3).unwrap();
                let Lat::Point(m) = lat else { unreachable!() };
                g.tape.mean_all(m)
            },
            1e-4,
        );
    }

    #[test]
    fn gfe_channel_count_and_global_invariance() {
        let fw = 4;
        let n = 8;
        let x = randn(&mut rng(18), 3, n);
        let f = randn(&mut rng(19), 5, n);
        let mut params: ParamSet<f64> = ParamSet::new(18);
        let run = |params: &mut ParamSet<f64>, pts: &Array2<f64>, feats: &Array2<f64>| {
            let mut g = Graph::new(params, false);
            let pv = g.input(pts.clone());
            let fv = g.input(feats.clone());
            let out = global_feature_extractor(&mut g, "gfe", pv, fv, fw, 3).unwrap();
            g.tape.value(out).clone()
        };
        let y = run(&mut params, &x, &f);
        assert_eq!(y.nrows(), 5 + 16 * fw);
        assert_eq!(y.ncols(), n);
        // permute: the broadcast global rows must be unchanged
        let perm: Vec<usize> = vec![3, 7, 1, 5, 0, 6, 2, 4];
        let mut xp = Array2::zeros((3, n));
        let mut fp = Array2::zeros((5, n));
        for (j, &p) in perm.iter().enumerate() {
            xp.column_mut(j).assign(&x.column(p));
            fp.column_mut(j).assign(&f.column(p));
        }
        let yp = run(&mut params, &xp, &fp);
        for i in 5..y.nrows() {
            for j in 0..n {
                assert_eq!(y[[i, j]], y[[i, 0]], "global rows must be constant");
                assert_eq!(yp[[i, j]], y[[i, j]]);
            }
        }
    }

    #[test]
    fn gfe_grad_check() {
        let mut rng_ = rng(20);
        let x = randn(&mut rng_, 3, 7);
        let f = randn(&mut rng_, 4, 7);
        let params: ParamSet<f64> = ParamSet::new(40);
        grad_check(
            params,
            move |g| {
                let pv = g.input(x.clone());
                let fv = g.input(f.clone());
                let out = global_feature_extractor(g, "gfe", pv, fv, 2, 3).unwrap();
                g.tape.mean_all(out)
            },
            1e-4,
        );
    }

    #[test]
    fn predictor_output_contract() {
        let mut params: ParamSet<f64> = ParamSet::new(21);
        let mut g = Graph::new(&mut params, false);
        let a = g.input(randn(&mut rng(21), 10, 1));
        let b = g.input(randn(&mut rng(22), 10, 1));
        let (va, vb) = pose_error_predictor(&mut g, "pred", a, b, 4).unwrap();
        assert_eq!(g.tape.shape(va), (3, 1));
        assert_eq!(g.tape.shape(vb), (3, 1));
    }

    #[test]
    fn predictor_zero_at_init() {
        let mut params: ParamSet<f64> = ParamSet::new(22);
        let mut g = Graph::new(&mut params, false);
        let a = g.input(Array2::zeros((6, 1)));
        let b = g.input(Array2::zeros((6, 1)));
        let (va, vb) = pose_error_predictor(&mut g, "pred", a, b, 4).unwrap();
        for v in [va, vb] {
            for i in 0..3 {
                assert_eq!(g.tape.value(v)[[i, 0]], 0.0);
            }
        }
        // nonzero input, zero-initialized final layer: still exactly zero
        let mut g2 = Graph::new(&mut params, false);
        let a2 = g2.input(randn(&mut rng(23), 6, 1));
        let b2 = g2.input(randn(&mut rng(24), 6, 1));
        let (va2, vb2) = pose_error_predictor(&mut g2, "pred", a2, b2, 4).unwrap();
        for v in [va2, vb2] {
            for i in 0..3 {
                assert_eq!(g2.tape.value(v)[[i, 0]], 0.0);
            }
        }
    }

    #[test]
    fn predictor_paths_unshared() {
        let mut params: ParamSet<f64> = ParamSet::new(23);
        let mut g = Graph::new(&mut params, false);
        let a = g.input(randn(&mut rng(25), 6, 1));
        let b = g.input(randn(&mut rng(26), 6, 1));
        let _ = pose_error_predictor(&mut g, "pred", a, b, 4).unwrap();
        assert!(params.get("pred.path_a.0.w").is_some());
        assert!(params.get("pred.path_b.0.w").is_some());
        assert_ne!(
            params.get("pred.path_a.0.w").unwrap(),
            params.get("pred.path_b.0.w").unwrap()
        );
    }

    #[test]
    fn predictor_grad_check() {
        let mut rng_ = rng(27);
        for trial in 0..2u64 {
            let a = randn(&mut rng_, 8, 1);
            let b = randn(&mut rng_, 8, 1);
            // perturb the zero-initialized final layers so gradients flow
            let mut params: ParamSet<f64> = ParamSet::new(50 + trial);
            {
                let mut g = Graph::new(&mut params, false);
                let av = g.input(a.clone());
                let bv = g.input(b.clone());
                let _ = pose_error_predictor(&mut g, "pred", av, bv, 2).unwrap();
            }
            for path in ["path_a", "path_b"] {
                let name = format!("pred.{path}.2.w");
                let w = params.get(&name).unwrap().clone();
                params.set(&name, w + &randn(&mut rng_, 3, 1).mapv(|v| v * 0.1));
            }
            let (a2, b2) = (a.clone(), b.clone());
            grad_check(
                params,
                move |g| {
                    let av = g.input(a2.clone());
                    let bv = g.input(b2.clone());
                    let (va, vb) = pose_error_predictor(g, "pred", av, bv, 2).unwrap();
                    let s = g.tape.add(va, vb).unwrap();
                    let sq = g.tape.mul(s, s).unwrap();
                    g.tape.mean_all(sq)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn normalization_statistics_logged_and_updated() {
        let mut params: ParamSet<f64> = ParamSet::new(24);
        let x = randn(&mut rng(28), 4, 20).mapv(|v| v * 3.0 + 1.0);
        let log = {
            let mut g = Graph::new(&mut params, true);
            let xv = g.input(x.clone());
            let _ = normalize(&mut g, "norm", xv).unwrap();
            assert_eq!(g.norm_log.len(), 1);
            g.norm_log.clone()
        };
        let before = params.get("norm.running_mean").unwrap().clone();
        assert_eq!(before, Array2::<f64>::zeros((4, 1)));
        update_running_stats(&mut params, &log);
        let after = params.get("norm.running_mean").unwrap().clone();
        // momentum 0.9: new = 0.9*0 + 0.1*batch_mean
        for i in 0..4 {
            let batch_mean = x.row(i).sum() / 20.0;
            assert_abs_diff_eq!(after[[i, 0]], 0.1 * batch_mean, epsilon = 1e-12);
        }
        // eval mode logs nothing
        let mut g = Graph::new(&mut params, false);
        let xv = g.input(x);
        let _ = normalize(&mut g, "norm", xv).unwrap();
        assert!(g.norm_log.is_empty());
    }

    #[test]
    fn shared_binding_returns_same_var() {
        let mut params: ParamSet<f64> = ParamSet::new(25);
        let mut g = Graph::new(&mut params, false);
        let a = g.param("shared.w", (3, 3), Init::Kaiming).unwrap();
        let b = g.param("shared.w", (3, 3), Init::Kaiming).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            g.param("shared.w", (2, 3), Init::Kaiming),
            Err(BlockError::ParamShape { .. })
        ));
    }

    #[test]
    fn init_deterministic_and_order_independent() {
        let mut p1: ParamSet<f64> = ParamSet::new(77);
        let mut p2: ParamSet<f64> = ParamSet::new(77);
        p1.get_or_create("a.w", (4, 3), Init::Kaiming).unwrap();
        p1.get_or_create("b.w", (2, 2), Init::Kaiming).unwrap();
        p2.get_or_create("b.w", (2, 2), Init::Kaiming).unwrap();
        p2.get_or_create("a.w", (4, 3), Init::Kaiming).unwrap();
        assert_eq!(p1.get("a.w"), p2.get("a.w"));
        assert_eq!(p1.get("b.w"), p2.get("b.w"));
        let mut p3: ParamSet<f64> = ParamSet::new(78);
        p3.get_or_create("a.w", (4, 3), Init::Kaiming).unwrap();
        assert_ne!(p1.get("a.w"), p3.get("a.w"));
    }
}
