//! The refinement model: focalized observed and prior clouds are encoded by
//! a shared-weight feature extractor, optionally reshaped by learnable
//! affine transforms, cross-mixed, fused into global vectors and decoded
//! into a pose error by zero-initialized prediction heads.

use nalgebra::Vector3;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{focalize, rotation_from_axes, GeometryError, PointCloud, PoseError, PoseState};
use crate::netblocks::{
    global_feature_extractor, graph_conv, hs_layer, linear, matrix_net, pose_error_predictor,
    shared_point_layers, BlockError, Graph, HsConfig, Lat, MlpOpts, ParamSet, LEAKY_SLOPE,
};
use crate::tape::{Scalar, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
}

/// Point feature encoder variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    /// Two-path hybrid-scope stack; the final layer's position path feeds
    /// the translation/size branch and its graph path feeds rotation.
    Georef,
    /// Per-point shared layers only; ignores all affine-transform flags.
    PointnetBaseline,
    /// The hybrid-scope stack by itself (conventionally run with the
    /// affine-transform flags off).
    HsPlain,
    /// Graph-convolution-only stack (no position-preserving path).
    Gc3dPlain,
}

/// How the observed and prior branches exchange information before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Cross-cloud transform: prior-side feature matrices are applied to
    /// the observed feature maps.
    Cct,
    /// Max-pooled prior global vector concatenated per point onto the
    /// observed maps, mixed by per-point layers.
    GlobalConcat,
    /// No cross-cloud mixing before pooling.
    None,
}

/// Model architecture switches and sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: Encoder,
    /// Apply the 3x3 learned transform to input points.
    pub lat_on_points: bool,
    /// Apply learned feature-space transforms to the feature maps.
    pub lat_on_features: bool,
    /// Use a dedicated transform for the rotation branch (otherwise the
    /// translation/size transform is reused).
    pub separate_rotation_lat: bool,
    /// Enable the cross-cloud transform machinery.
    pub cct: bool,
    pub fusion: Fusion,
    /// Feed prior features (and the initial size) into the translation/size
    /// branch; otherwise that branch sees the observed cloud only.
    pub prior_in_ts: bool,
    pub n_points: usize,
    pub feature_width: usize,
    pub k_neighbors: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: Encoder::Georef,
            lat_on_points: true,
            lat_on_features: true,
            separate_rotation_lat: true,
            cct: true,
            fusion: Fusion::Cct,
            prior_in_ts: true,
            n_points: 512,
            feature_width: 64,
            k_neighbors: 10,
        }
    }
}

impl ModelConfig {
    /// Reduced preset sized for single-core experiments.
    pub fn desk() -> Self {
        Self {
            n_points: 128,
            feature_width: 16,
            k_neighbors: 8,
            ..Self::default()
        }
    }

    /// Minimal preset for fast unit tests.
    pub fn tiny() -> Self {
        Self {
            n_points: 16,
            feature_width: 4,
            k_neighbors: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.fusion == Fusion::Cct && !self.cct {
            return Err(ModelError::Config(
                "fusion = cct requires the cct flag".into(),
            ));
        }
        if self.feature_width < 2 {
            return Err(ModelError::Config("feature_width must be at least 2".into()));
        }
        if self.k_neighbors < 2 {
            return Err(ModelError::Config("k_neighbors must be at least 2".into()));
        }
        if self.n_points <= self.k_neighbors {
            return Err(ModelError::Config(format!(
                "n_points = {} must exceed k_neighbors = {}",
                self.n_points, self.k_neighbors
            )));
        }
        Ok(())
    }

    /// True when the feature-transform emitter must run (own-cloud
    /// application or cross-cloud mixing).
    fn needs_feature_mats(&self) -> bool {
        let own = self.lat_on_features && self.encoder != Encoder::PointnetBaseline;
        own || self.fusion == Fusion::Cct
    }
}

/// One named architecture variant of the flag-sweep study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: ModelConfig,
}

/// The full flag-sweep table: a per-point baseline, the full model, encoder
/// swaps, branch and transform toggles, and the pooled-concat fusion
/// alternative. Sizes are inherited from `base`.
pub fn ablation_rows(base: &ModelConfig) -> Vec<AblationRow> {
    let sizes = |cfg: ModelConfig| ModelConfig {
        n_points: base.n_points,
        feature_width: base.feature_width,
        k_neighbors: base.k_neighbors,
        ..cfg
    };
    let off = ModelConfig {
        lat_on_points: false,
        lat_on_features: false,
        separate_rotation_lat: false,
        cct: false,
        fusion: Fusion::None,
        prior_in_ts: false,
        ..ModelConfig::default()
    };
    let full = ModelConfig::default();
    let rows = vec![
        ("A0", ModelConfig { encoder: Encoder::PointnetBaseline, ..off.clone() }),
        ("B0", full.clone()),
        ("C0", ModelConfig { encoder: Encoder::HsPlain, ..off.clone() }),
        ("C1", ModelConfig { encoder: Encoder::Gc3dPlain, ..off.clone() }),
        ("D0", ModelConfig { prior_in_ts: false, ..full.clone() }),
        (
            "E0",
            ModelConfig {
                lat_on_features: false,
                separate_rotation_lat: false,
                cct: false,
                fusion: Fusion::None,
                ..full.clone()
            },
        ),
        (
            "E1",
            ModelConfig {
                lat_on_points: false,
                cct: false,
                fusion: Fusion::None,
                ..full.clone()
            },
        ),
        ("E2", ModelConfig { separate_rotation_lat: false, ..full.clone() }),
        ("E3", ModelConfig { cct: false, fusion: Fusion::None, ..full.clone() }),
        ("F0", ModelConfig { cct: false, fusion: Fusion::GlobalConcat, ..full }),
    ];
    rows.into_iter()
        .map(|(name, cfg)| AblationRow {
            name: name.to_string(),
            config: sizes(cfg),
        })
        .collect()
}

/// Per-branch feature maps and transform handles produced by the encoder.
pub struct Extracted {
    pub pts_o: Var,
    pub pts_p: Var,
    pub f_r_o: Var,
    pub f_ts_o: Var,
    pub f_r_p: Var,
    pub f_ts_p: Var,
    /// Prior-side feature transforms (rotation, translation/size), present
    /// when the cross-cloud transform is enabled.
    pub prior_mats: Option<(Var, Var)>,
}

/// Everything the training loss and diagnostics need from one forward pass.
pub struct ForwardVars {
    /// Predicted rotation axes after adding the canonical basis.
    pub rx: Var,
    pub ry: Var,
    /// On-tape orthonormalized rotation update (columns are axes).
    pub dr: Var,
    pub dt: Var,
    pub ds: Var,
    /// Rotation-branch maps before cross-cloud mixing (observed, prior).
    pub pre_cct_r: Option<(Var, Var)>,
    /// The same maps after mixing.
    pub post_cct_r: Option<(Var, Var)>,
}

fn encode_cloud<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    pts_raw: Var,
) -> Result<(Var, Var, Var, Option<(Var, Var)>), ModelError> {
    let fw = cfg.feature_width;
    let k = cfg.k_neighbors;
    let opts = MlpOpts::default();
    let is_baseline = cfg.encoder == Encoder::PointnetBaseline;

    let pts = if cfg.lat_on_points && !is_baseline {
        let lat = matrix_net(g, "mn1", pts_raw, 9, false, fw, k)?;
        let Lat::Point(m) = lat else {
            return Err(ModelError::Config("point transform has wrong arity".into()));
        };
        g.tape.matmul(m, pts_raw)?
    } else {
        pts_raw
    };

    let (mut f_r, mut f_ts) = match cfg.encoder {
        Encoder::Georef | Encoder::HsPlain => {
            let hs1 = HsConfig { k_neighbors: k, out_channels: fw };
            let (h1, _, _, _) = hs_layer(g, "enc.hs.0", pts, None, hs1, opts)?;
            let hs2 = HsConfig { k_neighbors: k, out_channels: fw };
            let (_, a2, b2, _) = hs_layer(g, "enc.hs.1", pts, Some(h1), hs2, opts)?;
            (b2, a2)
        }
        Encoder::Gc3dPlain => {
            let space0 = g.tape.value(pts).clone();
            let (h1, _) = graph_conv(g, "enc.gc.0", pts, &space0, k, fw, opts)?;
            let space1 = g.tape.value(h1).clone();
            let (h2, _) = graph_conv(g, "enc.gc.1", h1, &space1, k, fw, opts)?;
            (h2, h2)
        }
        Encoder::PointnetBaseline => {
            let f = shared_point_layers(g, "enc.pn", pts, &[fw, 2 * fw, fw], opts)?;
            (f, f)
        }
    };

    let mut mats = None;
    if cfg.needs_feature_mats() {
        let lat = matrix_net(g, "mn2", pts, 2 * fw * fw, true, fw, k)?;
        let Lat::Feature { m_r, m_ts } = lat else {
            return Err(ModelError::Config("feature transform has wrong arity".into()));
        };
        if cfg.lat_on_features && !is_baseline {
            let m_for_r = if cfg.separate_rotation_lat { m_r } else { m_ts };
            f_r = g.tape.matmul(m_for_r, f_r)?;
            f_ts = g.tape.matmul(m_ts, f_ts)?;
        }
        mats = Some((m_r, m_ts));
    }
    Ok((pts, f_r, f_ts, mats))
}

/// Run the shared-weight encoder on both focalized clouds (3xN arrays).
pub fn extract_features<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    observed: &Array2<F>,
    prior: &Array2<F>,
) -> Result<Extracted, ModelError> {
    cfg.validate()?;
    for (name, arr) in [("observed", observed), ("prior", prior)] {
        if arr.nrows() != 3 {
            return Err(ModelError::Config(format!(
                "{name} cloud must be 3xN, got {:?}",
                arr.dim()
            )));
        }
        if arr.ncols() <= cfg.k_neighbors {
            return Err(ModelError::Config(format!(
                "{name} cloud has {} points, need more than k_neighbors = {}",
                arr.ncols(),
                cfg.k_neighbors
            )));
        }
    }
    let pts_o_raw = g.input(observed.clone());
    let pts_p_raw = g.input(prior.clone());
    let (pts_o, f_r_o, f_ts_o, _) = encode_cloud(g, cfg, pts_o_raw)?;
    let (pts_p, f_r_p, f_ts_p, prior_mats) = encode_cloud(g, cfg, pts_p_raw)?;
    Ok(Extracted {
        pts_o,
        pts_p,
        f_r_o,
        f_ts_o,
        f_r_p,
        f_ts_p,
        prior_mats,
    })
}

/// Cross-cloud transform: the prior branch's feature matrices are applied
/// to the observed feature maps; the prior maps pass through unchanged.
pub fn cct_mix<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    ex: &Extracted,
) -> Result<Extracted, ModelError> {
    if !cfg.cct {
        return Err(ModelError::Config(
            "cross-cloud transform requested but the cct flag is off".into(),
        ));
    }
    let Some((m_r_p, m_ts_p)) = ex.prior_mats else {
        return Err(ModelError::Config(
            "prior feature matrices missing; encoder did not emit them".into(),
        ));
    };
    let m_for_r = if cfg.separate_rotation_lat { m_r_p } else { m_ts_p };
    Ok(Extracted {
        pts_o: ex.pts_o,
        pts_p: ex.pts_p,
        f_r_o: g.tape.matmul(m_for_r, ex.f_r_o)?,
        f_ts_o: g.tape.matmul(m_ts_p, ex.f_ts_o)?,
        f_r_p: ex.f_r_p,
        f_ts_p: ex.f_ts_p,
        prior_mats: ex.prior_mats,
    })
}

fn pooled_global<F: Scalar>(
    g: &mut Graph<F>,
    gfe_prefix: &str,
    cfg: &ModelConfig,
    pts: Var,
    feats: Var,
) -> Result<Var, ModelError> {
    let enriched = global_feature_extractor(
        g,
        gfe_prefix,
        pts,
        feats,
        cfg.feature_width,
        cfg.k_neighbors,
    )?;
    Ok(g.tape.max_pool_cols(enriched))
}

/// Pooled-concat mixing for the `global_concat` fusion mode: the prior
/// map's global vector is broadcast onto the observed map and mixed by a
/// per-point layer.
fn global_concat_mix<F: Scalar>(
    g: &mut Graph<F>,
    prefix: &str,
    cfg: &ModelConfig,
    f_o: Var,
    f_p: Var,
) -> Result<Var, ModelError> {
    let (_, n) = g.tape.shape(f_o);
    let pooled = g.tape.max_pool_cols(f_p);
    let ones = g.input(Array2::from_elem((1, n), F::one()));
    let bcast = g.tape.matmul(pooled, ones)?;
    let stacked = g.tape.concat(f_o, bcast, Axis(0))?;
    Ok(shared_point_layers(
        g,
        prefix,
        stacked,
        &[cfg.feature_width],
        MlpOpts::default(),
    )?)
}

/// Build the full forward pass on an existing graph. `s0` is the initial
/// size estimate from the pose being refined.
pub fn build_forward<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    observed: &Array2<F>,
    prior: &Array2<F>,
    s0: &Vector3<f64>,
) -> Result<ForwardVars, ModelError> {
    let ex = extract_features(g, cfg, observed, prior)?;
    let (ex, pre_cct_r, post_cct_r) = match cfg.fusion {
        Fusion::Cct => {
            let pre = (ex.f_r_o, ex.f_r_p);
            let mixed = cct_mix(g, cfg, &ex)?;
            let post = (mixed.f_r_o, mixed.f_r_p);
            (mixed, Some(pre), Some(post))
        }
        Fusion::GlobalConcat => {
            let f_r_o = global_concat_mix(g, "fuse.gc.r", cfg, ex.f_r_o, ex.f_r_p)?;
            let f_ts_o = global_concat_mix(g, "fuse.gc.ts", cfg, ex.f_ts_o, ex.f_ts_p)?;
            (Extracted { f_r_o, f_ts_o, ..ex }, None, None)
        }
        Fusion::None => (ex, None, None),
    };

    let fw = cfg.feature_width;
    let v_r_o = pooled_global(g, "gfe.r", cfg, ex.pts_o, ex.f_r_o)?;
    let v_r_p = pooled_global(g, "gfe.r", cfg, ex.pts_p, ex.f_r_p)?;
    let f_op_r = g.tape.concat(v_r_o, v_r_p, Axis(0))?;

    let v_ts_o = pooled_global(g, "gfe.ts", cfg, ex.pts_o, ex.f_ts_o)?;
    let v_ts = if cfg.prior_in_ts {
        let v_ts_p = pooled_global(g, "gfe.ts", cfg, ex.pts_p, ex.f_ts_p)?;
        g.tape.concat(v_ts_o, v_ts_p, Axis(0))?
    } else {
        v_ts_o
    };
    let s0_arr = Array2::from_shape_fn((3, 1), |(i, _)| F::from_f64(s0[i]));
    let s0_var = g.input(s0_arr);
    let v_ts_s0 = g.tape.concat(v_ts, s0_var, Axis(0))?;
    let f_op_t = {
        let y = linear(g, "fuse.proj_t", v_ts_s0, 4 * fw, false)?;
        g.tape.leaky_relu(y, LEAKY_SLOPE)
    };
    let f_op_s = {
        let y = linear(g, "fuse.proj_s", v_ts_s0, 4 * fw, false)?;
        g.tape.leaky_relu(y, LEAKY_SLOPE)
    };

    let (u_x, u_y) = pose_error_predictor(g, "pred_rot", f_op_r, f_op_r, fw)?;
    let (dt, ds) = pose_error_predictor(g, "pred_ts", f_op_t, f_op_s, fw)?;

    let e_x = g.input(Array2::from_shape_fn((3, 1), |(i, _)| {
        if i == 0 { F::one() } else { F::zero() }
    }));
    let e_y = g.input(Array2::from_shape_fn((3, 1), |(i, _)| {
        if i == 1 { F::one() } else { F::zero() }
    }));
    let rx = g.tape.add(u_x, e_x)?;
    let ry = g.tape.add(u_y, e_y)?;

    // On-tape orthonormalization mirroring the value-level construction:
    // x' = rx/|rx|, y' = normalize(ry - (x'.ry) x'), z' = x' x y'
    let nx = g.tape.norm(rx, 1e-12)?;
    let xh = g.tape.div_scalar_var(rx, nx)?;
    let proj = g.tape.dot(xh, ry)?;
    let along = g.tape.mul_scalar_var(xh, proj)?;
    let w = g.tape.sub(ry, along)?;
    let nw = g.tape.norm(w, 1e-12)?;
    let yh = g.tape.div_scalar_var(w, nw)?;
    let zh = g.tape.cross3(xh, yh)?;
    let xy = g.tape.concat(xh, yh, Axis(1))?;
    let dr = g.tape.concat(xy, zh, Axis(1))?;

    Ok(ForwardVars {
        rx,
        ry,
        dr,
        dt,
        ds,
        pre_cct_r,
        post_cct_r,
    })
}

/// Focalize the inputs and lay them out as 3xN arrays in the compute
/// precision.
pub fn focalized_inputs<F: Scalar>(
    observed: &PointCloud,
    prior: &PointCloud,
    init: &PoseState,
) -> Result<(Array2<F>, Array2<F>), GeometryError> {
    let (obs_f, prior_f) = focalize(observed, prior, init)?;
    let to_cols = |pc: &PointCloud| {
        let pts = pc.points();
        Array2::from_shape_fn((3, pts.nrows()), |(i, j)| F::from_f64(pts[[j, i]]))
    };
    Ok((to_cols(&obs_f), to_cols(&prior_f)))
}

/// Read the predicted pose error out of a built forward pass. The rotation
/// is re-orthonormalized from the predicted axes in f64, so the result is a
/// valid rotation regardless of the compute precision.
pub fn read_pose_error<F: Scalar>(
    g: &Graph<F>,
    out: &ForwardVars,
) -> Result<PoseError, ModelError> {
    let v3 = |v: Var| {
        let a = g.tape.value(v);
        Vector3::new(a[[0, 0]].to_f64(), a[[1, 0]].to_f64(), a[[2, 0]].to_f64())
    };
    let dr = rotation_from_axes(&v3(out.rx), &v3(out.ry))?;
    Ok(PoseError::new(dr, v3(out.dt), v3(out.ds))?)
}

/// One inference pass: focalize, encode, mix, fuse and decode a pose error.
/// Missing parameters are created (deterministically from the store seed),
/// so a fresh store yields the zero-update identity error.
pub fn forward<F: Scalar>(
    cfg: &ModelConfig,
    params: &mut ParamSet<F>,
    observed: &PointCloud,
    prior: &PointCloud,
    init: &PoseState,
) -> Result<PoseError, ModelError> {
    let (obs, pri) = focalized_inputs::<F>(observed, prior, init)?;
    let mut g = Graph::new(params, false);
    let out = build_forward(&mut g, cfg, &obs, &pri, &init.size)?;
    read_pose_error(&g, &out)
}
