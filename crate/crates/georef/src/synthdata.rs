//! Procedural category-level shape library, partial-view record sampling and
//! the on-disk dataset format.
//!
//! Shapes are analytic surfaces (cylinder, tapered cylinder, box, cup with
//! handle) sampled area-uniformly with outward normals. Each instance is
//! normalized to a canonical frame: zero centroid and unit bounding-box
//! diagonal. The whole generation pipeline is a pure function of the
//! configuration and seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    perturbed_initial, random_rotation, sample_pose_perturbation, GeometryError, PerturbLimits,
    PointCloud, PoseState, SymmetrySpec,
};

/// On-disk dataset format identifier.
pub const DATASET_FORMAT: &str = "georef-ds/1";
/// Minimum visible points for a usable partial view.
pub const MIN_VISIBLE: usize = 8;
/// Samples used to freeze an instance's canonical centroid.
const CENTROID_SAMPLES: usize = 16_384;
const CENTROID_SEED: u64 = 0x6361_6e6f_6e69_6331;
const PRIOR_SEED: u64 = 0x6d65_616e_7072_696f;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate view: only {visible} visible points")]
    DegenerateView { visible: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        source: serde_json::Error,
    },
    #[error("unsupported dataset format {found:?}, expected {DATASET_FORMAT:?}")]
    Format { found: String },
    #[error("split {split:?}: truncated record {record}")]
    Truncated { split: String, record: usize },
    #[error("split {split:?}: sidecar lists {sidecar} records, binary holds {binary}")]
    RecordCount {
        split: String,
        sidecar: usize,
        binary: usize,
    },
    #[error("split {split:?}, record {record}: invalid pose: {source}")]
    BadPose {
        split: String,
        record: usize,
        source: GeometryError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Analytic surface family of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseShape {
    Cylinder,
    Box,
    CupWithHandle,
    TaperedCylinder,
}

/// Shape parameters; each family reads the subset it needs. All lengths are
/// pre-normalization and only their ratios matter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeParams {
    pub radius: f64,
    pub height: f64,
    /// Top radius as a fraction of `radius` (tapered cylinder).
    pub taper: f64,
    /// Handle loop radius as a fraction of `height` (cup with handle).
    pub handle: f64,
    /// z extent relative to x extent (box).
    pub aspect: f64,
}

/// Per-parameter inclusive sampling ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    pub radius: [f64; 2],
    pub height: [f64; 2],
    pub taper: [f64; 2],
    pub handle: [f64; 2],
    pub aspect: [f64; 2],
}

impl ParamRanges {
    fn validate(&self) -> Result<(), DataError> {
        for (name, [lo, hi]) in [
            ("radius", self.radius),
            ("height", self.height),
            ("taper", self.taper),
            ("handle", self.handle),
            ("aspect", self.aspect),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo > 0.0) {
                return Err(DataError::Config(format!(
                    "parameter range {name} = [{lo}, {hi}] is empty or non-positive"
                )));
            }
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> ShapeParams {
        let draw = |rng: &mut R, [lo, hi]: [f64; 2]| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        ShapeParams {
            radius: draw(rng, self.radius),
            height: draw(rng, self.height),
            taper: draw(rng, self.taper),
            handle: draw(rng, self.handle),
            aspect: draw(rng, self.aspect),
        }
    }

    fn mean(params: &[ShapeParams]) -> ShapeParams {
        let n = params.len() as f64;
        let mut m = ShapeParams {
            radius: 0.0,
            height: 0.0,
            taper: 0.0,
            handle: 0.0,
            aspect: 0.0,
        };
        for p in params {
            m.radius += p.radius / n;
            m.height += p.height / n;
            m.taper += p.taper / n;
            m.handle += p.handle / n;
            m.aspect += p.aspect / n;
        }
        m
    }
}

/// A category: its surface family, parameter ranges and symmetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub base_shape: BaseShape,
    pub ranges: ParamRanges,
    pub symmetry: SymmetrySpec,
}

/// The categories shipped by default: a mix of rotationally symmetric and
/// asymmetric, simple and complex shapes.
pub fn default_categories() -> Vec<CategorySpec> {
    let base = ParamRanges {
        radius: [0.3, 0.45],
        height: [0.8, 1.2],
        taper: [1.0, 1.0],
        handle: [0.3, 0.3],
        aspect: [1.0, 1.0],
    };
    vec![
        CategorySpec {
            name: "bottle".into(),
            base_shape: BaseShape::TaperedCylinder,
            ranges: ParamRanges {
                radius: [0.25, 0.35],
                height: [0.9, 1.3],
                taper: [0.35, 0.75],
                ..base
            },
            symmetry: SymmetrySpec::axial_y(),
        },
        CategorySpec {
            name: "can".into(),
            base_shape: BaseShape::Cylinder,
            ranges: base,
            symmetry: SymmetrySpec::axial_y(),
        },
        CategorySpec {
            name: "box".into(),
            base_shape: BaseShape::Box,
            ranges: ParamRanges {
                radius: [0.25, 0.4],
                aspect: [1.3, 1.9],
                ..base
            },
            symmetry: SymmetrySpec::None,
        },
        CategorySpec {
            name: "mug".into(),
            base_shape: BaseShape::CupWithHandle,
            ranges: ParamRanges {
                radius: [0.3, 0.4],
                height: [0.7, 1.0],
                handle: [0.25, 0.35],
                ..base
            },
            symmetry: SymmetrySpec::None,
        },
    ]
}

/// One concrete shape with its frozen canonical frame: the raw analytic
/// surface is mapped through `p -> (p - center) / diag` so the canonical
/// cloud is zero-centered with unit bounding-box diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeInstance {
    pub category: String,
    pub base_shape: BaseShape,
    pub symmetry: SymmetrySpec,
    pub params: ShapeParams,
    pub instance_id: String,
    /// Per-axis extents of the canonical bounding box; its norm is 1.
    pub canonical_size: Vector3<f64>,
    center: Vector3<f64>,
    diag: f64,
}

/// A surface point with its outward unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl ShapeInstance {
    pub fn new(
        category: &CategorySpec,
        params: ShapeParams,
        instance_id: String,
    ) -> Result<Self, DataError> {
        if params.radius <= 0.0 || params.height <= 0.0 {
            return Err(DataError::Config(
                "shape parameters must be positive".into(),
            ));
        }
        let shape = RawShape::new(category.base_shape, params)?;
        let (lo, hi) = shape.bbox();
        let diag = (hi - lo).norm();
        let mut rng = ChaCha8Rng::seed_from_u64(CENTROID_SEED);
        let mut center = Vector3::zeros();
        for _ in 0..CENTROID_SAMPLES {
            center += shape.sample(&mut rng).point;
        }
        center /= CENTROID_SAMPLES as f64;
        Ok(Self {
            category: category.name.clone(),
            base_shape: category.base_shape,
            symmetry: category.symmetry.clone(),
            params,
            instance_id,
            canonical_size: (hi - lo) / diag,
            center,
            diag,
        })
    }

    fn shape(&self) -> RawShape {
        // construction validated the parameters, so this cannot fail
        RawShape::new(self.base_shape, self.params).expect("validated shape")
    }

    fn to_canonical(&self, sp: SurfacePoint) -> SurfacePoint {
        SurfacePoint {
            point: (sp.point - self.center) / self.diag,
            normal: sp.normal,
        }
    }

    /// `n` area-uniform canonical surface points with outward normals.
    /// Anchor points at the bounding-box extremes are included when
    /// `anchors` is set, which pins the sampled bounding box to the analytic
    /// one.
    pub fn surface_points<R: Rng>(&self, n: usize, anchors: bool, rng: &mut R) -> Vec<SurfacePoint> {
        let shape = self.shape();
        let mut out = Vec::with_capacity(n);
        if anchors {
            for a in shape.anchors() {
                if out.len() < n {
                    out.push(self.to_canonical(a));
                }
            }
        }
        while out.len() < n {
            out.push(self.to_canonical(shape.sample(rng)));
        }
        out
    }

    /// Canonical point cloud: anchors plus area-uniform samples, re-centered
    /// so the centroid is exactly zero. Re-centering shifts every point
    /// equally, so the unit bounding-box diagonal is preserved.
    pub fn canonical_cloud<R: Rng>(&self, n: usize, rng: &mut R) -> Result<PointCloud, DataError> {
        if n < MIN_VISIBLE {
            return Err(DataError::Config(format!(
                "n = {n} is below the minimum of {MIN_VISIBLE} points"
            )));
        }
        let pts = self.surface_points(n, true, rng);
        let mut arr = Array2::zeros((n, 3));
        let mut centroid = Vector3::zeros();
        for sp in &pts {
            centroid += sp.point;
        }
        centroid /= n as f64;
        for (i, sp) in pts.iter().enumerate() {
            let p = sp.point - centroid;
            arr[[i, 0]] = p.x;
            arr[[i, 1]] = p.y;
            arr[[i, 2]] = p.z;
        }
        Ok(PointCloud::new(arr)?)
    }
}

/// Analytic surface with area-weighted region sampling.
struct RawShape {
    kind: BaseShape,
    p: ShapeParams,
}

impl RawShape {
    fn new(kind: BaseShape, p: ShapeParams) -> Result<Self, DataError> {
        match kind {
            BaseShape::TaperedCylinder if !(p.taper > 0.0 && p.taper <= 1.0) => Err(
                DataError::Config(format!("taper must lie in (0, 1], got {}", p.taper)),
            ),
            BaseShape::CupWithHandle if p.handle * p.height * 1.3 > p.height / 2.0 => Err(
                DataError::Config("handle too large for the body height".into()),
            ),
            _ => Ok(Self { kind, p }),
        }
    }

    fn handle_radii(&self) -> (f64, f64) {
        let loop_r = self.p.handle * self.p.height;
        (loop_r, 0.3 * loop_r)
    }

    fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        let (r, h) = (self.p.radius, self.p.height);
        match self.kind {
            BaseShape::Cylinder | BaseShape::TaperedCylinder => (
                Vector3::new(-r, -h / 2.0, -r),
                Vector3::new(r, h / 2.0, r),
            ),
            BaseShape::Box => {
                let (ex, ey, ez) = (2.0 * r, h, 2.0 * r * self.p.aspect);
                (
                    Vector3::new(-ex / 2.0, -ey / 2.0, -ez / 2.0),
                    Vector3::new(ex / 2.0, ey / 2.0, ez / 2.0),
                )
            }
            BaseShape::CupWithHandle => {
                let (loop_r, tube_r) = self.handle_radii();
                (
                    Vector3::new(-r, -h / 2.0, -r),
                    Vector3::new(r + loop_r + tube_r, h / 2.0, r),
                )
            }
        }
    }

    /// Surface points achieving every bounding-box extreme.
    fn anchors(&self) -> Vec<SurfacePoint> {
        let (r, h) = (self.p.radius, self.p.height);
        let rim = |x: f64, y: f64, z: f64, nx: f64, nz: f64| SurfacePoint {
            point: Vector3::new(x, y, z),
            normal: Vector3::new(nx, 0.0, nz),
        };
        match self.kind {
            BaseShape::Cylinder => vec![
                rim(r, h / 2.0, 0.0, 1.0, 0.0),
                rim(-r, h / 2.0, 0.0, -1.0, 0.0),
                rim(0.0, h / 2.0, r, 0.0, 1.0),
                rim(0.0, h / 2.0, -r, 0.0, -1.0),
                rim(r, -h / 2.0, 0.0, 1.0, 0.0),
                rim(-r, -h / 2.0, 0.0, -1.0, 0.0),
                rim(0.0, -h / 2.0, r, 0.0, 1.0),
                rim(0.0, -h / 2.0, -r, 0.0, -1.0),
            ],
            BaseShape::TaperedCylinder => {
                let rt = r * self.p.taper;
                vec![
                    rim(r, -h / 2.0, 0.0, 1.0, 0.0),
                    rim(-r, -h / 2.0, 0.0, -1.0, 0.0),
                    rim(0.0, -h / 2.0, r, 0.0, 1.0),
                    rim(0.0, -h / 2.0, -r, 0.0, -1.0),
                    rim(rt, h / 2.0, 0.0, 1.0, 0.0),
                    rim(-rt, h / 2.0, 0.0, -1.0, 0.0),
                    rim(0.0, h / 2.0, rt, 0.0, 1.0),
                    rim(0.0, h / 2.0, -rt, 0.0, -1.0),
                ]
            }
            BaseShape::Box => {
                let (hx, hy, hz) = (r, h / 2.0, r * self.p.aspect);
                vec![
                    SurfacePoint {
                        point: Vector3::new(hx, 0.0, 0.0),
                        normal: Vector3::x(),
                    },
                    SurfacePoint {
                        point: Vector3::new(-hx, 0.0, 0.0),
                        normal: -Vector3::x(),
                    },
                    SurfacePoint {
                        point: Vector3::new(0.0, hy, 0.0),
                        normal: Vector3::y(),
                    },
                    SurfacePoint {
                        point: Vector3::new(0.0, -hy, 0.0),
                        normal: -Vector3::y(),
                    },
                    SurfacePoint {
                        point: Vector3::new(0.0, 0.0, hz),
                        normal: Vector3::z(),
                    },
                    SurfacePoint {
                        point: Vector3::new(0.0, 0.0, -hz),
                        normal: -Vector3::z(),
                    },
                ]
            }
            BaseShape::CupWithHandle => {
                let (loop_r, tube_r) = self.handle_radii();
                vec![
                    rim(-r, h / 2.0, 0.0, -1.0, 0.0),
                    rim(-r, -h / 2.0, 0.0, -1.0, 0.0),
                    rim(0.0, h / 2.0, r, 0.0, 1.0),
                    rim(0.0, h / 2.0, -r, 0.0, -1.0),
                    rim(0.0, -h / 2.0, r, 0.0, 1.0),
                    rim(0.0, -h / 2.0, -r, 0.0, -1.0),
                    SurfacePoint {
                        point: Vector3::new(r + loop_r + tube_r, 0.0, 0.0),
                        normal: Vector3::x(),
                    },
                ]
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> SurfacePoint {
        match self.kind {
            BaseShape::Cylinder => self.sample_frustum(rng, self.p.radius, self.p.radius),
            BaseShape::TaperedCylinder => {
                self.sample_frustum(rng, self.p.radius, self.p.radius * self.p.taper)
            }
            BaseShape::Box => self.sample_box(rng),
            BaseShape::CupWithHandle => {
                let (loop_r, tube_r) = self.handle_radii();
                let (r, h) = (self.p.radius, self.p.height);
                let body = 2.0 * std::f64::consts::PI * r * h
                    + 2.0 * std::f64::consts::PI * r * r;
                let handle = 2.0 * std::f64::consts::PI.powi(2) * loop_r * tube_r;
                if rng.random_range(0.0..body + handle) < body {
                    self.sample_frustum(rng, r, r)
                } else {
                    self.sample_handle(rng, loop_r, tube_r)
                }
            }
        }
    }

    /// Area-uniform point on a frustum with caps; a cylinder is rb == rt.
    fn sample_frustum<R: Rng>(&self, rng: &mut R, rb: f64, rt: f64) -> SurfacePoint {
        use std::f64::consts::PI;
        let h = self.p.height;
        let slant = (h * h + (rb - rt) * (rb - rt)).sqrt();
        let side = PI * (rb + rt) * slant;
        let top = PI * rt * rt;
        let bottom = PI * rb * rb;
        let theta = rng.random_range(0.0..2.0 * PI);
        let pick = rng.random_range(0.0..side + top + bottom);
        if pick < side {
            // height fraction with density proportional to the local radius
            let u: f64 = rng.random_range(0.0..1.0);
            let a = rb;
            let b = (rt - rb) / 2.0;
            let frac = if b.abs() < 1e-12 {
                u
            } else {
                (-a + (a * a + 4.0 * b * (a + b) * u).sqrt()) / (2.0 * b)
            };
            let y = -h / 2.0 + frac * h;
            let rho = rb + (rt - rb) * frac;
            let drho = (rt - rb) / h;
            let normal = Vector3::new(theta.cos(), -drho, theta.sin()).normalize();
            SurfacePoint {
                point: Vector3::new(rho * theta.cos(), y, rho * theta.sin()),
                normal,
            }
        } else {
            let (cap_r, y, ny) = if pick < side + top {
                (rt, h / 2.0, 1.0)
            } else {
                (rb, -h / 2.0, -1.0)
            };
            let rho = cap_r * rng.random_range(0.0f64..=1.0).sqrt();
            SurfacePoint {
                point: Vector3::new(rho * theta.cos(), y, rho * theta.sin()),
                normal: Vector3::new(0.0, ny, 0.0),
            }
        }
    }

    fn sample_box<R: Rng>(&self, rng: &mut R) -> SurfacePoint {
        let (hx, hy, hz) = (
            self.p.radius,
            self.p.height / 2.0,
            self.p.radius * self.p.aspect,
        );
        let areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy];
        let total: f64 = areas.iter().sum::<f64>();
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                face = i;
                break;
            }
            pick -= a;
        }
        let u = rng.random_range(-1.0..=1.0);
        let v = rng.random_range(-1.0..=1.0);
        let (point, normal) = match face {
            0 => (Vector3::new(hx, u * hy, v * hz), Vector3::x()),
            1 => (Vector3::new(-hx, u * hy, v * hz), -Vector3::x()),
            2 => (Vector3::new(u * hx, hy, v * hz), Vector3::y()),
            3 => (Vector3::new(u * hx, -hy, v * hz), -Vector3::y()),
            4 => (Vector3::new(u * hx, v * hy, hz), Vector3::z()),
            _ => (Vector3::new(u * hx, v * hy, -hz), -Vector3::z()),
        };
        SurfacePoint { point, normal }
    }

    /// Half-torus handle in the x-y plane, bulging toward +x from the body
    /// side at x = radius.
    fn sample_handle<R: Rng>(&self, rng: &mut R, loop_r: f64, tube_r: f64) -> SurfacePoint {
        use std::f64::consts::PI;
        let phi = rng.random_range(-PI / 2.0..=PI / 2.0);
        // tube angle with torus area weighting via rejection
        let psi = loop {
            let cand = rng.random_range(0.0..2.0 * PI);
            let accept = (loop_r + tube_r * cand.cos()) / (loop_r + tube_r);
            if rng.random_range(0.0..1.0) < accept {
                break cand;
            }
        };
        let center = Vector3::new(self.p.radius + loop_r * phi.cos(), loop_r * phi.sin(), 0.0);
        let e_r = Vector3::new(phi.cos(), phi.sin(), 0.0);
        let normal = psi.cos() * e_r + psi.sin() * Vector3::z();
        SurfacePoint {
            point: center + tube_r * normal,
            normal,
        }
    }
}

/// Draw `n_instances` shapes with parameters uniform over the category's
/// ranges. Deterministic in the generator state.
pub fn build_category_library<R: Rng>(
    spec: &CategorySpec,
    n_instances: usize,
    rng: &mut R,
) -> Result<Vec<ShapeInstance>, DataError> {
    if n_instances == 0 {
        return Err(DataError::Config("n_instances must be at least 1".into()));
    }
    spec.ranges.validate()?;
    (0..n_instances)
        .map(|i| {
            let params = spec.ranges.sample(rng);
            ShapeInstance::new(spec, params, format!("{}-{i:03}", spec.name))
        })
        .collect()
}

/// The category prior: the shape at the per-parameter arithmetic mean of the
/// library, sampled to `n_points` with a fixed internal seed.
pub fn mean_shape_prior(
    library: &[ShapeInstance],
    n_points: usize,
) -> Result<PointCloud, DataError> {
    let first = library
        .first()
        .ok_or_else(|| DataError::Config("empty shape library".into()))?;
    let params = ParamRanges::mean(&library.iter().map(|s| s.params).collect::<Vec<_>>());
    let spec = CategorySpec {
        name: first.category.clone(),
        base_shape: first.base_shape,
        ranges: ParamRanges {
            radius: [params.radius; 2],
            height: [params.height; 2],
            taper: [params.taper; 2],
            handle: [params.handle; 2],
            aspect: [params.aspect; 2],
        },
        symmetry: first.symmetry.clone(),
    };
    let mean = ShapeInstance::new(&spec, params, format!("{}-mean", first.category))?;
    let mut rng = ChaCha8Rng::seed_from_u64(PRIOR_SEED);
    mean.canonical_cloud(n_points, &mut rng)
}

/// Observation noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Isotropic Gaussian noise in meters, applied after posing.
    pub sigma_m: f64,
    /// Fraction of points dropped before resampling back to the target count.
    pub dropout_frac: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            sigma_m: 0.0,
            dropout_frac: 0.0,
        }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_m: 0.002,
            dropout_frac: 0.1,
        }
    }
}

/// One training or evaluation sample: the observed partial cloud, the
/// category prior, ground-truth and initial poses.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub observed: PointCloud,
    pub prior: PointCloud,
    pub gt: PoseState,
    pub init: PoseState,
    pub category: String,
    pub symmetry: SymmetrySpec,
    pub instance_id: String,
}

/// Generate one record: pose the instance, cull back-facing points for the
/// partial view, add noise and dropout, resample to `n_points`, and perturb
/// the ground truth into the initial estimate.
#[allow(clippy::too_many_arguments)]
pub fn sample_record<R: Rng>(
    instance: &ShapeInstance,
    prior: &PointCloud,
    view_dir: Vector3<f64>,
    n_points: usize,
    noise: &NoiseModel,
    pert_limits: &PerturbLimits,
    rng: &mut R,
) -> Result<SampleRecord, DataError> {
    if !(0.0..1.0).contains(&noise.dropout_frac) {
        return Err(DataError::Config(format!(
            "dropout_frac must lie in [0, 1), got {}",
            noise.dropout_frac
        )));
    }
    let view = view_dir.normalize();

    let gt = PoseState {
        rotation: random_rotation(rng),
        translation: Vector3::new(
            rng.random_range(-0.5..=0.5),
            rng.random_range(-0.5..=0.5),
            rng.random_range(-0.5..=0.5),
        ),
        size: instance.canonical_size * rng.random_range(0.8..=1.2),
    };
    let scale = gt.size.x / instance.canonical_size.x;

    // front-facing cull in world orientation: keep normal . view_dir > 0
    let candidates = instance.surface_points(2 * n_points, false, rng);
    let visible: Vec<Vector3<f64>> = candidates
        .iter()
        .filter(|sp| (gt.rotation * sp.normal).dot(&view) > 0.0)
        .map(|sp| gt.rotation * (scale * sp.point) + gt.translation)
        .collect();
    if visible.len() < MIN_VISIBLE {
        return Err(DataError::DegenerateView {
            visible: visible.len(),
        });
    }

    let noisy: Vec<Vector3<f64>> = visible
        .iter()
        .map(|p| {
            if noise.sigma_m > 0.0 {
                let dx: f64 = StandardNormal.sample(rng);
                let dy: f64 = StandardNormal.sample(rng);
                let dz: f64 = StandardNormal.sample(rng);
                p + noise.sigma_m * Vector3::new(dx, dy, dz)
            } else {
                *p
            }
        })
        .collect();

    let drop = (noise.dropout_frac * noisy.len() as f64).floor() as usize;
    let kept: Vec<Vector3<f64>> = if drop > 0 && noisy.len() > drop {
        let mut keep = rand::seq::index::sample(rng, noisy.len(), noisy.len() - drop).into_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| noisy[i]).collect()
    } else {
        noisy
    };

    let observed = resample_to(&kept, n_points, rng);

    let pert = sample_pose_perturbation(rng, pert_limits);
    let init = perturbed_initial(&gt, &pert);

    Ok(SampleRecord {
        observed: PointCloud::new(observed)?,
        prior: prior.clone(),
        gt,
        init,
        category: instance.category.clone(),
        symmetry: instance.symmetry.clone(),
        instance_id: instance.instance_id.clone(),
    })
}

/// Exactly `n` rows: a random subset when over-full, padded by resampling
/// with replacement when short.
fn resample_to<R: Rng>(points: &[Vector3<f64>], n: usize, rng: &mut R) -> Array2<f64> {
    let mut picked: Vec<Vector3<f64>> = if points.len() >= n {
        let mut idx = rand::seq::index::sample(rng, points.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| points[i]).collect()
    } else {
        let mut all = points.to_vec();
        while all.len() < n {
            all.push(points[rng.random_range(0..points.len())]);
        }
        all
    };
    picked.truncate(n);
    let mut arr = Array2::zeros((n, 3));
    for (i, p) in picked.iter().enumerate() {
        arr[[i, 0]] = p.x;
        arr[[i, 1]] = p.y;
        arr[[i, 2]] = p.z;
    }
    arr
}

/// Full dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub n_points: usize,
    pub instances_per_category: usize,
    /// Records per split, e.g. {"train": 2000, "val": 200, "test": 200}.
    pub split_sizes: BTreeMap<String, usize>,
    pub noise: NoiseModel,
    pub perturb: PerturbLimits,
    pub categories: Vec<CategorySpec>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let mut split_sizes = BTreeMap::new();
        split_sizes.insert("train".to_string(), 512);
        split_sizes.insert("val".to_string(), 64);
        split_sizes.insert("test".to_string(), 64);
        Self {
            seed: 0,
            n_points: 512,
            instances_per_category: 8,
            split_sizes,
            noise: NoiseModel::default(),
            perturb: PerturbLimits::default(),
            categories: default_categories(),
        }
    }
}

/// Seeded generator on an independent stream; the workhorse for every
/// reproducible sampling decision in the crate.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generate every split of a dataset. Pure function of the configuration:
/// each record draws from its own derived generator stream, and degenerate
/// views are redrawn with a fresh view direction.
pub fn generate_dataset(
    config: &GenConfig,
) -> Result<BTreeMap<String, Vec<SampleRecord>>, DataError> {
    if config.categories.is_empty() {
        return Err(DataError::Config("no categories configured".into()));
    }
    if config.n_points < MIN_VISIBLE {
        return Err(DataError::Config(format!(
            "n_points must be at least {MIN_VISIBLE}"
        )));
    }
    let mut libraries = Vec::new();
    let mut priors = Vec::new();
    for (ci, cat) in config.categories.iter().enumerate() {
        let mut rng = stream_rng(config.seed, 0x10_0000 + ci as u64);
        let lib = build_category_library(cat, config.instances_per_category, &mut rng)?;
        priors.push(mean_shape_prior(&lib, config.n_points)?);
        libraries.push(lib);
    }

    let mut splits = BTreeMap::new();
    for (si, (name, count)) in config.split_sizes.iter().enumerate() {
        let mut records = Vec::with_capacity(*count);
        for idx in 0..*count {
            let ci = idx % config.categories.len();
            let inst =
                &libraries[ci][(idx / config.categories.len()) % config.instances_per_category];
            let mut rng = stream_rng(config.seed, ((si as u64 + 1) << 40) | idx as u64);
            let record = loop {
                let dir: [f64; 3] = UnitSphere.sample(&mut rng);
                match sample_record(
                    inst,
                    &priors[ci],
                    Vector3::new(dir[0], dir[1], dir[2]),
                    config.n_points,
                    &config.noise,
                    &config.perturb,
                    &mut rng,
                ) {
                    Ok(r) => break r,
                    Err(DataError::DegenerateView { .. }) => continue,
                    Err(e) => return Err(e),
                }
            };
            records.push(record);
        }
        splits.insert(name.clone(), records);
    }
    Ok(splits)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    format: String,
    n_points: usize,
    splits: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<GenConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    category: String,
    instance_id: String,
    symmetry: SymmetrySpec,
}

const RECORD_POSE_F64: usize = 15; // R row-major (9) + t (3) + s (3)

fn record_f64_len(n_points: usize) -> usize {
    2 * n_points * 3 + 2 * RECORD_POSE_F64
}

fn push_pose(buf: &mut Vec<f64>, pose: &PoseState) {
    for r in 0..3 {
        for c in 0..3 {
            buf.push(pose.rotation[(r, c)]);
        }
    }
    buf.extend(pose.translation.iter());
    buf.extend(pose.size.iter());
}

fn pop_pose(vals: &[f64]) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
    let mut m = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = vals[r * 3 + c];
        }
    }
    (
        m,
        Vector3::new(vals[9], vals[10], vals[11]),
        Vector3::new(vals[12], vals[13], vals[14]),
    )
}

/// Write splits to a dataset directory: `meta.json`, one little-endian
/// float64 binary per split and a JSON sidecar with per-record identity.
pub fn write_splits(
    path: &Path,
    splits: &BTreeMap<String, Vec<SampleRecord>>,
    config: Option<&GenConfig>,
) -> Result<(), DataError> {
    let n_points = splits
        .values()
        .flat_map(|r| r.iter())
        .map(|r| r.observed.len())
        .next()
        .or(config.map(|c| c.n_points))
        .unwrap_or(512);
    for (name, records) in splits {
        for (i, r) in records.iter().enumerate() {
            if r.observed.len() != n_points || r.prior.len() != n_points {
                return Err(DataError::Config(format!(
                    "split {name:?} record {i}: inconsistent point count"
                )));
            }
        }
    }
    fs::create_dir_all(path)?;
    let meta = DatasetMeta {
        format: DATASET_FORMAT.to_string(),
        n_points,
        splits: splits.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        config: config.cloned(),
    };
    let meta_json = serde_json::to_string_pretty(&meta).map_err(|source| DataError::Json {
        context: "meta.json".into(),
        source,
    })?;
    fs::write(path.join("meta.json"), meta_json)?;

    for (name, records) in splits {
        let mut vals: Vec<f64> = Vec::with_capacity(records.len() * record_f64_len(n_points));
        let mut sidecar = Vec::with_capacity(records.len());
        for r in records {
            for row in r.observed.points().rows() {
                vals.extend(row.iter());
            }
            for row in r.prior.points().rows() {
                vals.extend(row.iter());
            }
            push_pose(&mut vals, &r.gt);
            push_pose(&mut vals, &r.init);
            sidecar.push(RecordMeta {
                category: r.category.clone(),
                instance_id: r.instance_id.clone(),
                symmetry: r.symmetry.clone(),
            });
        }
        let mut bytes = Vec::with_capacity(vals.len() * 8);
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path.join(format!("{name}.f64")))?;
        f.write_all(&bytes)?;
        let side_json =
            serde_json::to_string(&sidecar).map_err(|source| DataError::Json {
                context: format!("{name}.json"),
                source,
            })?;
        fs::write(path.join(format!("{name}.json")), side_json)?;
    }
    Ok(())
}

/// Read one split back; the exact inverse of [`write_splits`] for that split.
pub fn read_split(path: &Path, split: &str) -> Result<Vec<SampleRecord>, DataError> {
    let meta = read_meta(path)?;
    let n_points = meta.n_points;
    let expected = *meta
        .splits
        .get(split)
        .ok_or_else(|| DataError::Config(format!("dataset has no split {split:?}")))?;

    let mut bytes = Vec::new();
    fs::File::open(path.join(format!("{split}.f64")))?.read_to_end(&mut bytes)?;
    let rec_bytes = record_f64_len(n_points) * 8;
    if bytes.len() % rec_bytes != 0 {
        return Err(DataError::Truncated {
            split: split.to_string(),
            record: bytes.len() / rec_bytes,
        });
    }
    let n_records = bytes.len() / rec_bytes;
    if n_records != expected {
        return Err(DataError::RecordCount {
            split: split.to_string(),
            sidecar: expected,
            binary: n_records,
        });
    }

    let side_raw = fs::read_to_string(path.join(format!("{split}.json")))?;
    let sidecar: Vec<RecordMeta> =
        serde_json::from_str(&side_raw).map_err(|source| DataError::Json {
            context: format!("{split}.json"),
            source,
        })?;
    if sidecar.len() != n_records {
        return Err(DataError::RecordCount {
            split: split.to_string(),
            sidecar: sidecar.len(),
            binary: n_records,
        });
    }

    let mut records = Vec::with_capacity(n_records);
    for (i, (chunk, side)) in bytes.chunks_exact(rec_bytes).zip(&sidecar).enumerate() {
        let vals: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let cloud = |off: usize| {
            let mut arr = Array2::zeros((n_points, 3));
            for p in 0..n_points {
                for k in 0..3 {
                    arr[[p, k]] = vals[off + p * 3 + k];
                }
            }
            arr
        };
        let pose_at = |off: usize| pop_pose(&vals[off..off + RECORD_POSE_F64]);
        let gt_off = 2 * n_points * 3;
        let (gr, gtv, gs) = pose_at(gt_off);
        let (ir, it, is) = pose_at(gt_off + RECORD_POSE_F64);
        let bad_pose = |source| DataError::BadPose {
            split: split.to_string(),
            record: i,
            source,
        };
        records.push(SampleRecord {
            observed: PointCloud::new(cloud(0))?,
            prior: PointCloud::new(cloud(n_points * 3))?,
            gt: PoseState::new(gr, gtv, gs).map_err(bad_pose)?,
            init: PoseState::new(ir, it, is).map_err(bad_pose)?,
            category: side.category.clone(),
            symmetry: side.symmetry.clone(),
            instance_id: side.instance_id.clone(),
        });
    }
    Ok(records)
}

fn read_meta(path: &Path) -> Result<DatasetMeta, DataError> {
    let raw = fs::read_to_string(path.join("meta.json"))?;
    let meta: DatasetMeta = serde_json::from_str(&raw).map_err(|source| DataError::Json {
        context: "meta.json".into(),
        source,
    })?;
    if meta.format != DATASET_FORMAT {
        return Err(DataError::Format { found: meta.format });
    }
    Ok(meta)
}

/// Names of the splits stored at `path`, sorted.
pub fn list_splits(path: &Path) -> Result<Vec<String>, DataError> {
    Ok(read_meta(path)?.splits.keys().cloned().collect())
}

/// Write records as a single-split dataset.
pub fn write_dataset(records: &[SampleRecord], path: &Path) -> Result<(), DataError> {
    let mut splits = BTreeMap::new();
    splits.insert("all".to_string(), records.to_vec());
    write_splits(path, &splits, None)
}

/// Read every split at `path`, concatenated in sorted split order.
pub fn read_dataset(path: &Path) -> Result<Vec<SampleRecord>, DataError> {
    let mut out = Vec::new();
    for split in list_splits(path)? {
        out.extend(read_split(path, &split)?);
    }
    Ok(out)
}
