//! Pose algebra and metric primitives: focalization, rotation construction,
//! pose composition, perturbation sampling, symmetry-aware rotation error and
//! oriented-box IoU.
//!
//! Everything here is a pure function of its inputs (plus an explicit seeded
//! generator where randomness is involved), so callers may share these across
//! worker threads freely.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use thiserror::Error;

/// Orthonormality / determinant tolerance for rotation matrices.
pub const ROTATION_TOL: f64 = 1e-6;
/// Floor applied to box sizes when composing pose updates (meters).
pub const SIZE_FLOOR: f64 = 1e-4;
/// Minimum angle between the two predicted axes (radians).
pub const AXES_MIN_ANGLE: f64 = 1e-3;

const IOU_SAMPLES: usize = 200_000;
const IOU_SEED: u64 = 0x6765_6f72_6566_494f;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite coordinate at point {index}")]
    NonFiniteInput { index: usize },
    #[error("matrix is not a valid rotation: {reason}")]
    InvalidRotation { reason: String },
    #[error("box size must be positive, got {size:?}")]
    InvalidSize { size: [f64; 3] },
    #[error("degenerate axes for rotation construction: {reason}")]
    DegenerateAxes { reason: String },
    #[error("symmetry axis must have nonzero norm")]
    DegenerateAxis,
}

/// An object pose-and-size estimate: rotation, translation (m) and the
/// per-axis extents of the oriented bounding box (m).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseState {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub size: Vector3<f64>,
}

impl PoseState {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        size: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        validate_rotation(&rotation)?;
        if !(size.iter().all(|v| v.is_finite() && *v > 0.0)) {
            return Err(GeometryError::InvalidSize {
                size: [size.x, size.y, size.z],
            });
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFiniteInput { index: 0 });
        }
        Ok(Self {
            rotation,
            translation,
            size,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            size: Vector3::new(1.0, 1.0, 1.0),
        }
    }
}

/// Wire form of [`PoseState`]: rotation row-major. Deserialization goes
/// through [`PoseState::new`], so invalid poses are rejected on load.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseStateWire {
    rotation: [f64; 9],
    translation: [f64; 3],
    size: [f64; 3],
}

impl serde::Serialize for PoseState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[3 * r + c] = self.rotation[(r, c)];
            }
        }
        PoseStateWire {
            rotation,
            translation: [self.translation.x, self.translation.y, self.translation.z],
            size: [self.size.x, self.size.y, self.size.z],
        }
        .serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for PoseState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = PoseStateWire::deserialize(d)?;
        PoseState::new(
            Matrix3::from_row_slice(&w.rotation),
            Vector3::from_row_slice(&w.translation),
            Vector3::from_row_slice(&w.size),
        )
        .map_err(serde::de::Error::custom)
    }
}

/// A multiplicative rotation correction plus additive translation / size
/// corrections. `size` is in meters except for the output of
/// [`sample_pose_perturbation`], where it holds per-axis fractions that the
/// caller applies to a reference size (see that function).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseError {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub size: Vector3<f64>,
}

impl PoseError {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        size: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        validate_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
            size,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            size: Vector3::zeros(),
        }
    }

    /// Geodesic angle of the rotation part, in degrees.
    pub fn rotation_angle_deg(&self) -> f64 {
        rotation_error_deg(
            &Matrix3::identity(),
            &self.rotation,
            &SymmetrySpec::None,
        )
    }
}

/// N x 3 set of 3-D points, meters. Always non-empty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Array2<f64>,
}

impl PointCloud {
    pub fn new(points: Array2<f64>) -> Result<Self, GeometryError> {
        if points.nrows() == 0 {
            return Err(GeometryError::EmptyCloud);
        }
        assert_eq!(points.ncols(), 3, "point cloud must be N x 3");
        for (i, row) in points.rows().into_iter().enumerate() {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(GeometryError::NonFiniteInput { index: i });
            }
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self, GeometryError> {
        let mut arr = Array2::zeros((rows.len(), 3));
        for (i, r) in rows.iter().enumerate() {
            arr[[i, 0]] = r[0];
            arr[[i, 1]] = r[1];
            arr[[i, 2]] = r[2];
        }
        Self::new(arr)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.points[[i, 0]], self.points[[i, 1]], self.points[[i, 2]])
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for i in 0..self.len() {
            c += self.point(i);
        }
        c / self.len() as f64
    }

    /// Axis-aligned bounding-box diagonal length.
    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    pub fn bbox(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = self.point(0);
        let mut hi = self.point(0);
        for i in 1..self.len() {
            let p = self.point(i);
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Apply `p -> m * p + shift` to every point.
    pub fn affine_map(&self, m: &Matrix3<f64>, shift: &Vector3<f64>) -> Self {
        let mut out = Array2::zeros((self.len(), 3));
        for i in 0..self.len() {
            let p = m * self.point(i) + shift;
            out[[i, 0]] = p.x;
            out[[i, 1]] = p.y;
            out[[i, 2]] = p.z;
        }
        Self { points: out }
    }
}

/// Object symmetry convention used by metrics and losses. Axial symmetry
/// means rotations about `axis` (object frame) are observationally
/// equivalent.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SymmetrySpec {
    None,
    Axial { axis: [f64; 3] },
}

impl SymmetrySpec {
    pub fn axial(axis: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = axis.norm();
        if n < 1e-12 {
            return Err(GeometryError::DegenerateAxis);
        }
        let u = axis / n;
        Ok(Self::Axial {
            axis: [u.x, u.y, u.z],
        })
    }

    /// Axial symmetry about the object-frame y axis (the convention used by
    /// the bottle / can / bowl style categories).
    pub fn axial_y() -> Self {
        Self::Axial {
            axis: [0.0, 1.0, 0.0],
        }
    }

    pub fn axis(&self) -> Option<Vector3<f64>> {
        match self {
            Self::None => None,
            Self::Axial { axis } => Some(Vector3::new(axis[0], axis[1], axis[2])),
        }
    }

    pub fn is_axial(&self) -> bool {
        matches!(self, Self::Axial { .. })
    }
}

/// Check orthonormality and unit determinant within [`ROTATION_TOL`].
pub fn validate_rotation(m: &Matrix3<f64>) -> Result<(), GeometryError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::InvalidRotation {
            reason: "non-finite entries".into(),
        });
    }
    let gram = m.transpose() * m;
    let dev = (gram - Matrix3::identity()).abs().max();
    if dev > ROTATION_TOL {
        return Err(GeometryError::InvalidRotation {
            reason: format!("R^T R deviates from identity by {dev:.3e}"),
        });
    }
    let det = m.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(GeometryError::InvalidRotation {
            reason: format!("det(R) = {det:.9} != +1"),
        });
    }
    Ok(())
}

/// Re-center the observed cloud by -t0 and pose the prior by diag(s0) * R0
/// so that the residual misalignment between the two encodes the pose error.
pub fn focalize(
    observed: &PointCloud,
    prior: &PointCloud,
    init: &PoseState,
) -> Result<(PointCloud, PointCloud), GeometryError> {
    let obs = observed.affine_map(&Matrix3::identity(), &(-init.translation));
    let scale = Matrix3::from_diagonal(&init.size);
    let posed = prior.affine_map(&(scale * init.rotation), &Vector3::zeros());
    for (cloud, _) in [(&obs, "observed"), (&posed, "prior")] {
        for (i, row) in cloud.points.rows().into_iter().enumerate() {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(GeometryError::NonFiniteInput { index: i });
            }
        }
    }
    Ok((obs, posed))
}

/// Gram-Schmidt a rotation matrix out of two predicted axes: the first axis
/// is normalized, the second is orthogonalized against it, the third is their
/// cross product. Columns of the result are [x_hat, y_hat, z_hat].
pub fn rotation_from_axes(
    rx: &Vector3<f64>,
    ry: &Vector3<f64>,
) -> Result<Matrix3<f64>, GeometryError> {
    let nx = rx.norm();
    if nx < 1e-12 {
        return Err(GeometryError::DegenerateAxes {
            reason: "first axis has near-zero norm".into(),
        });
    }
    let ny = ry.norm();
    if ny < 1e-12 {
        return Err(GeometryError::DegenerateAxes {
            reason: "second axis has near-zero norm".into(),
        });
    }
    let x_hat = rx / nx;
    let w = ry - (ry.dot(&x_hat)) * x_hat;
    // sin of the angle between rx and ry
    let sin_angle = w.norm() / ny;
    if sin_angle < AXES_MIN_ANGLE.sin() {
        return Err(GeometryError::DegenerateAxes {
            reason: format!("axes nearly collinear (sin angle = {sin_angle:.3e})"),
        });
    }
    let y_hat = w / w.norm();
    let z_hat = x_hat.cross(&y_hat);
    Ok(Matrix3::from_columns(&[x_hat, y_hat, z_hat]))
}

/// Apply a predicted error to an estimate: R <- dR * R0, t <- t0 + dt,
/// s <- s0 + ds with the size clamped at [`SIZE_FLOOR`].
pub fn compose_update(init: &PoseState, err: &PoseError) -> Result<PoseState, GeometryError> {
    let rotation = err.rotation * init.rotation;
    let translation = init.translation + err.translation;
    let mut size = init.size + err.size;
    for k in 0..3 {
        if !size[k].is_finite() {
            return Err(GeometryError::InvalidSize {
                size: [size.x, size.y, size.z],
            });
        }
        size[k] = size[k].max(SIZE_FLOOR);
    }
    debug_assert!(validate_rotation(&rotation).is_ok());
    Ok(PoseState {
        rotation,
        translation,
        size,
    })
}

/// The error that maps `init` onto `gt` under [`compose_update`]:
/// dR = R_gt * R0^T, dt = t_gt - t0, ds = s_gt - s0.
pub fn error_between(gt: &PoseState, init: &PoseState) -> PoseError {
    PoseError {
        rotation: gt.rotation * init.rotation.transpose(),
        translation: gt.translation - init.translation,
        size: gt.size - init.size,
    }
}

/// Rotation discrepancy in degrees. Without symmetry this is the geodesic
/// angle; for axial symmetry it is the angle between the two rotated
/// symmetry axes, so spin about the axis is ignored. Range [0, 180].
pub fn rotation_error_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>, sym: &SymmetrySpec) -> f64 {
    match sym.axis() {
        None => {
            let cos = ((ra.transpose() * rb).trace() - 1.0) / 2.0;
            cos.clamp(-1.0, 1.0).acos().to_degrees()
        }
        Some(axis) => {
            let ua = ra * axis;
            let ub = rb * axis;
            let cos = ua.dot(&ub) / (ua.norm() * ub.norm());
            cos.clamp(-1.0, 1.0).acos().to_degrees()
        }
    }
}

fn box_world_aabb(pose: &PoseState) -> (Vector3<f64>, Vector3<f64>) {
    let half = pose.size / 2.0;
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for ix in [-1.0, 1.0] {
        for iy in [-1.0, 1.0] {
            for iz in [-1.0, 1.0] {
                let corner = pose.rotation
                    * Vector3::new(ix * half.x, iy * half.y, iz * half.z)
                    + pose.translation;
                for k in 0..3 {
                    lo[k] = lo[k].min(corner[k]);
                    hi[k] = hi[k].max(corner[k]);
                }
            }
        }
    }
    (lo, hi)
}

fn point_in_box(p: &Vector3<f64>, pose: &PoseState) -> bool {
    let local = pose.rotation.transpose() * (p - pose.translation);
    local.x.abs() <= pose.size.x / 2.0
        && local.y.abs() <= pose.size.y / 2.0
        && local.z.abs() <= pose.size.z / 2.0
}

/// Intersection-over-union of two oriented boxes, estimated by deterministic
/// Monte-Carlo sampling over the union's axis-aligned bounding box. The
/// internal seed is fixed, so this is a pure function of the two poses and is
/// exactly symmetric in its arguments.
pub fn iou3d(a: &PoseState, b: &PoseState) -> f64 {
    iou3d_sampled(a, b, IOU_SAMPLES, IOU_SEED)
}

/// Monte-Carlo IoU with caller-chosen sample count and seed; `iou3d` is this
/// with fixed defaults, and tests use an independent seed as the oracle.
pub fn iou3d_sampled(a: &PoseState, b: &PoseState, samples: usize, seed: u64) -> f64 {
    let (lo_a, hi_a) = box_world_aabb(a);
    let (lo_b, hi_b) = box_world_aabb(b);
    let lo = lo_a.zip_map(&lo_b, f64::min);
    let hi = hi_a.zip_map(&hi_b, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits_union = 0u64;
    let mut hits_both = 0u64;
    for _ in 0..samples {
        let p = Vector3::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.y..=hi.y),
            rng.random_range(lo.z..=hi.z),
        );
        let ia = point_in_box(&p, a);
        let ib = point_in_box(&p, b);
        if ia || ib {
            hits_union += 1;
        }
        if ia && ib {
            hits_both += 1;
        }
    }
    if hits_union == 0 {
        return 0.0;
    }
    hits_both as f64 / hits_union as f64
}

/// Magnitude limits for pose perturbations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbLimits {
    /// Maximum rotation angle, degrees.
    pub rot_deg: f64,
    /// Per-component translation bound, meters.
    pub trans_m: f64,
    /// Per-component size bound as a fraction of the reference size.
    pub scale_frac: f64,
}

impl PerturbLimits {
    pub fn zero() -> Self {
        Self {
            rot_deg: 0.0,
            trans_m: 0.0,
            scale_frac: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.rot_deg == 0.0 && self.trans_m == 0.0 && self.scale_frac == 0.0
    }
}

impl Default for PerturbLimits {
    fn default() -> Self {
        Self {
            rot_deg: 20.0,
            trans_m: 0.05,
            scale_frac: 0.2,
        }
    }
}

/// Draw a random pose perturbation: rotation about a uniform random axis by
/// an angle ~ U(0, rot_deg), translation ~ U(-trans_m, trans_m)^3, and a size
/// FRACTION ~ U(-scale_frac, scale_frac)^3 stored in the `size` field. The
/// caller multiplies the fraction by a reference size; see
/// [`perturbed_initial`].
pub fn sample_pose_perturbation<R: Rng>(rng: &mut R, limits: &PerturbLimits) -> PoseError {
    let rotation = if limits.rot_deg > 0.0 {
        let axis: [f64; 3] = UnitSphere.sample(rng);
        let angle = rng.random_range(0.0..=limits.rot_deg).to_radians();
        nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(axis[0], axis[1], axis[2])),
            angle,
        )
        .into_inner()
    } else {
        Matrix3::identity()
    };
    let u = |rng: &mut R, m: f64| {
        if m > 0.0 {
            rng.random_range(-m..=m)
        } else {
            0.0
        }
    };
    let translation = Vector3::new(
        u(rng, limits.trans_m),
        u(rng, limits.trans_m),
        u(rng, limits.trans_m),
    );
    let size = Vector3::new(
        u(rng, limits.scale_frac),
        u(rng, limits.scale_frac),
        u(rng, limits.scale_frac),
    );
    PoseError {
        rotation,
        translation,
        size,
    }
}

/// Build an initial estimate from a ground-truth pose and a sampled
/// perturbation such that `error_between(gt, init)` equals the perturbation
/// exactly (with the size fraction resolved against `gt.size`).
pub fn perturbed_initial(gt: &PoseState, pert: &PoseError) -> PoseState {
    let ds = pert.size.component_mul(&gt.size);
    PoseState {
        rotation: pert.rotation.transpose() * gt.rotation,
        translation: gt.translation - pert.translation,
        size: gt.size - ds,
    }
}

/// Uniform random rotation (Haar measure on SO(3)) via a normalized random
/// quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let w: f64 = StandardNormal.sample(rng);
        let x: f64 = StandardNormal.sample(rng);
        let y: f64 = StandardNormal.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        let q = Quaternion::new(w, x, y, z);
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .into_inner();
        }
    }
}

/// Rotation by `deg` degrees about the z axis, a convenience for tests and
/// fixtures.
pub fn rot_z_deg(deg: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).into_inner()
}

/// Rotation by `deg` degrees about the y axis.
pub fn rot_y_deg(deg: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()).into_inner()
}

/// Rotation by `deg` degrees about the x axis.
pub fn rot_x_deg(deg: f64) -> Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), deg.to_radians()).into_inner()
}

/// Draw a random valid pose: uniform rotation, translation in a 1 m cube,
/// sizes in [0.1, 0.5] m per axis. Used by tests and evaluation fixtures.
pub fn random_pose<R: Rng>(rng: &mut R) -> PoseState {
    PoseState {
        rotation: random_rotation(rng),
        translation: Vector3::new(
            rng.random_range(-0.5..=0.5),
            rng.random_range(-0.5..=0.5),
            rng.random_range(-0.5..=0.5),
        ),
        size: Vector3::new(
            rng.random_range(0.1..=0.5),
            rng.random_range(0.1..=0.5),
            rng.random_range(0.1..=0.5),
        ),
    }
}
