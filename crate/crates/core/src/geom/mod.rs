//! Geometric substrate: rigid and similarity transforms, axis-angle
//! rotation parameterization, pinhole projection and point-set alignment.
//!
//! All distances are meters and all image coordinates are pixels unless
//! stated otherwise. Every operation here is a pure function of its
//! inputs; the value types are plain `Copy` data and safe to share
//! across threads.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

mod umeyama;

pub use umeyama::{points_rank_deficient, umeyama_align, umeyama_align_rigid};

/// Scalar type used throughout the crate.
pub type Real = f64;
/// 3D vector / point with [`Real`] components.
pub type Vec3 = Vector3<Real>;
/// 3×3 matrix with [`Real`] entries.
pub type Mat3 = Matrix3<Real>;
/// Rotation tangent vector: axis scaled by angle, in radians.
pub type AxisAngle = Vec3;

/// Minimum camera-frame depth accepted by [`project`], in meters.
pub const MIN_PROJECTION_DEPTH: Real = 1e-6;

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOL: Real = 1e-9;

#[derive(Debug, Error)]
pub enum GeomError {
    /// The point sits at or behind the camera plane; the observation is
    /// invalid and must be discarded by the caller.
    #[error("point behind camera (depth {depth:.3e} m)")]
    PointBehindCamera { depth: Real },
    /// Point-set alignment was requested on a configuration that does
    /// not determine a transform (too few or rank-deficient points).
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Element of SE(3): rotation plus translation, acting as
/// `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a transform from a rotation matrix and translation.
    ///
    /// The rotation must be orthonormal with determinant +1 within
    /// [`ROTATION_TOL`]; this is checked in debug builds.
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        debug_assert!(
            is_rotation(&rotation, 1e-7),
            "rotation matrix is not orthonormal: {rotation}"
        );
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation }
    }

    pub fn from_rotation(rotation: Mat3) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Transform with rotation `exp(xi)` and the given translation.
    pub fn from_axis_angle(xi: &AxisAngle, translation: Vec3) -> Self {
        Self { rotation: rotation_exp(xi), translation }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Composition: `(self ∘ rhs)(p) = self(rhs(p))`.
    pub fn compose(&self, rhs: &Self) -> Self {
        Self {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Left-multiplicative update: rotation becomes `exp(omega)·R`,
    /// translation gains `dt`. This is the tangent-space step used by
    /// all solvers in this crate.
    pub fn retract(&self, dt: &Vec3, omega: &AxisAngle) -> Self {
        Self {
            rotation: rotation_exp(omega) * self.rotation,
            translation: self.translation + dt,
        }
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_matrix_row_major(&self) -> [Real; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    /// Parses a row-major 4×4 homogeneous matrix, validating that the
    /// upper-left block is a proper rotation.
    pub fn from_matrix_row_major(m: &[Real; 16]) -> Result<Self, GeomError> {
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        if !is_rotation(&rotation, 1e-6) {
            return Err(GeomError::DegenerateConfiguration(
                "matrix block is not a rotation".into(),
            ));
        }
        Ok(Self { rotation, translation: Vec3::new(m[3], m[7], m[11]) })
    }

    /// Angle in radians of the relative rotation to `other`.
    pub fn rotation_angle_to(&self, other: &Self) -> Real {
        rotation_log(&(self.rotation.transpose() * other.rotation)).norm()
    }

    /// Euclidean distance between the two translations.
    pub fn translation_distance_to(&self, other: &Self) -> Real {
        (self.translation - other.translation).norm()
    }
}

/// Element of Sim(3): uniform scale, rotation and translation, acting
/// as `p ↦ s R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: Real,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Splits into the rigid part and the scale factor.
    pub fn to_rigid_and_scale(&self) -> (RigidTransform, Real) {
        (RigidTransform::new(self.rotation, self.translation), self.scale)
    }
}

/// Pinhole camera intrinsics, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: Real,
        fy: Real,
        cx: Real,
        cy: Real,
        width: u32,
        height: u32,
    ) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(0.0..(width as Real)).contains(&cx) || !(0.0..(height as Real)).contains(&cy) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Pixel coordinates of a camera-frame point to normalized image
    /// coordinates (x/z, y/z equivalents).
    pub fn normalize(&self, p: &PixelPoint) -> (Real, Real) {
        ((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy)
    }

    /// Serializes as the key/value intrinsics document.
    pub fn to_text(&self) -> String {
        format!(
            "# camera intrinsics v1\nfx = {:?}\nfy = {:?}\ncx = {:?}\ncy = {:?}\nwidth = {}\nheight = {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    /// Parses the key/value intrinsics document written by [`Self::to_text`].
    pub fn from_text(text: &str) -> Result<Self, GeomError> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GeomError::InvalidIntrinsics(format!("expected `key = value`, got `{line}`"))
            })?;
            let value: Real = value.trim().parse().map_err(|_| {
                GeomError::InvalidIntrinsics(format!("bad number in line `{line}`"))
            })?;
            fields.insert(key.trim().to_string(), value);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| GeomError::InvalidIntrinsics(format!("missing field `{k}`")))
        };
        Self::new(
            get("fx")?,
            get("fy")?,
            get("cx")?,
            get("cy")?,
            get("width")? as u32,
            get("height")? as u32,
        )
    }
}

/// A 2D image point in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: Real,
    pub v: Real,
}

impl PixelPoint {
    pub fn new(u: Real, v: Real) -> Self {
        Self { u, v }
    }

    pub fn distance_to(&self, other: &Self) -> Real {
        ((self.u - other.u).powi(2) + (self.v - other.v).powi(2)).sqrt()
    }
}

/// Projects a world point through a camera with pose `t_wc` (camera to
/// world) and pinhole intrinsics `k`.
///
/// Fails with [`GeomError::PointBehindCamera`] when the camera-frame
/// depth is at or below [`MIN_PROJECTION_DEPTH`]; callers must treat
/// that observation as invalid.
pub fn project(
    x_world: &Vec3,
    t_wc: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<PixelPoint, GeomError> {
    let q = t_wc.inverse().transform_point(x_world);
    if q.z <= MIN_PROJECTION_DEPTH {
        return Err(GeomError::PointBehindCamera { depth: q.z });
    }
    Ok(PixelPoint { u: k.fx * q.x / q.z + k.cx, v: k.fy * q.y / q.z + k.cy })
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential: axis-angle vector to rotation matrix.
pub fn rotation_exp(xi: &AxisAngle) -> Mat3 {
    let theta2 = xi.norm_squared();
    let k = skew(xi);
    if theta2 < 1e-16 {
        // Series for sin(t)/t and (1-cos(t))/t^2 near zero.
        let a = 1.0 - theta2 / 6.0;
        let b = 0.5 - theta2 / 24.0;
        return Mat3::identity() + a * k + b * (k * k);
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Mat3::identity() + a * k + b * (k * k)
}

/// Rotation logarithm: proper rotation matrix to axis-angle vector with
/// `|result| <= pi`.
///
/// At exactly pi the representative with non-negative first nonzero
/// axis component is returned, so the branch is deterministic.
pub fn rotation_log(r: &Mat3) -> AxisAngle {
    let vee = Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin_theta = 0.5 * vee.norm();
    let cos_theta = 0.5 * (r.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < 1e-10 {
        return 0.5 * vee;
    }
    if theta < std::f64::consts::PI - 1e-4 {
        return vee * (theta / (2.0 * sin_theta));
    }
    // Near pi the skew part vanishes; recover the axis from the
    // symmetric part R ≈ 2aa^T - I.
    let b = (r + r.transpose()) * 0.5;
    let diag = [b[(0, 0)], b[(1, 1)], b[(2, 2)]];
    let k = (0..3)
        .max_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap())
        .unwrap();
    let akk = ((diag[k] + 1.0) * 0.5).max(0.0).sqrt();
    let mut axis = Vec3::zeros();
    axis[k] = akk;
    for i in 0..3 {
        if i != k {
            axis[i] = b[(i, k)] * 0.5 / akk;
        }
    }
    let axis = axis.normalize();
    // Prefer the sign agreeing with the skew part when it is usable,
    // otherwise pick the canonical branch.
    let axis = if sin_theta > 1e-12 {
        if axis.dot(&vee) < 0.0 {
            -axis
        } else {
            axis
        }
    } else {
        let first_nonzero = axis.iter().find(|c| c.abs() > 1e-12).copied().unwrap_or(1.0);
        if first_nonzero < 0.0 {
            -axis
        } else {
            axis
        }
    };
    axis * theta
}

/// True when `m` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation(m: &Mat3, tol: Real) -> bool {
    let e = (m.transpose() * m - Mat3::identity()).norm();
    e <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Re-projects a nearly orthonormal matrix onto SO(3) via SVD.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        let flipped = -u.column(2);
        u.set_column(2, &flipped);
        r = u * v_t;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let axis = Vec3::new(
            rng.random::<Real>() - 0.5,
            rng.random::<Real>() - 0.5,
            rng.random::<Real>() - 0.5,
        )
        .normalize();
        let angle = rng.random::<Real>() * 3.0;
        rotation_exp(&(axis * angle))
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::new(
            random_rotation(rng),
            Vec3::new(
                rng.random::<Real>() * 2.0 - 1.0,
                rng.random::<Real>() * 2.0 - 1.0,
                rng.random::<Real>() * 2.0 - 1.0,
            ),
        )
    }

    #[test]
    fn project_principal_axis() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let p = project(&Vec3::new(0.0, 0.0, 0.5), &RigidTransform::identity(), &k).unwrap();
        assert_eq!((p.u, p.v), (320.0, 240.0));
    }

    #[test]
    fn project_pinhole_arithmetic() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let p = project(&Vec3::new(0.05, 0.0, 0.5), &RigidTransform::identity(), &k).unwrap();
        assert!((p.u - 380.0).abs() < 1e-12);
        assert!((p.v - 240.0).abs() < 1e-12);
    }

    #[test]
    fn project_behind_camera() {
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let err = project(&Vec3::new(0.0, 0.0, -0.5), &RigidTransform::identity(), &k);
        assert!(matches!(err, Err(GeomError::PointBehindCamera { .. })));
    }

    #[test]
    fn project_depth_scale_invariance() {
        // Scaling a camera-frame point about the camera center leaves
        // the projection unchanged.
        let k = CameraIntrinsics::new(600.0, 480.0, 320.0, 240.0, 640, 480).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let q = Vec3::new(
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
                0.2 + rng.random::<Real>(),
            );
            let s = 0.1 + 5.0 * rng.random::<Real>();
            let id = RigidTransform::identity();
            let a = project(&q, &id, &k).unwrap();
            let b = project(&(s * q), &id, &k).unwrap();
            assert!(a.distance_to(&b) < 1e-9, "scale {s} moved the projection");
        }
    }

    #[test]
    fn rotation_exp_zero_is_identity() {
        assert_eq!(rotation_exp(&Vec3::zeros()), Mat3::identity());
    }

    #[test]
    fn rotation_exp_quarter_turn() {
        let r = rotation_exp(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let mapped = r * Vec3::new(1.0, 0.0, 0.0);
        assert!((mapped - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rotation_log_roundtrip_unit_angle() {
        // 1000 random unit-magnitude tangents round-trip below 1e-12.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let xi = Vec3::new(
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
            )
            .normalize();
            let back = rotation_log(&rotation_exp(&xi));
            assert!((back - xi).norm() < 1e-12, "roundtrip error {:e}", (back - xi).norm());
        }
    }

    #[test]
    fn rotation_log_near_pi() {
        let axis = Vec3::new(0.6, -0.48, 0.64).normalize();
        for &angle in &[std::f64::consts::PI - 1e-5, std::f64::consts::PI] {
            let xi = axis * angle;
            let back = rotation_log(&rotation_exp(&xi));
            let err = (back - xi).norm().min((back + xi).norm());
            assert!(err < 1e-6, "near-pi roundtrip error {err:e}");
        }
    }

    #[test]
    fn rotation_log_at_pi_canonical_branch() {
        // At exactly pi both ±axis are valid; the returned one has a
        // non-negative leading component.
        let axis = Vec3::new(-1.0, 0.0, 0.0);
        let r = rotation_exp(&(axis * std::f64::consts::PI));
        let back = rotation_log(&r);
        assert!(back.x > 0.0, "expected canonical branch, got {back:?}");
        assert!((rotation_exp(&back) - r).norm() < 1e-9);
    }

    #[test]
    fn compose_invert_identity_1000() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = random_transform(&mut rng);
            let id = t.compose(&t.inverse());
            assert!((id.rotation() - Mat3::identity()).norm() < 1e-9);
            assert!(id.translation().norm() < 1e-9);
        }
    }

    #[test]
    fn retract_matches_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_transform(&mut rng);
        let omega = Vec3::new(0.1, -0.2, 0.05);
        let dt = Vec3::new(0.3, 0.1, -0.4);
        let stepped = t.retract(&dt, &omega);
        assert!((stepped.rotation() - rotation_exp(&omega) * t.rotation()).norm() < 1e-12);
        assert!((stepped.translation() - (t.translation() + dt)).norm() < 1e-12);
    }

    #[test]
    fn matrix_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_transform(&mut rng);
        let m = t.to_matrix_row_major();
        let back = RigidTransform::from_matrix_row_major(&m).unwrap();
        assert!(t.rotation_angle_to(&back) < 1e-12);
        assert!(t.translation_distance_to(&back) < 1e-12);
    }

    #[test]
    fn intrinsics_text_roundtrip() {
        let k = CameraIntrinsics::new(615.3, 612.8, 319.04, 242.77, 640, 480).unwrap();
        let parsed = CameraIntrinsics::from_text(&k.to_text()).unwrap();
        assert_eq!(k, parsed);
    }

    #[test]
    fn intrinsics_rejects_bad_values() {
        assert!(CameraIntrinsics::new(-1.0, 600.0, 320.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(600.0, 600.0, 700.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::from_text("fx = 600\nfy = 600\ncx = 320\n").is_err());
    }

    proptest! {
        #[test]
        fn prop_compose_associative(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = random_transform(&mut rng);
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.rotation_angle_to(&right) < 1e-9);
            prop_assert!(left.translation_distance_to(&right) < 1e-9);
        }

        #[test]
        fn prop_exp_log_roundtrip(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let axis = Vec3::new(
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
            ).normalize();
            let angle = rng.random::<Real>() * 3.1;
            let xi = axis * angle;
            let back = rotation_log(&rotation_exp(&xi));
            prop_assert!((back - xi).norm() < 1e-9);
        }
    }
}
