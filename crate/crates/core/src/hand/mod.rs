//! The 20-DOF articulated hand skeleton: topology, joint limits,
//! forward kinematics and analytic Jacobians.
//!
//! Landmark indices follow the 21-point detector layout: wrist = 0,
//! then four landmarks per finger in the order thumb, index, middle,
//! ring, little (base, two intermediate joints, tip). Each finger
//! carries 4 angles — abduction and flexion at the base plus one
//! flexion at each following joint — for 20 angles total. The hand
//! parameter vector used by the solvers is laid out as
//! `[palm translation (3), palm rotation tangent (3), angles (20)]`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::geom::{rotation_exp, Mat3, Real, RigidTransform, Vec3};

mod template;

pub const NUM_LANDMARKS: usize = 21;
pub const NUM_ANGLES: usize = 20;
/// Palm tangent (3 translation + 3 rotation) plus the 20 angles.
pub const NUM_HAND_PARAMS: usize = 26;
/// Offset of the angle block inside the 26-parameter vector.
pub const ANGLE_OFFSET: usize = 6;

pub const WRIST: usize = 0;
/// Landmarks rigidly attached to the palm: wrist plus the five finger
/// bases, in detector-layout order.
pub const RIGID_LANDMARKS: [usize; 6] = [0, 1, 5, 9, 13, 17];
/// Per-finger landmark chains `[base, joint1, joint2, tip]`.
pub const FINGER_CHAINS: [[usize; 4]; 5] = [
    [1, 2, 3, 4],
    [5, 6, 7, 8],
    [9, 10, 11, 12],
    [13, 14, 15, 16],
    [17, 18, 19, 20],
];

#[derive(Debug, Error)]
pub enum HandError {
    #[error("template parse error at line {line}: {msg}")]
    Template { line: usize, msg: String },
    #[error("invalid skeleton: {0}")]
    Invalid(String),
    #[error("invalid hand parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofKind {
    Abduction,
    Flexion,
}

#[derive(Debug, Clone)]
pub struct Landmark {
    pub name: String,
    /// Parent landmark, `None` for the wrist root.
    pub parent: Option<usize>,
    /// Rest-pose position in the template frame (meters).
    pub rest: Vec3,
}

/// One rotational degree of freedom, anchored at a landmark and acting
/// on everything downstream of it.
#[derive(Debug, Clone)]
pub struct JointDof {
    pub landmark: usize,
    pub kind: DofKind,
    /// Unit rotation axis in the local (parent-accumulated) frame.
    pub axis: Vec3,
    /// Limit interval in radians.
    pub min: Real,
    pub max: Real,
}

/// Capsule endpoints (landmark indices) and radius for the collision
/// proxy.
#[derive(Debug, Clone, Copy)]
pub struct CapsuleSpec {
    pub a: usize,
    pub b: usize,
    pub radius: Real,
}

/// Immutable hand skeleton: landmark tree, joint axes/limits and the
/// capsule table. Construct once and share.
#[derive(Debug, Clone)]
pub struct HandSkeleton {
    landmarks: Vec<Landmark>,
    dofs: Vec<JointDof>,
    capsules: Vec<CapsuleSpec>,
    /// Dof indices anchored at each landmark, in application order.
    dofs_at: Vec<Vec<usize>>,
    /// Strict descendants of each landmark.
    descendants: Vec<Vec<usize>>,
}

impl HandSkeleton {
    /// The built-in 50th-percentile template (version 1).
    pub fn default_template() -> Self {
        template::parse(template::DEFAULT_TEMPLATE_V1)
            .expect("embedded hand template must be valid")
    }

    pub fn from_text(text: &str) -> Result<Self, HandError> {
        template::parse(text)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, HandError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HandError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        template::parse(&text)
    }

    pub fn to_text(&self) -> String {
        template::serialize(self)
    }

    pub(crate) fn from_parts(
        landmarks: Vec<Landmark>,
        dofs: Vec<JointDof>,
        capsules: Vec<CapsuleSpec>,
    ) -> Result<Self, HandError> {
        if landmarks.len() != NUM_LANDMARKS {
            return Err(HandError::Invalid(format!(
                "expected 21 landmarks, got {}",
                landmarks.len()
            )));
        }
        if dofs.len() != NUM_ANGLES {
            return Err(HandError::Invalid(format!("expected 20 dofs, got {}", dofs.len())));
        }
        // Tree validation: wrist is the unique root, every parent index
        // precedes its child, all positions finite, bones non-zero.
        for (i, lm) in landmarks.iter().enumerate() {
            if !lm.rest.iter().all(|c| c.is_finite()) {
                return Err(HandError::Invalid(format!("landmark {i} is not finite")));
            }
            match lm.parent {
                None if i != WRIST => {
                    return Err(HandError::Invalid(format!("landmark {i} has no parent")));
                }
                Some(p) if p >= i => {
                    return Err(HandError::Invalid(format!(
                        "landmark {i} parent {p} does not precede it"
                    )));
                }
                Some(p) if (lm.rest - landmarks[p].rest).norm() <= 0.0 => {
                    return Err(HandError::Invalid(format!("bone {p} -> {i} has zero length")));
                }
                _ => {}
            }
        }
        let mut dofs_at = vec![Vec::new(); NUM_LANDMARKS];
        for (d, dof) in dofs.iter().enumerate() {
            if dof.landmark >= NUM_LANDMARKS {
                return Err(HandError::Invalid(format!("dof {d} anchored at bad landmark")));
            }
            if dof.min >= dof.max || !(dof.min <= 0.0 && dof.max >= 0.0) {
                return Err(HandError::Invalid(format!(
                    "dof {d} limits [{}, {}] must straddle the rest pose",
                    dof.min, dof.max
                )));
            }
            dofs_at[dof.landmark].push(d);
        }
        for caps in &capsules {
            if caps.a >= NUM_LANDMARKS || caps.b >= NUM_LANDMARKS {
                return Err(HandError::Invalid("capsule endpoint out of range".into()));
            }
            if caps.radius <= 0.0 {
                return Err(HandError::Invalid("capsule radius must be positive".into()));
            }
        }
        let mut descendants = vec![Vec::new(); NUM_LANDMARKS];
        for i in 0..NUM_LANDMARKS {
            let mut a = landmarks[i].parent;
            while let Some(p) = a {
                descendants[p].push(i);
                a = landmarks[p].parent;
            }
        }
        Ok(Self { landmarks, dofs, capsules, dofs_at, descendants })
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn dofs(&self) -> &[JointDof] {
        &self.dofs
    }

    pub fn capsules(&self) -> &[CapsuleSpec] {
        &self.capsules
    }

    pub fn rest_position(&self, landmark: usize) -> Vec3 {
        self.landmarks[landmark].rest
    }

    /// Rest positions of the six rigid landmarks, in
    /// [`RIGID_LANDMARKS`] order.
    pub fn rest_rigid_points(&self) -> [Vec3; 6] {
        RIGID_LANDMARKS.map(|i| self.landmarks[i].rest)
    }

    /// Template bone length between a landmark and its parent.
    pub fn bone_length(&self, landmark: usize) -> Option<Real> {
        let p = self.landmarks[landmark].parent?;
        Some((self.landmarks[landmark].rest - self.landmarks[p].rest).norm())
    }

    /// Clamps every angle into its limit interval.
    pub fn clamp_angles(&self, angles: &mut [Real; NUM_ANGLES]) {
        for (a, dof) in angles.iter_mut().zip(&self.dofs) {
            *a = a.clamp(dof.min, dof.max);
        }
    }

    pub fn angles_within_limits(&self, angles: &[Real; NUM_ANGLES]) -> bool {
        angles.iter().zip(&self.dofs).all(|(a, d)| *a >= d.min && *a <= d.max)
    }
}

/// Full hand state: palm pose, identity scale and the 20 joint angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandParams {
    pub palm_pose: RigidTransform,
    /// Uniform template scale — the single identity-dependent parameter.
    pub palm_scale: Real,
    pub angles: [Real; NUM_ANGLES],
}

impl HandParams {
    pub fn rest() -> Self {
        Self {
            palm_pose: RigidTransform::identity(),
            palm_scale: 1.0,
            angles: [0.0; NUM_ANGLES],
        }
    }

    pub fn new(
        skeleton: &HandSkeleton,
        palm_pose: RigidTransform,
        palm_scale: Real,
        angles: [Real; NUM_ANGLES],
    ) -> Result<Self, HandError> {
        if palm_scale <= 0.0 || !palm_scale.is_finite() {
            return Err(HandError::InvalidParams(format!(
                "palm scale {palm_scale} must be positive"
            )));
        }
        if !skeleton.angles_within_limits(&angles) {
            return Err(HandError::InvalidParams("angles violate joint limits".into()));
        }
        Ok(Self { palm_pose, palm_scale, angles })
    }

    /// Applies a 26-dimensional tangent step `[dt, omega, dtheta]`.
    /// Angles are left unclamped; callers enforce limits explicitly.
    pub fn retract(&self, delta: &[Real]) -> Self {
        debug_assert_eq!(delta.len(), NUM_HAND_PARAMS);
        let dt = Vec3::new(delta[0], delta[1], delta[2]);
        let omega = Vec3::new(delta[3], delta[4], delta[5]);
        let mut angles = self.angles;
        for (a, d) in angles.iter_mut().zip(&delta[ANGLE_OFFSET..]) {
            *a += d;
        }
        Self {
            palm_pose: self.palm_pose.retract(&dt, &omega),
            palm_scale: self.palm_scale,
            angles,
        }
    }
}

/// 21 landmark positions in world coordinates, indexed exactly like the
/// skeleton landmarks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointSet3D {
    pub points: [Vec3; NUM_LANDMARKS],
}

impl JointSet3D {
    pub fn new(points: [Vec3; NUM_LANDMARKS]) -> Self {
        Self { points }
    }

    pub fn zeros() -> Self {
        Self { points: [Vec3::zeros(); NUM_LANDMARKS] }
    }

    /// The six rigid landmarks (wrist + finger bases), in
    /// [`RIGID_LANDMARKS`] order.
    pub fn rigid_points(&self) -> [Vec3; 6] {
        RIGID_LANDMARKS.map(|i| self.points[i])
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }
}

impl std::ops::Index<usize> for JointSet3D {
    type Output = Vec3;

    fn index(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }
}

/// Selects the six rigid landmarks from a joint set.
pub fn rigid_points(joints: &JointSet3D) -> [Vec3; 6] {
    joints.rigid_points()
}

/// Evaluates the landmark positions for the given parameters.
///
/// The template is scaled by `palm_scale`, per-joint rotations are
/// applied root-to-tips about the joint landmarks, and the palm pose
/// maps the result into the world frame. With zero angles this
/// reproduces the scaled, posed rest template exactly.
pub fn forward_kinematics(skeleton: &HandSkeleton, params: &HandParams) -> JointSet3D {
    let mut joints = [Vec3::zeros(); NUM_LANDMARKS];
    let mut accum = [Mat3::identity(); NUM_LANDMARKS];
    let s = params.palm_scale;

    joints[WRIST] = params.palm_pose.transform_point(&(s * skeleton.landmarks[WRIST].rest));
    accum[WRIST] = joint_rotation(skeleton, params, WRIST, *params.palm_pose.rotation());

    for i in 1..NUM_LANDMARKS {
        let parent = skeleton.landmarks[i].parent.unwrap();
        let offset = s * (skeleton.landmarks[i].rest - skeleton.landmarks[parent].rest);
        joints[i] = joints[parent] + accum[parent] * offset;
        accum[i] = joint_rotation(skeleton, params, i, accum[parent]);
    }
    JointSet3D::new(joints)
}

fn joint_rotation(
    skeleton: &HandSkeleton,
    params: &HandParams,
    landmark: usize,
    incoming: Mat3,
) -> Mat3 {
    let mut r = incoming;
    for &d in &skeleton.dofs_at[landmark] {
        r *= rotation_exp(&(params.angles[d] * skeleton.dofs[d].axis));
    }
    r
}

/// Forward kinematics plus the analytic 63×26 Jacobian of the stacked
/// landmark coordinates with respect to the hand parameter vector.
pub struct FkJacobian {
    pub joints: JointSet3D,
    /// Row `3k+c` is coordinate `c` of landmark `k`; columns follow the
    /// `[dt, omega, angles]` layout.
    pub jacobian: DMatrix<Real>,
}

pub fn fk_jacobian(skeleton: &HandSkeleton, params: &HandParams) -> FkJacobian {
    let mut joints = [Vec3::zeros(); NUM_LANDMARKS];
    let mut accum = [Mat3::identity(); NUM_LANDMARKS];
    // World axis and center for every dof, filled during the pass.
    let mut world_axis = [Vec3::zeros(); NUM_ANGLES];
    let mut center = [Vec3::zeros(); NUM_ANGLES];

    let s = params.palm_scale;
    joints[WRIST] = params.palm_pose.transform_point(&(s * skeleton.landmarks[WRIST].rest));
    accum[WRIST] = joint_rotation_tracked(
        skeleton,
        params,
        WRIST,
        *params.palm_pose.rotation(),
        joints[WRIST],
        &mut world_axis,
        &mut center,
    );
    for i in 1..NUM_LANDMARKS {
        let parent = skeleton.landmarks[i].parent.unwrap();
        let offset = s * (skeleton.landmarks[i].rest - skeleton.landmarks[parent].rest);
        joints[i] = joints[parent] + accum[parent] * offset;
        accum[i] = joint_rotation_tracked(
            skeleton,
            params,
            i,
            accum[parent],
            joints[i],
            &mut world_axis,
            &mut center,
        );
    }

    let palm_origin = *params.palm_pose.translation();
    let mut jac = DMatrix::<Real>::zeros(3 * NUM_LANDMARKS, NUM_HAND_PARAMS);
    for (k, joint) in joints.iter().enumerate() {
        let row = 3 * k;
        // Palm translation: identity block.
        for c in 0..3 {
            jac[(row + c, c)] = 1.0;
        }
        // Palm rotation (left-multiplied tangent): e_j × (x_k − t_palm).
        let lever = joint - palm_origin;
        for (j, e) in [Vec3::x(), Vec3::y(), Vec3::z()].iter().enumerate() {
            let col = e.cross(&lever);
            for c in 0..3 {
                jac[(row + c, 3 + j)] = col[c];
            }
        }
    }
    for (d, dof) in skeleton.dofs.iter().enumerate() {
        for &m in &skeleton.descendants[dof.landmark] {
            let col = world_axis[d].cross(&(joints[m] - center[d]));
            let row = 3 * m;
            for c in 0..3 {
                jac[(row + c, ANGLE_OFFSET + d)] = col[c];
            }
        }
    }

    FkJacobian { joints: JointSet3D::new(joints), jacobian: jac }
}

fn joint_rotation_tracked(
    skeleton: &HandSkeleton,
    params: &HandParams,
    landmark: usize,
    incoming: Mat3,
    position: Vec3,
    world_axis: &mut [Vec3; NUM_ANGLES],
    center: &mut [Vec3; NUM_ANGLES],
) -> Mat3 {
    let mut r = incoming;
    for &d in &skeleton.dofs_at[landmark] {
        world_axis[d] = r * skeleton.dofs[d].axis;
        center[d] = position;
        r *= rotation_exp(&(params.angles[d] * skeleton.dofs[d].axis));
    }
    r
}

#[cfg(test)]
pub(crate) fn random_valid_params(
    skeleton: &HandSkeleton,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> HandParams {
    use rand::Rng;
    let axis = Vec3::new(
        rng.random::<Real>() - 0.5,
        rng.random::<Real>() - 0.5,
        rng.random::<Real>() - 0.5,
    )
    .normalize();
    let mut angles = [0.0; NUM_ANGLES];
    for (a, dof) in angles.iter_mut().zip(skeleton.dofs()) {
        *a = dof.min + (dof.max - dof.min) * rng.random::<Real>();
    }
    HandParams {
        palm_pose: RigidTransform::from_axis_angle(
            &(axis * rng.random::<Real>() * 2.5),
            Vec3::new(
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
            ),
        ),
        palm_scale: 0.7 + 0.6 * rng.random::<Real>(),
        angles,
    }
}
