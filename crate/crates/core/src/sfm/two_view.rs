//! Two-view initialization from the epipolar constraint, plus linear
//! multi-view triangulation.

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector4};

use super::{ObservationSet, SfmError, SolverConfig, MIN_CHEIRAL_POINTS, MIN_TWO_VIEW_CORRESPONDENCES};
use crate::geom::{Mat3, Real, RigidTransform, Vec3, MIN_PROJECTION_DEPTH};
use crate::hand::{JointSet3D, NUM_LANDMARKS};

/// Rays meeting at less than this apex angle (radians) do not count as
/// triangulated; this is what rejects near-pure-rotation pairs.
pub const MIN_TRIANGULATION_ANGLE: Real = 0.5 * std::f64::consts::PI / 180.0;

/// Two-view initialization result. The relative pose is the second
/// camera's pose in the first camera's frame with unit-norm translation
/// (overall scale is a gauge freedom); `joints` holds triangulated
/// landmark positions where `triangulated` is set.
#[derive(Debug, Clone)]
pub struct TwoViewInit {
    pub relative_pose: RigidTransform,
    pub joints: JointSet3D,
    pub triangulated: [bool; NUM_LANDMARKS],
    pub shared: Vec<usize>,
}

/// Estimates the relative pose between two frames from their shared
/// high-confidence detections and triangulates the shared landmarks.
///
/// Candidate poses come from the four decompositions of the linear
/// essential-matrix estimate plus a flat-depth bootstrap (the linear
/// estimate degrades badly for near-planar point sets under noise).
/// Every viable candidate is polished by a two-frame bundle adjustment
/// and the cheirality-consistent one with the lowest reprojection cost
/// wins; its translation is normalized to unit length (overall scale is
/// a gauge freedom).
pub fn init_two_view(
    obs: &ObservationSet,
    frame_a: usize,
    frame_b: usize,
    config: &SolverConfig,
) -> Result<TwoViewInit, SfmError> {
    let shared = obs.shared_confident(frame_a, frame_b, config.confidence_threshold);
    if shared.len() < MIN_TWO_VIEW_CORRESPONDENCES {
        return Err(SfmError::InsufficientCorrespondences {
            found: shared.len(),
            required: MIN_TWO_VIEW_CORRESPONDENCES,
        });
    }

    let k = obs.intrinsics();
    let norm_a: Vec<(Real, Real)> = shared
        .iter()
        .map(|&l| k.normalize(&obs.frames()[frame_a].detections[l].unwrap().point))
        .collect();
    let norm_b: Vec<(Real, Real)> = shared
        .iter()
        .map(|&l| k.normalize(&obs.frames()[frame_b].detections[l].unwrap().point))
        .collect();

    let essential = estimate_essential(&norm_a, &norm_b);
    let mut candidates: Vec<RigidTransform> = decompose_essential(&essential)
        .into_iter()
        .map(|(r_ba, t_ba)| RigidTransform::new(r_ba.transpose(), -(r_ba.transpose() * t_ba)))
        .collect();
    if let Some(bootstrap) = bootstrap_pose(obs, frame_b, &shared, &norm_a, config) {
        candidates.push(bootstrap);
    }

    // The two-frame slice used to polish each candidate.
    let pair_obs = ObservationSet::new(
        vec![obs.frames()[frame_a].clone(), obs.frames()[frame_b].clone()],
        *k,
    )
    .expect("frames already validated");

    let mut best: Option<(usize, Real, RigidTransform, JointSet3D, [bool; NUM_LANDMARKS])> = None;
    for pose_b in candidates {
        let (joints, valid, count) = triangulate_shared(&shared, &norm_a, &norm_b, &pose_b);
        if count < MIN_CHEIRAL_POINTS {
            continue;
        }
        // Polish pose and points together on the pair.
        let init = super::SfMSolution {
            joints,
            landmark_observed: valid,
            camera_poses: vec![RigidTransform::identity(), pose_b],
            registered: vec![true, true],
            final_cost: Real::INFINITY,
            residuals: vec![[None; NUM_LANDMARKS]; 2],
            inliers: vec![[false; NUM_LANDMARKS]; 2],
            rms: 0.0,
            iterations: 0,
            converged: false,
            cost_history: Vec::new(),
        };
        let refined = super::bundle_adjust(&pair_obs, &init, config);
        let refined_pose = refined.camera_poses[1];
        let (joints, valid, count) = recheck_validity(&shared, &refined, &refined_pose);
        if count < MIN_CHEIRAL_POINTS {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bc, bcost, ..)) => count > *bc || (count == *bc && refined.final_cost < *bcost),
        };
        if better {
            best = Some((count, refined.final_cost, refined_pose, joints, valid));
        }
    }

    let Some((_, _, pose_b, joints, triangulated)) = best else {
        return Err(SfmError::DegenerateMotion { frame_a, frame_b });
    };

    // Normalize the baseline to unit length (scale gauge).
    let baseline = pose_b.translation().norm();
    if baseline < 1e-12 {
        return Err(SfmError::DegenerateMotion { frame_a, frame_b });
    }
    let s = 1.0 / baseline;
    let pose_b = RigidTransform::new(*pose_b.rotation(), pose_b.translation() * s);
    let mut joints = joints;
    for p in &mut joints.points {
        *p *= s;
    }
    Ok(TwoViewInit { relative_pose: pose_b, joints, triangulated, shared })
}

/// Triangulates the shared landmarks for a candidate pose and counts
/// the cheirality-and-parallax-consistent ones.
fn triangulate_shared(
    shared: &[usize],
    norm_a: &[(Real, Real)],
    norm_b: &[(Real, Real)],
    pose_b: &RigidTransform,
) -> (JointSet3D, [bool; NUM_LANDMARKS], usize) {
    let poses = [RigidTransform::identity(), *pose_b];
    let mut joints = JointSet3D::zeros();
    let mut valid = [false; NUM_LANDMARKS];
    let mut count = 0;
    for ((&landmark, pa), pb) in shared.iter().zip(norm_a).zip(norm_b) {
        if let Some(x) = triangulate(&poses, &[*pa, *pb]) {
            if point_is_valid(&x, &poses) {
                joints.points[landmark] = x;
                valid[landmark] = true;
                count += 1;
            }
        }
    }
    (joints, valid, count)
}

fn recheck_validity(
    shared: &[usize],
    refined: &super::SfMSolution,
    pose_b: &RigidTransform,
) -> (JointSet3D, [bool; NUM_LANDMARKS], usize) {
    let poses = [RigidTransform::identity(), *pose_b];
    let mut joints = JointSet3D::zeros();
    let mut valid = [false; NUM_LANDMARKS];
    let mut count = 0;
    for &landmark in shared {
        if !refined.landmark_observed[landmark] {
            continue;
        }
        let x = refined.joints[landmark];
        if point_is_valid(&x, &poses) {
            joints.points[landmark] = x;
            valid[landmark] = true;
            count += 1;
        }
    }
    (joints, valid, count)
}

fn point_is_valid(x: &Vec3, poses: &[RigidTransform; 2]) -> bool {
    let qb = poses[1].inverse().transform_point(x);
    x.z > MIN_PROJECTION_DEPTH
        && qb.z > MIN_PROJECTION_DEPTH
        && apex_angle(x, poses[0].translation(), poses[1].translation())
            >= MIN_TRIANGULATION_ANGLE
}

/// Flat-depth bootstrap: place the shared landmarks at unit depth along
/// frame `a`'s rays, register frame `b` against that proxy structure,
/// then alternate triangulation and registration a few rounds. Robust
/// for the near-planar configurations that break the linear essential
/// estimate.
fn bootstrap_pose(
    obs: &ObservationSet,
    frame_b: usize,
    shared: &[usize],
    norm_a: &[(Real, Real)],
    config: &SolverConfig,
) -> Option<RigidTransform> {
    let mut joints = JointSet3D::zeros();
    let mut available = [false; NUM_LANDMARKS];
    for (&landmark, (x, y)) in shared.iter().zip(norm_a) {
        joints.points[landmark] = Vec3::new(*x, *y, 1.0);
        available[landmark] = true;
    }
    let norm_b: Vec<(Real, Real)> = shared
        .iter()
        .map(|&l| obs.intrinsics().normalize(&obs.frames()[frame_b].detections[l].unwrap().point))
        .collect();

    let mut pose = RigidTransform::identity();
    for _ in 0..3 {
        pose = super::register_frame(
            &joints,
            &available,
            &obs.frames()[frame_b],
            obs.intrinsics(),
            &pose,
            config,
        )
        .ok()?
        .pose;
        let poses = [RigidTransform::identity(), pose];
        for ((&landmark, pa), pb) in shared.iter().zip(norm_a).zip(&norm_b) {
            if let Some(x) = triangulate(&poses, &[*pa, *pb]) {
                if x.z > MIN_PROJECTION_DEPTH {
                    joints.points[landmark] = x;
                }
            }
        }
    }
    Some(pose)
}

/// Normalized 8-point estimate of the essential matrix satisfying
/// `x_bᵀ E x_a = 0`, projected onto the essential manifold.
fn estimate_essential(norm_a: &[(Real, Real)], norm_b: &[(Real, Real)]) -> Mat3 {
    let n = norm_a.len();
    let mut a = DMatrix::<Real>::zeros(n, 9);
    for (i, ((xa, ya), (xb, yb))) in norm_a.iter().zip(norm_b).enumerate() {
        a[(i, 0)] = xb * xa;
        a[(i, 1)] = xb * ya;
        a[(i, 2)] = *xb;
        a[(i, 3)] = yb * xa;
        a[(i, 4)] = yb * ya;
        a[(i, 5)] = *yb;
        a[(i, 6)] = *xa;
        a[(i, 7)] = *ya;
        a[(i, 8)] = 1.0;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let e = v_t.row(v_t.nrows() - 1);
    let raw = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);

    // Enforce the (1, 1, 0) singular structure.
    let svd3 = raw.svd(true, true);
    let u = svd3.u.unwrap();
    let v_t3 = svd3.v_t.unwrap();
    u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)) * v_t3
}

/// The four (R, t) decompositions of an essential matrix, as maps from
/// the first camera's coordinates to the second's.
fn decompose_essential(e: &Mat3) -> [(Mat3, Vec3); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = Vec3::new(u[(0, 2)], u[(1, 2)], u[(2, 2)]);
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Linear (DLT) triangulation of one point from two or more views given
/// camera poses (camera-to-world) and normalized image coordinates.
pub fn triangulate(poses: &[RigidTransform], normalized: &[(Real, Real)]) -> Option<Vec3> {
    debug_assert_eq!(poses.len(), normalized.len());
    if poses.len() < 2 {
        return None;
    }
    let mut a = DMatrix::<Real>::zeros(2 * poses.len(), 4);
    for (i, (pose, (x, y))) in poses.iter().zip(normalized).enumerate() {
        // World-to-camera projection rows.
        let inv = pose.inverse();
        let r = inv.rotation();
        let t = inv.translation();
        let mut p = Matrix4::<Real>::identity();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        p.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        let row0 = p.row(0).clone_owned();
        let row1 = p.row(1).clone_owned();
        let row2 = p.row(2).clone_owned();
        a.row_mut(2 * i).copy_from(&(row0 - row2.scale(*x)));
        a.row_mut(2 * i + 1).copy_from(&(row1 - row2.scale(*y)));
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let row = v_t.row(v_t.nrows() - 1);
    let h = Vector4::new(row[0], row[1], row[2], row[3]);
    if h.w.abs() < 1e-14 {
        return None;
    }
    Some(Vec3::new(h.x / h.w, h.y / h.w, h.z / h.w))
}

fn apex_angle(x: &Vec3, center_a: &Vec3, center_b: &Vec3) -> Real {
    let da = (x - center_a).normalize();
    let db = (x - center_b).normalize();
    da.dot(&db).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project, rotation_exp, CameraIntrinsics};
    use crate::hand::{forward_kinematics, HandParams, HandSkeleton};
    use crate::sfm::{Detection, FrameObservations};

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Hand template at 0.5 m makes a realistic non-planar point set.
    fn world_points() -> Vec<Vec3> {
        let skel = HandSkeleton::default_template();
        let mut params = HandParams::rest();
        params.palm_pose =
            crate::geom::RigidTransform::from_translation(Vec3::new(-0.02, -0.09, 0.5));
        forward_kinematics(&skel, &params).points.to_vec()
    }

    fn observe(points: &[Vec3], pose: &RigidTransform) -> FrameObservations {
        let k = intrinsics();
        let mut frame = FrameObservations::empty();
        for (i, p) in points.iter().enumerate() {
            let px = project(p, pose, &k).unwrap();
            frame.detections[i] = Some(Detection { point: px, confidence: 1.0 });
        }
        frame
    }

    fn two_frame_set(pose_b: &RigidTransform) -> ObservationSet {
        let points = world_points();
        let frames =
            vec![observe(&points, &RigidTransform::identity()), observe(&points, pose_b)];
        ObservationSet::new(frames, intrinsics()).unwrap()
    }

    #[test]
    fn recovers_relative_pose_exactly() {
        // 10 degree baseline rotation, 5 cm translation.
        let truth = RigidTransform::new(
            rotation_exp(&(Vec3::new(0.0, 1.0, 0.0) * 10.0_f64.to_radians())),
            Vec3::new(0.05, 0.0, 0.01),
        );
        let obs = two_frame_set(&truth);
        let init = init_two_view(&obs, 0, 1, &SolverConfig::default()).unwrap();

        let rot_err = init.relative_pose.rotation_angle_to(&truth);
        assert!(rot_err < 1e-6, "rotation error {rot_err:e}");

        let dir_est = init.relative_pose.translation().normalize();
        let dir_true = truth.translation().normalize();
        let dir_err = dir_est.cross(&dir_true).norm().asin();
        assert!(dir_err < 1e-6, "translation direction error {dir_err:e}");
        assert!((init.relative_pose.translation().norm() - 1.0).abs() < 1e-12);

        // Triangulated joints match the true structure up to the scale
        // gauge (|t| was 1 instead of the true baseline).
        let scale = truth.translation().norm();
        let points = world_points();
        for (k, &tri) in init.triangulated.iter().enumerate() {
            assert!(tri, "landmark {k} not triangulated");
            let rescaled = init.joints[k] * scale;
            assert!((rescaled - points[k]).norm() < 1e-6);
        }
    }

    #[test]
    fn identical_frames_are_degenerate() {
        let obs = two_frame_set(&RigidTransform::identity());
        match init_two_view(&obs, 0, 1, &SolverConfig::default()) {
            Err(SfmError::DegenerateMotion { .. }) => {}
            other => panic!("expected DegenerateMotion, got {other:?}"),
        }
    }

    #[test]
    fn seven_correspondences_rejected() {
        let truth = RigidTransform::new(
            rotation_exp(&(Vec3::new(0.0, 1.0, 0.0) * 0.2)),
            Vec3::new(0.05, 0.0, 0.0),
        );
        let mut obs = two_frame_set(&truth);
        // Drop all but 7 landmarks in frame b.
        for k in 7..NUM_LANDMARKS {
            obs.frames[1].detections[k] = None;
        }
        match init_two_view(&obs, 0, 1, &SolverConfig::default()) {
            Err(SfmError::InsufficientCorrespondences { found: 7, .. }) => {}
            other => panic!("expected InsufficientCorrespondences, got {other:?}"),
        }
    }

    #[test]
    fn triangulation_recovers_known_point() {
        let pose_a = RigidTransform::identity();
        let pose_b = RigidTransform::new(
            rotation_exp(&(Vec3::new(0.1, 0.8, 0.0).normalize() * 0.15)),
            Vec3::new(0.08, 0.01, 0.0),
        );
        let x = Vec3::new(0.03, -0.05, 0.6);
        let k = intrinsics();
        let pa = project(&x, &pose_a, &k).unwrap();
        let pb = project(&x, &pose_b, &k).unwrap();
        let est = triangulate(
            &[pose_a, pose_b],
            &[k.normalize(&pa), k.normalize(&pb)],
        )
        .unwrap();
        assert!((est - x).norm() < 1e-9);
    }
}
