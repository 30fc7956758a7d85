//! Single-frame camera registration against known 3D landmarks.

use nalgebra::{Matrix6, Vector6};

use super::{
    huber_cost, projection_blocks, robust_weight, FrameObservations, SfmError, SolverConfig,
    MIN_REGISTER_CORRESPONDENCES,
};
use crate::geom::{CameraIntrinsics, Real, RigidTransform, Vec3};
use crate::hand::{JointSet3D, NUM_LANDMARKS};

#[derive(Debug, Clone, Copy)]
pub struct RegisterResult {
    pub pose: RigidTransform,
    /// Confidence-weighted robust cost at the returned pose.
    pub cost: Real,
    /// Accepted Levenberg–Marquardt steps.
    pub iterations: usize,
}

/// Finds the camera pose minimizing this frame's reprojection error by
/// damped Gauss–Newton, starting from `init` (typically the previous
/// frame's pose).
///
/// Landmarks must be flagged in `available` and detected with
/// confidence at or above the threshold to participate. Fails with
/// [`SfmError::InsufficientCorrespondences`] below 4 usable landmarks
/// and [`SfmError::NonConvergence`] when the iteration cap is reached
/// without meeting the thresholds; callers exclude such frames.
pub fn register_frame(
    joints: &JointSet3D,
    available: &[bool; NUM_LANDMARKS],
    frame: &FrameObservations,
    k: &CameraIntrinsics,
    init: &RigidTransform,
    config: &SolverConfig,
) -> Result<RegisterResult, SfmError> {
    let usable: Vec<(usize, super::Detection)> = frame
        .confident(config.confidence_threshold)
        .filter(|(l, _)| available[*l])
        .map(|(l, d)| (l, *d))
        .collect();
    if usable.len() < MIN_REGISTER_CORRESPONDENCES {
        return Err(SfmError::InsufficientCorrespondences {
            found: usable.len(),
            required: MIN_REGISTER_CORRESPONDENCES,
        });
    }

    let cost_at = |pose: &RigidTransform| -> Real {
        usable
            .iter()
            .map(|(l, det)| match projection_blocks(&joints[*l], pose, &det.point, k) {
                Some(b) => det.confidence * huber_cost(b.residual.norm(), config.huber_width),
                // Behind-camera observations dominate the cost so the
                // step gets rejected.
                None => 1e12,
            })
            .sum()
    };

    let mut pose = *init;
    let mut cost = cost_at(&pose);
    let mut damping = config.initial_damping;
    let mut iterations = 0;

    if cost < config.min_cost {
        return Ok(RegisterResult { pose, cost, iterations });
    }

    for _ in 0..config.max_iterations {
        let mut h = Matrix6::<Real>::zeros();
        let mut g = Vector6::<Real>::zeros();
        for (l, det) in &usable {
            let Some(blocks) = projection_blocks(&joints[*l], &pose, &det.point, k) else {
                continue;
            };
            let w = det.confidence * robust_weight(blocks.residual.norm(), config.huber_width);
            h += blocks.j_camera.transpose() * blocks.j_camera * w;
            g += blocks.j_camera.transpose() * blocks.residual * w;
        }

        // Reject-and-retry with increased damping until a step helps.
        let mut stepped = false;
        while damping <= config.max_damping {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += damping * h[(i, i)].max(1e-12);
            }
            let Some(delta) = damped.lu().solve(&g) else {
                damping *= 4.0;
                continue;
            };
            let candidate = pose.retract(
                &Vec3::new(delta[0], delta[1], delta[2]),
                &Vec3::new(delta[3], delta[4], delta[5]),
            );
            let candidate_cost = cost_at(&candidate);
            if candidate_cost < cost {
                let decrease = cost - candidate_cost;
                pose = candidate;
                cost = candidate_cost;
                damping = (damping / 3.0).max(config.min_damping);
                iterations += 1;
                stepped = true;
                if cost < config.min_cost
                    || decrease < config.cost_decrease_tol * cost.max(1e-300)
                    || delta.norm() < config.step_tol
                {
                    return Ok(RegisterResult { pose, cost, iterations });
                }
                break;
            }
            damping *= 4.0;
        }
        if !stepped {
            // No step at any damping improves the cost: stationary.
            return Ok(RegisterResult { pose, cost, iterations });
        }
    }
    Err(SfmError::NonConvergence { iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project, rotation_exp};
    use crate::hand::{forward_kinematics, HandParams, HandSkeleton};
    use crate::sfm::Detection;

    fn setup() -> (JointSet3D, CameraIntrinsics) {
        let skel = HandSkeleton::default_template();
        let mut params = HandParams::rest();
        params.palm_pose =
            RigidTransform::from_translation(Vec3::new(-0.02, -0.09, 0.5));
        let joints = forward_kinematics(&skel, &params);
        let k = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        (joints, k)
    }

    fn observe(joints: &JointSet3D, pose: &RigidTransform, k: &CameraIntrinsics) -> FrameObservations {
        let mut frame = FrameObservations::empty();
        for l in 0..NUM_LANDMARKS {
            let px = project(&joints[l], pose, k).unwrap();
            frame.detections[l] = Some(Detection { point: px, confidence: 1.0 });
        }
        frame
    }

    #[test]
    fn recovers_generating_pose() {
        let (joints, k) = setup();
        let truth = RigidTransform::new(
            rotation_exp(&(Vec3::new(0.1, 1.0, 0.05).normalize() * 0.15)),
            Vec3::new(0.06, -0.02, 0.01),
        );
        let frame = observe(&joints, &truth, &k);
        let init = RigidTransform::new(
            rotation_exp(&(Vec3::new(0.1, 1.0, 0.05).normalize() * 0.10)),
            Vec3::new(0.03, 0.0, 0.0),
        );
        let result = register_frame(
            &joints,
            &[true; NUM_LANDMARKS],
            &frame,
            &k,
            &init,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(result.pose.rotation_angle_to(&truth) < 1e-6);
        assert!(result.pose.translation_distance_to(&truth) < 1e-6);
    }

    #[test]
    fn too_few_landmarks_rejected() {
        let (joints, k) = setup();
        let truth = RigidTransform::identity();
        let mut frame = observe(&joints, &truth, &k);
        for l in 3..NUM_LANDMARKS {
            frame.detections[l] = None;
        }
        match register_frame(
            &joints,
            &[true; NUM_LANDMARKS],
            &frame,
            &k,
            &truth,
            &SolverConfig::default(),
        ) {
            Err(SfmError::InsufficientCorrespondences { found: 3, .. }) => {}
            other => panic!("expected InsufficientCorrespondences, got {other:?}"),
        }
    }

    #[test]
    fn ground_truth_init_exits_immediately() {
        let (joints, k) = setup();
        let truth = RigidTransform::new(
            rotation_exp(&(Vec3::new(0.0, 1.0, 0.0) * 0.1)),
            Vec3::new(0.04, 0.0, 0.0),
        );
        let frame = observe(&joints, &truth, &k);
        let result = register_frame(
            &joints,
            &[true; NUM_LANDMARKS],
            &frame,
            &k,
            &truth,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(result.iterations <= 2, "{} iterations", result.iterations);
        assert!(result.cost < 1e-12, "cost {}", result.cost);
    }
}
