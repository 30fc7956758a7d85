//! Hand fitting: palm pose by similarity alignment over the six rigid
//! landmarks, joint angles by damped-least-squares inverse kinematics,
//! and the joint hand+camera reprojection refinement.

use nalgebra::{DMatrix, DVector};

use crate::geom::{points_rank_deficient, umeyama_align, GeomError, Real, RigidTransform};
use crate::hand::{
    fk_jacobian, forward_kinematics, DofKind, HandParams, HandSkeleton, JointSet3D, ANGLE_OFFSET,
    NUM_ANGLES, NUM_LANDMARKS, RIGID_LANDMARKS,
};

mod joint;

pub use joint::{joint_hand_sfm, JointRefineResult};

/// The 15 landmarks targeted by inverse kinematics: everything except
/// the wrist and finger bases.
pub fn ik_target_landmarks() -> Vec<usize> {
    (0..NUM_LANDMARKS).filter(|k| !RIGID_LANDMARKS.contains(k)).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct IkConfig {
    /// Initial damped-least-squares damping; adapts ×2 / ÷2 on
    /// rejected/accepted steps.
    pub damping: Real,
    pub max_iterations: usize,
    /// Target landmark RMS below which the solve stops (meters).
    pub position_tol: Real,
    /// Per-angle step magnitude limit (radians/iteration).
    pub step_limit: Real,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self { damping: 1e-2, max_iterations: 200, position_tol: 1e-8, step_limit: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct IkResult {
    pub angles: [Real; NUM_ANGLES],
    /// Final RMS distance over the target landmarks (meters).
    pub rms: Real,
    pub iterations: usize,
    pub converged: bool,
    /// RMS after every accepted step.
    pub rms_history: Vec<Real>,
}

/// Recovers the palm pose and identity scale by aligning the skeleton's
/// rest-pose rigid points onto the observed ones.
///
/// Fails with [`GeomError::DegenerateConfiguration`] when the observed
/// rigid points are rank-deficient; the caller must skip palm fitting
/// for that reconstruction.
pub fn fit_palm_pose(
    joints: &JointSet3D,
    skeleton: &HandSkeleton,
) -> Result<(RigidTransform, Real), GeomError> {
    let src = skeleton.rest_rigid_points();
    let dst = joints.rigid_points();
    if points_rank_deficient(&dst) {
        return Err(GeomError::DegenerateConfiguration(
            "observed rigid points are collinear or rank-deficient".into(),
        ));
    }
    let sim = umeyama_align(&src, &dst)?;
    Ok(sim.to_rigid_and_scale())
}

/// Damped least squares on the 20 joint angles with the palm held
/// fixed, minimizing the squared distance between posed landmarks and
/// their targets over the 15 fingered landmarks.
///
/// Angles are clamped to their limits after every step, accepted-step
/// RMS is non-increasing, and unreachable targets never fail: the best
/// angles found are returned flagged unconverged.
///
/// The solve starts from the rest pose; if that attempt stalls in a
/// local minimum above the tolerance, a small fixed set of flexed
/// starting postures is tried and the best result wins. Each attempt
/// runs under the same iteration cap and the winner's counters are
/// reported.
pub fn solve_ik(
    skeleton: &HandSkeleton,
    palm_pose: &RigidTransform,
    palm_scale: Real,
    targets: &JointSet3D,
    config: &IkConfig,
) -> IkResult {
    let flexed = |amount: Real| -> [Real; NUM_ANGLES] {
        let mut angles = [0.0; NUM_ANGLES];
        for (a, dof) in angles.iter_mut().zip(skeleton.dofs()) {
            if dof.kind == DofKind::Flexion {
                *a = amount.clamp(dof.min, dof.max);
            }
        }
        angles
    };
    let restarts =
        [[0.0; NUM_ANGLES], flexed(0.8), flexed(1.5), flexed(0.35)];

    let mut best: Option<IkResult> = None;
    for init in restarts {
        let result = solve_ik_from(skeleton, palm_pose, palm_scale, targets, config, init);
        let better = best.as_ref().map(|b| result.rms < b.rms).unwrap_or(true);
        let converged = result.converged;
        if better {
            best = Some(result);
        }
        // A zero-iteration budget means "return the rest-pose
        // initialization unchanged"; restarts only make sense when the
        // solver is allowed to move.
        if converged || config.max_iterations == 0 {
            break;
        }
    }
    best.expect("at least one attempt runs")
}

fn solve_ik_from(
    skeleton: &HandSkeleton,
    palm_pose: &RigidTransform,
    palm_scale: Real,
    targets: &JointSet3D,
    config: &IkConfig,
    init_angles: [Real; NUM_ANGLES],
) -> IkResult {
    let target_landmarks = ik_target_landmarks();
    let m = target_landmarks.len();

    let mut params = HandParams { palm_pose: *palm_pose, palm_scale, angles: init_angles };

    let rms_of = |params: &HandParams| -> Real {
        let joints = forward_kinematics(skeleton, params);
        let sum: Real = target_landmarks
            .iter()
            .map(|&k| (targets[k] - joints[k]).norm_squared())
            .sum();
        (sum / m as Real).sqrt()
    };

    let mut rms = rms_of(&params);
    let mut damping = config.damping;
    let mut rms_history = Vec::new();
    let mut iterations = 0;
    let mut converged = rms < config.position_tol;
    // Relative residual gradient |Jᵀr| / (|J|·|r|) of the last
    // linearization: near zero at an interior least-squares optimum
    // (targets unreachable only up to noise), large when limit clamping
    // blocks the descent.
    let mut relative_gradient;

    while !converged && iterations < config.max_iterations {
        let fk = fk_jacobian(skeleton, &params);
        let mut jac = DMatrix::<Real>::zeros(3 * m, NUM_ANGLES);
        let mut resid = DVector::<Real>::zeros(3 * m);
        for (row, &k) in target_landmarks.iter().enumerate() {
            let diff = targets[k] - fk.joints[k];
            for c in 0..3 {
                resid[3 * row + c] = diff[c];
                for a in 0..NUM_ANGLES {
                    jac[(3 * row + c, a)] = fk.jacobian[(3 * k + c, ANGLE_OFFSET + a)];
                }
            }
        }
        let jt = jac.transpose();
        let h = &jt * &jac;
        let g = jt * &resid;
        relative_gradient =
            g.norm() / (h.trace().sqrt() * resid.norm()).max(1e-300);

        let mut stepped = false;
        while damping < 1e12 {
            let mut damped = h.clone();
            for i in 0..NUM_ANGLES {
                damped[(i, i)] += damping;
            }
            let Some(delta) = nalgebra::Cholesky::new(damped).map(|ch| ch.solve(&g)) else {
                damping *= 2.0;
                continue;
            };
            let mut candidate = params;
            for (a, d) in candidate.angles.iter_mut().zip(delta.iter()) {
                *a += d.clamp(-config.step_limit, config.step_limit);
            }
            skeleton.clamp_angles(&mut candidate.angles);
            let cand_rms = rms_of(&candidate);
            if cand_rms < rms {
                params = candidate;
                rms = cand_rms;
                rms_history.push(rms);
                damping = (damping * 0.5).max(1e-12);
                iterations += 1;
                stepped = true;
                if rms < config.position_tol {
                    converged = true;
                }
                break;
            }
            damping *= 2.0;
        }
        if !stepped {
            // No step reduces the RMS at any damping: either an
            // interior least-squares optimum (the residual is
            // orthogonal to every feasible motion; targets reachable
            // only up to noise) or a limit-blocked stall on genuinely
            // unreachable targets, which stays flagged.
            converged = relative_gradient < 1e-6;
            break;
        }
    }

    IkResult { angles: params.angles, rms, iterations, converged, rms_history }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{rotation_exp, SimilarityTransform, Vec3};
    use crate::hand::random_valid_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn skeleton() -> HandSkeleton {
        HandSkeleton::default_template()
    }

    #[test]
    fn palm_fit_identity() {
        let skel = skeleton();
        let joints = forward_kinematics(&skel, &HandParams::rest());
        let (pose, scale) = fit_palm_pose(&joints, &skel).unwrap();
        assert!(pose.rotation_angle_to(&RigidTransform::identity()) < 1e-9);
        assert!(pose.translation().norm() < 1e-9);
        assert!((scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn palm_fit_recovers_constructed_similarity() {
        let skel = skeleton();
        let rot = rotation_exp(&Vec3::new(0.3, -0.5, 0.8));
        let truth = SimilarityTransform {
            scale: 1.17,
            rotation: rot,
            translation: Vec3::new(0.2, -0.1, 0.6),
        };
        let rest = forward_kinematics(&skel, &HandParams::rest());
        let mut joints = JointSet3D::zeros();
        for k in 0..NUM_LANDMARKS {
            joints.points[k] = truth.transform_point(&rest[k]);
        }
        let (pose, scale) = fit_palm_pose(&joints, &skel).unwrap();
        assert!((scale - 1.17).abs() < 1e-9);
        assert!((pose.rotation() - rot).norm() < 1e-9);
        assert!((pose.translation() - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn palm_fit_degenerate_inputs() {
        let skel = skeleton();
        // All rigid landmarks collapsed onto a line.
        let mut joints = JointSet3D::zeros();
        for (i, &k) in RIGID_LANDMARKS.iter().enumerate() {
            joints.points[k] = Vec3::new(i as Real * 0.01, 0.0, 0.0);
        }
        assert!(matches!(
            fit_palm_pose(&joints, &skel),
            Err(GeomError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn palm_fit_then_zero_angles_reproduces_rigid_points() {
        let skel = skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = random_valid_params(&skel, &mut rng);
        let observed = forward_kinematics(&skel, &truth);
        let (pose, scale) = fit_palm_pose(&observed, &skel).unwrap();
        let zero = HandParams { palm_pose: pose, palm_scale: scale, angles: [0.0; NUM_ANGLES] };
        let refit = forward_kinematics(&skel, &zero);
        // Rigid points are angle-invariant, so the zero-angle fit must
        // reproduce them to the alignment residual.
        for &k in &RIGID_LANDMARKS {
            assert!((refit[k] - observed[k]).norm() < 1e-9, "landmark {k}");
        }
    }

    #[test]
    fn ik_roundtrip_recovers_targets() {
        let skel = skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let truth = random_valid_params(&skel, &mut rng);
            let targets = forward_kinematics(&skel, &truth);
            let result = solve_ik(
                &skel,
                &truth.palm_pose,
                truth.palm_scale,
                &targets,
                &IkConfig::default(),
            );
            assert!(
                result.rms < 1e-6,
                "trial {trial}: rms {} after {} iterations",
                result.rms,
                result.iterations
            );
            assert!(result.iterations <= 200);
            assert!(skel.angles_within_limits(&result.angles), "trial {trial}: limits violated");
        }
    }

    #[test]
    fn ik_zero_iteration_cap_returns_init() {
        let skel = skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_valid_params(&skel, &mut rng);
        let targets = forward_kinematics(&skel, &truth);
        let cfg = IkConfig { max_iterations: 0, ..Default::default() };
        let result = solve_ik(&skel, &truth.palm_pose, truth.palm_scale, &targets, &cfg);
        assert_eq!(result.angles, [0.0; NUM_ANGLES]);
        assert_eq!(result.iterations, 0);
    }

    #[test]
    fn ik_unreachable_targets_flagged_not_fatal() {
        let skel = skeleton();
        let rest = forward_kinematics(&skel, &HandParams::rest());
        let mut targets = JointSet3D::zeros();
        for k in 0..NUM_LANDMARKS {
            targets.points[k] = rest[k] + Vec3::new(1.0, 0.0, 0.0);
        }
        let result = solve_ik(
            &skel,
            &RigidTransform::identity(),
            1.0,
            &targets,
            &IkConfig::default(),
        );
        assert!(!result.converged);
        assert!(result.rms.is_finite() && result.rms > 0.5);
        assert!(skel.angles_within_limits(&result.angles));
    }

    #[test]
    fn ik_rms_monotone_and_strictly_decreasing() {
        let skel = skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = random_valid_params(&skel, &mut rng);
        let targets = forward_kinematics(&skel, &truth);
        let result =
            solve_ik(&skel, &truth.palm_pose, truth.palm_scale, &targets, &IkConfig::default());
        for w in result.rms_history.windows(2) {
            assert!(w[0] - w[1] >= 1e-12, "accepted step decreased by {}", w[0] - w[1]);
        }
    }

    #[test]
    fn ik_angles_may_differ_but_landmarks_match() {
        // Redundant chains can reach the targets with different angles;
        // the contract is on landmark error only.
        let skel = skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let truth = random_valid_params(&skel, &mut rng);
        let targets = forward_kinematics(&skel, &truth);
        let result =
            solve_ik(&skel, &truth.palm_pose, truth.palm_scale, &targets, &IkConfig::default());
        let solved = HandParams {
            palm_pose: truth.palm_pose,
            palm_scale: truth.palm_scale,
            angles: result.angles,
        };
        let joints = forward_kinematics(&skel, &solved);
        for &k in &ik_target_landmarks() {
            assert!((joints[k] - targets[k]).norm() < 1e-5);
        }
    }
}
