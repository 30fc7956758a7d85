//! Joint refinement of hand parameters and virtual camera poses:
//! Levenberg–Marquardt on the confidence-weighted robust reprojection
//! cost of the posed hand landmarks, with the first camera anchored
//! and the identity scale held fixed.

use nalgebra::{DMatrix, DVector, Matrix2xX};

use crate::geom::{Real, RigidTransform, Vec3};
use crate::hand::{fk_jacobian, HandParams, HandSkeleton, NUM_HAND_PARAMS};
use crate::sfm::{ObservationSet, SolverConfig};

#[derive(Debug, Clone)]
pub struct JointRefineResult {
    pub params: HandParams,
    pub camera_poses: Vec<RigidTransform>,
    /// Cost of the initial state under the same weighting.
    pub initial_cost: Real,
    pub final_cost: Real,
    pub iterations: usize,
    pub converged: bool,
    pub cost_history: Vec<Real>,
}

/// Refines hand parameters and all non-anchored camera poses jointly by
/// minimizing the reprojection error of the forward-kinematics
/// landmarks, with the same confidence weighting and robust loss as
/// bundle adjustment.
///
/// The palm pose moves on its rigid tangent space while `palm_scale`
/// stays fixed (scale is gauge-entangled with the camera translations);
/// joint angles are clamped to their limits after every step. The
/// accepted-step cost sequence is non-increasing, so the final cost
/// never exceeds the initial one.
pub fn joint_hand_sfm(
    obs: &ObservationSet,
    skeleton: &HandSkeleton,
    init_params: &HandParams,
    init_cams: &[RigidTransform],
    registered: &[bool],
    config: &SolverConfig,
) -> JointRefineResult {
    let n = obs.len();
    debug_assert_eq!(init_cams.len(), n);
    debug_assert_eq!(registered.len(), n);

    let free_cams: Vec<usize> = (1..n).filter(|&i| registered[i]).collect();
    let cam_offset: Vec<Option<usize>> = {
        let mut map = vec![None; n];
        for (slot, &i) in free_cams.iter().enumerate() {
            map[i] = Some(NUM_HAND_PARAMS + 6 * slot);
        }
        map
    };
    let dim = NUM_HAND_PARAMS + 6 * free_cams.len();

    let mut params = *init_params;
    skeleton.clamp_angles(&mut params.angles);
    // Camera 0 is the gauge anchor: held fixed at its given pose.
    let mut poses = init_cams.to_vec();

    let cost_of = |params: &HandParams, poses: &[RigidTransform]| -> Real {
        let joints = crate::hand::forward_kinematics(skeleton, params);
        let mut cost = 0.0;
        for i in 0..n {
            if !registered[i] {
                continue;
            }
            for (k, det) in obs.frames()[i].confident(config.confidence_threshold) {
                match crate::sfm::projection_blocks(&joints[k], &poses[i], &det.point, obs.intrinsics())
                {
                    Some(b) => {
                        cost += det.confidence
                            * crate::sfm::huber_cost(b.residual.norm(), config.huber_width)
                    }
                    None => cost += 1e12,
                }
            }
        }
        cost
    };

    let initial_cost = cost_of(&params, &poses);
    let mut cost = initial_cost;
    let mut damping = config.initial_damping;
    let mut iterations = 0;
    let mut converged = cost < config.min_cost;
    let mut cost_history = Vec::new();

    'outer: while !converged && iterations < config.max_iterations {
        let fk = fk_jacobian(skeleton, &params);
        let mut h = DMatrix::<Real>::zeros(dim, dim);
        let mut g = DVector::<Real>::zeros(dim);

        for i in 0..n {
            if !registered[i] {
                continue;
            }
            for (k, det) in obs.frames()[i].confident(config.confidence_threshold) {
                let Some(b) = crate::sfm::projection_blocks(
                    &fk.joints[k],
                    &poses[i],
                    &det.point,
                    obs.intrinsics(),
                ) else {
                    continue;
                };
                let w = det.confidence
                    * crate::sfm::robust_weight(b.residual.norm(), config.huber_width);

                // Chain the projection's point Jacobian through the
                // landmark rows of the FK Jacobian.
                let mut j_hand = Matrix2xX::<Real>::zeros(NUM_HAND_PARAMS);
                for c in 0..NUM_HAND_PARAMS {
                    for r in 0..2 {
                        let mut acc = 0.0;
                        for d in 0..3 {
                            acc += b.j_point[(r, d)] * fk.jacobian[(3 * k + d, c)];
                        }
                        j_hand[(r, c)] = acc;
                    }
                }

                let jh_w = j_hand.transpose() * w;
                let hhh = &jh_w * &j_hand;
                let gh = &jh_w * b.residual;
                for r in 0..NUM_HAND_PARAMS {
                    g[r] += gh[r];
                    for c in 0..NUM_HAND_PARAMS {
                        h[(r, c)] += hhh[(r, c)];
                    }
                }
                if let Some(co) = cam_offset[i] {
                    let jc_w = b.j_camera.transpose() * w;
                    let hcc = jc_w * b.j_camera;
                    let hch = jc_w * &j_hand;
                    let gc = jc_w * b.residual;
                    for r in 0..6 {
                        g[co + r] += gc[r];
                        for c in 0..6 {
                            h[(co + r, co + c)] += hcc[(r, c)];
                        }
                        for c in 0..NUM_HAND_PARAMS {
                            h[(co + r, c)] += hch[(r, c)];
                            h[(c, co + r)] += hch[(r, c)];
                        }
                    }
                }
            }
        }

        loop {
            let mut damped = h.clone();
            for i in 0..dim {
                damped[(i, i)] += damping * h[(i, i)].max(1e-12);
            }
            let Some(delta) = nalgebra::Cholesky::new(damped).map(|ch| ch.solve(&g)) else {
                damping *= 4.0;
                if damping > config.max_damping {
                    break 'outer;
                }
                continue;
            };

            let mut cand_params = params.retract(delta.as_slice().split_at(NUM_HAND_PARAMS).0);
            skeleton.clamp_angles(&mut cand_params.angles);
            let mut cand_poses = poses.clone();
            for &i in &free_cams {
                let o = cam_offset[i].unwrap();
                cand_poses[i] = poses[i].retract(
                    &Vec3::new(delta[o], delta[o + 1], delta[o + 2]),
                    &Vec3::new(delta[o + 3], delta[o + 4], delta[o + 5]),
                );
            }
            let cand_cost = cost_of(&cand_params, &cand_poses);
            if cand_cost < cost {
                let decrease = cost - cand_cost;
                params = cand_params;
                poses = cand_poses;
                cost = cand_cost;
                cost_history.push(cost);
                damping = (damping / 3.0).max(config.min_damping);
                iterations += 1;
                if cost < config.min_cost
                    || decrease < config.cost_decrease_tol * cost.max(1e-300)
                    || delta.norm() < config.step_tol
                {
                    converged = true;
                }
                break;
            }
            damping *= 4.0;
            if damping > config.max_damping {
                break 'outer;
            }
        }
    }

    JointRefineResult {
        params,
        camera_poses: poses,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
        cost_history,
    }
}
