//! Joint refinement of 3D joints and virtual camera poses by
//! Levenberg–Marquardt on the confidence-weighted, robust reprojection
//! cost, plus the incremental reconstruction driver and the metric
//! rescaling of the gauge.

use nalgebra::{DMatrix, DVector};

use super::{
    huber_cost, init_two_view, projection_blocks, register_frame, robust_weight, ObservationSet,
    SfMSolution, SfmError, SolverConfig,
};
use crate::geom::{Real, RigidTransform, Vec3};
use crate::hand::{JointSet3D, NUM_LANDMARKS};

/// Jointly refines joints and all non-anchored camera poses.
///
/// Frame 0 stays at the identity (gauge anchor); unregistered frames
/// and landmarks observed in fewer than two registered frames are
/// excluded. The accepted-step cost sequence is non-increasing; if the
/// iteration cap is reached first, the best state so far is returned
/// with `converged = false`.
pub fn bundle_adjust(
    obs: &ObservationSet,
    init: &SfMSolution,
    config: &SolverConfig,
) -> SfMSolution {
    let n = obs.len();
    debug_assert_eq!(init.camera_poses.len(), n);

    let registered = init.registered.clone();
    // Landmarks usable in the optimization: initialized and seen with
    // enough confidence in at least two registered frames.
    let mut active = [false; NUM_LANDMARKS];
    for (k, active_k) in active.iter_mut().enumerate() {
        let views = (0..n)
            .filter(|&i| {
                registered[i]
                    && obs.frames()[i].detections[k]
                        .map(|d| d.confidence >= config.confidence_threshold)
                        .unwrap_or(false)
            })
            .count();
        *active_k = init.landmark_observed[k] && views >= 2;
    }

    // Parameter layout: 6 per free camera then 3 per active landmark.
    let free_cams: Vec<usize> = (1..n).filter(|&i| registered[i]).collect();
    let active_pts: Vec<usize> = (0..NUM_LANDMARKS).filter(|&k| active[k]).collect();
    let cam_offset: Vec<Option<usize>> = {
        let mut map = vec![None; n];
        for (slot, &i) in free_cams.iter().enumerate() {
            map[i] = Some(6 * slot);
        }
        map
    };
    let pt_base = 6 * free_cams.len();
    let pt_offset: Vec<Option<usize>> = {
        let mut map = vec![None; NUM_LANDMARKS];
        for (slot, &k) in active_pts.iter().enumerate() {
            map[k] = Some(pt_base + 3 * slot);
        }
        map
    };
    let dim = pt_base + 3 * active_pts.len();

    let mut poses = init.camera_poses.clone();
    poses[0] = RigidTransform::identity();
    let mut joints = init.joints;

    let cost_of = |poses: &[RigidTransform], joints: &JointSet3D| -> Real {
        let mut cost = 0.0;
        for i in 0..n {
            if !registered[i] {
                continue;
            }
            for (k, det) in obs.frames()[i].confident(config.confidence_threshold) {
                if !active[k] {
                    continue;
                }
                match projection_blocks(&joints[k], &poses[i], &det.point, obs.intrinsics()) {
                    Some(b) => {
                        cost += det.confidence * huber_cost(b.residual.norm(), config.huber_width)
                    }
                    None => cost += 1e12,
                }
            }
        }
        cost
    };

    let mut cost = cost_of(&poses, &joints);
    let mut damping = config.initial_damping;
    let mut iterations = 0;
    let mut converged = cost < config.min_cost;
    let mut cost_history = Vec::new();

    'outer: while !converged && iterations < config.max_iterations {
        let mut h = DMatrix::<Real>::zeros(dim, dim);
        let mut g = DVector::<Real>::zeros(dim);
        for i in 0..n {
            if !registered[i] {
                continue;
            }
            for (k, det) in obs.frames()[i].confident(config.confidence_threshold) {
                if !active[k] {
                    continue;
                }
                let Some(b) =
                    projection_blocks(&joints[k], &poses[i], &det.point, obs.intrinsics())
                else {
                    continue;
                };
                let w = det.confidence * robust_weight(b.residual.norm(), config.huber_width);
                let co = cam_offset[i];
                let po = pt_offset[k].unwrap();

                let jp_w = b.j_point.transpose() * w;
                let hpp = jp_w * b.j_point;
                let gp = jp_w * b.residual;
                for r in 0..3 {
                    g[po + r] += gp[r];
                    for c in 0..3 {
                        h[(po + r, po + c)] += hpp[(r, c)];
                    }
                }
                if let Some(co) = co {
                    let jc_w = b.j_camera.transpose() * w;
                    let hcc = jc_w * b.j_camera;
                    let hcp = jc_w * b.j_point;
                    let gc = jc_w * b.residual;
                    for r in 0..6 {
                        g[co + r] += gc[r];
                        for c in 0..6 {
                            h[(co + r, co + c)] += hcc[(r, c)];
                        }
                        for c in 0..3 {
                            h[(co + r, po + c)] += hcp[(r, c)];
                            h[(po + c, co + r)] += hcp[(r, c)];
                        }
                    }
                }
            }
        }

        // Damped solve; grow damping until a step reduces the cost.
        loop {
            let mut damped = h.clone();
            for i in 0..dim {
                damped[(i, i)] += damping * h[(i, i)].max(1e-12);
            }
            let step = nalgebra::Cholesky::new(damped).map(|ch| ch.solve(&g));
            let Some(delta) = step else {
                damping *= 4.0;
                if damping > config.max_damping {
                    break 'outer;
                }
                continue;
            };

            let mut cand_poses = poses.clone();
            for &i in &free_cams {
                let o = cam_offset[i].unwrap();
                cand_poses[i] = poses[i].retract(
                    &Vec3::new(delta[o], delta[o + 1], delta[o + 2]),
                    &Vec3::new(delta[o + 3], delta[o + 4], delta[o + 5]),
                );
            }
            let mut cand_joints = joints;
            for &k in &active_pts {
                let o = pt_offset[k].unwrap();
                cand_joints.points[k] += Vec3::new(delta[o], delta[o + 1], delta[o + 2]);
            }

            let cand_cost = cost_of(&cand_poses, &cand_joints);
            if cand_cost < cost {
                let decrease = cost - cand_cost;
                poses = cand_poses;
                joints = cand_joints;
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

    finalize_solution(
        obs,
        poses,
        registered,
        joints,
        active,
        cost,
        iterations,
        converged,
        cost_history,
        config,
    )
}

/// Recomputes residual statistics at a final state and assembles the
/// solution.
#[allow(clippy::too_many_arguments)]
fn finalize_solution(
    obs: &ObservationSet,
    poses: Vec<RigidTransform>,
    registered: Vec<bool>,
    joints: JointSet3D,
    observed: [bool; NUM_LANDMARKS],
    cost: Real,
    iterations: usize,
    converged: bool,
    cost_history: Vec<Real>,
    config: &SolverConfig,
) -> SfMSolution {
    let n = obs.len();
    let mut residuals = vec![[None; NUM_LANDMARKS]; n];
    let mut inliers = vec![[false; NUM_LANDMARKS]; n];
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if !registered[i] {
            continue;
        }
        for (k, det) in obs.frames()[i].confident(config.confidence_threshold) {
            if !observed[k] {
                continue;
            }
            if let Some(b) = projection_blocks(&joints[k], &poses[i], &det.point, obs.intrinsics())
            {
                let norm = b.residual.norm();
                residuals[i][k] = Some(norm);
                inliers[i][k] = true;
                sq_sum += norm * norm;
                count += 1;
            }
        }
    }
    let rms = if count > 0 { (sq_sum / (2.0 * count as Real)).sqrt() } else { 0.0 };
    SfMSolution {
        joints,
        landmark_observed: observed,
        camera_poses: poses,
        registered,
        final_cost: cost,
        residuals,
        inliers,
        rms,
        iterations,
        converged,
        cost_history,
    }
}

/// Multiplies the reconstruction's scale gauge: joints and camera
/// translations scale by `s`, rotations and the reprojection cost are
/// untouched.
pub fn rescale_to_metric(solution: &SfMSolution, s: Real) -> SfMSolution {
    assert!(s > 0.0 && s.is_finite(), "scale must be positive, got {s}");
    let mut out = solution.clone();
    for p in &mut out.joints.points {
        *p *= s;
    }
    for pose in &mut out.camera_poses {
        *pose = RigidTransform::new(*pose.rotation(), pose.translation() * s);
    }
    out
}

/// Full incremental reconstruction: deterministic pair selection,
/// two-view initialization, per-frame registration, multi-view
/// triangulation and bundle adjustment.
pub fn reconstruct(obs: &ObservationSet, config: &SolverConfig) -> Result<SfMSolution, SfmError> {
    let n = obs.len();
    let tau = config.confidence_threshold;

    // Partner score: shared high-confidence detections times median
    // pixel displacement (maximize correspondences and parallax).
    let mut scored: Vec<(usize, Real)> = (1..n)
        .map(|b| {
            let shared = obs.shared_confident(0, b, tau);
            let mut disps: Vec<Real> = shared
                .iter()
                .map(|&k| {
                    let pa = obs.frames()[0].detections[k].unwrap().point;
                    let pb = obs.frames()[b].detections[k].unwrap().point;
                    pa.distance_to(&pb)
                })
                .collect();
            disps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = if disps.is_empty() {
                0.0
            } else if disps.len() % 2 == 1 {
                disps[disps.len() / 2]
            } else {
                0.5 * (disps[disps.len() / 2 - 1] + disps[disps.len() / 2])
            };
            (b, shared.len() as Real * median)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut last_err = SfmError::InsufficientCorrespondences { found: 0, required: 8 };
    let mut two_view = None;
    let mut partner = 0;
    for &(b, score) in &scored {
        if score <= 0.0 {
            break;
        }
        match init_two_view(obs, 0, b, config) {
            Ok(init) => {
                two_view = Some(init);
                partner = b;
                break;
            }
            Err(e) => last_err = e,
        }
    }
    let Some(two_view) = two_view else {
        return Err(last_err);
    };

    let mut poses = vec![RigidTransform::identity(); n];
    let mut registered = vec![false; n];
    registered[0] = true;
    poses[partner] = two_view.relative_pose;
    registered[partner] = true;
    let mut joints = two_view.joints;
    let mut have_point = two_view.triangulated;

    // Register remaining frames, initializing each from the nearest
    // registered frame.
    for i in 1..n {
        if registered[i] {
            continue;
        }
        let nearest = (0..n)
            .filter(|&j| registered[j])
            .min_by_key(|&j| (i as i64 - j as i64).unsigned_abs())
            .unwrap();
        match register_frame(&joints, &have_point, &obs.frames()[i], obs.intrinsics(), &poses[nearest], config)
        {
            Ok(result) => {
                poses[i] = result.pose;
                registered[i] = true;
            }
            Err(_) => {
                // Leave the frame unregistered; it is excluded from the
                // cost and reported as such.
                poses[i] = poses[nearest];
            }
        }
    }

    // Triangulate landmarks that the initial pair missed, now that more
    // cameras are posed.
    let mut observed = [false; NUM_LANDMARKS];
    for k in 0..NUM_LANDMARKS {
        if have_point[k] {
            observed[k] = true;
            continue;
        }
        let mut view_poses = Vec::new();
        let mut view_norms = Vec::new();
        for i in 0..n {
            if !registered[i] {
                continue;
            }
            if let Some(d) = obs.frames()[i].detections[k] {
                if d.confidence >= tau {
                    view_poses.push(poses[i]);
                    view_norms.push(obs.intrinsics().normalize(&d.point));
                }
            }
        }
        if view_poses.len() >= 2 {
            if let Some(x) = super::triangulate(&view_poses, &view_norms) {
                let in_front = view_poses
                    .iter()
                    .filter(|p| p.inverse().transform_point(&x).z > crate::geom::MIN_PROJECTION_DEPTH)
                    .count();
                if in_front >= 2 && x.iter().all(|c| c.is_finite()) {
                    joints.points[k] = x;
                    have_point[k] = true;
                    observed[k] = true;
                }
            }
        }
    }

    let init = finalize_solution(
        obs,
        poses,
        registered,
        joints,
        observed,
        Real::INFINITY,
        0,
        false,
        Vec::new(),
        config,
    );
    Ok(bundle_adjust(obs, &init, config))
}
