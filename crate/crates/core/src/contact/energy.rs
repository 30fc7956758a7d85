//! Contact-map-driven grasp energy and its gradient-descent refiner.
//!
//! The energy has three terms over the posed hand capsules and the
//! object mesh (already posed in the hand's world frame):
//!
//! * attraction — contacted vertices are pulled onto the nearest
//!   capsule surface,
//! * repulsion — non-contacted vertices inside a safety margin push
//!   the hand away,
//! * penetration — capsule-axis samples sinking below the mesh
//!   surface are penalized hardest.
//!
//! The per-vertex capsule distance uses a smooth minimum over capsules
//! so the closest-segment assignment stays differentiable; gradients
//! flow through the capsule endpoints into the 26 hand parameters via
//! the forward-kinematics Jacobian.

use nalgebra::DVector;

use super::{segment_parameter, CapsuleProxy, ContactMap, TriMesh};
use crate::geom::{Real, Vec3};
use crate::hand::{fk_jacobian, HandParams, HandSkeleton, NUM_HAND_PARAMS, NUM_LANDMARKS};

#[derive(Debug, Clone, Copy)]
pub struct ContactWeights {
    pub attract: Real,
    pub repel: Real,
    pub penetration: Real,
    /// Contact-map value at or above which a vertex counts as contacted.
    pub contact_threshold: Real,
    /// Repulsion margin: non-contacted vertices closer than this to a
    /// capsule are pushed out (meters).
    pub repel_margin: Real,
    /// Culling radius for the repulsion support (meters).
    pub near_radius: Real,
    /// Smooth-min temperature across capsules (meters).
    pub softmin_temp: Real,
    /// Penetration samples along each capsule axis.
    pub samples_per_capsule: usize,
}

impl Default for ContactWeights {
    fn default() -> Self {
        Self {
            attract: 1.0,
            repel: 0.5,
            penetration: 10.0,
            contact_threshold: 0.4,
            repel_margin: 0.004,
            near_radius: 0.010,
            softmin_temp: 0.001,
            samples_per_capsule: 5,
        }
    }
}

/// Energy value, per-term breakdown and the gradient over the 26 hand
/// parameters.
#[derive(Debug, Clone)]
pub struct ContactEnergy {
    pub total: Real,
    pub attraction: Real,
    pub repulsion: Real,
    pub penetration: Real,
    pub gradient: DVector<Real>,
    /// Mean |distance| from contacted vertices to the capsule surface.
    pub mean_contacted_distance: Real,
    pub contacted_vertices: usize,
}

impl ContactEnergy {
    pub fn gradient_norm(&self) -> Real {
        self.gradient.norm()
    }
}

struct SoftMin {
    value: Real,
    /// Softmax weight per capsule.
    weights: Vec<Real>,
}

fn soft_min(distances: &[Real], temp: Real) -> SoftMin {
    let m = distances.iter().copied().fold(Real::INFINITY, Real::min);
    let mut weights: Vec<Real> = distances.iter().map(|d| (-(d - m) / temp).exp()).collect();
    let sum: Real = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    SoftMin { value: m - temp * sum.ln(), weights }
}

/// Evaluates the contact energy and its analytic gradient for a hand
/// configuration against a mesh posed in the same world frame.
pub fn contact_energy(
    skeleton: &HandSkeleton,
    params: &HandParams,
    proxy: &CapsuleProxy,
    mesh: &TriMesh,
    cmap: &ContactMap,
    weights: &ContactWeights,
) -> ContactEnergy {
    let fk = fk_jacobian(skeleton, params);
    let capsules = proxy.posed(&fk.joints, params.palm_scale);

    // Per-landmark Euclidean gradient, chained through the FK Jacobian
    // at the end.
    let mut g_lm = [Vec3::zeros(); NUM_LANDMARKS];
    let mut attraction = 0.0;
    let mut repulsion = 0.0;
    let mut penetration = 0.0;
    let mut contacted = 0usize;
    let mut contacted_dist_sum = 0.0;

    let mut distances = vec![0.0; capsules.len()];
    let mut params_t = vec![0.0; capsules.len()];
    let mut dirs = vec![Vec3::zeros(); capsules.len()];

    for (vi, v) in mesh.vertices().iter().enumerate() {
        for (ci, cap) in capsules.iter().enumerate() {
            let t = segment_parameter(v, &cap.a, &cap.b);
            let closest = cap.a + t * (cap.b - cap.a);
            let offset = closest - v;
            let len = offset.norm();
            distances[ci] = len - cap.radius;
            params_t[ci] = t;
            // Direction of increasing distance w.r.t. the capsule axis
            // point; undefined only when the vertex sits exactly on the
            // axis.
            dirs[ci] = if len > 1e-12 { offset / len } else { Vec3::zeros() };
        }
        let sm = soft_min(&distances, weights.softmin_temp);
        let d = sm.value;

        let coeff;
        if cmap.value(vi) >= weights.contact_threshold {
            attraction += d * d;
            contacted += 1;
            contacted_dist_sum += d.abs();
            coeff = weights.attract * 2.0 * d;
        } else if d < weights.near_radius {
            let viol = (weights.repel_margin - d).max(0.0);
            repulsion += viol * viol;
            coeff = -(weights.repel * 2.0 * viol);
        } else {
            continue;
        }
        if coeff == 0.0 {
            continue;
        }
        for ci in 0..capsules.len() {
            let w = sm.weights[ci];
            if w < 1e-300 {
                continue;
            }
            let grad_c = coeff * w * dirs[ci];
            g_lm[proxy.capsules()[ci].a] += (1.0 - params_t[ci]) * grad_c;
            g_lm[proxy.capsules()[ci].b] += params_t[ci] * grad_c;
        }
    }

    // Penetration: capsule-axis samples below the mesh surface by more
    // than the capsule radius.
    let n_samples = weights.samples_per_capsule.max(2);
    for (ci, cap) in capsules.iter().enumerate() {
        for si in 0..n_samples {
            let t = si as Real / (n_samples - 1) as Real;
            let s = cap.a + t * (cap.b - cap.a);
            let hit = mesh.closest_point(&s);
            let outward = s - hit.point;
            let sign = if outward.dot(&mesh.face_normal(hit.triangle)) >= 0.0 { 1.0 } else { -1.0 };
            let sd = sign * hit.distance - cap.radius;
            if sd >= 0.0 {
                continue;
            }
            penetration += sd * sd;
            let grad_dir = if hit.distance > 1e-12 {
                sign * (outward / hit.distance)
            } else {
                mesh.face_normal(hit.triangle)
            };
            let grad_s = weights.penetration * 2.0 * sd * grad_dir;
            g_lm[proxy.capsules()[ci].a] += (1.0 - t) * grad_s;
            g_lm[proxy.capsules()[ci].b] += t * grad_s;
        }
    }

    let mut g_flat = DVector::<Real>::zeros(3 * NUM_LANDMARKS);
    for (k, g) in g_lm.iter().enumerate() {
        g_flat[3 * k] = g.x;
        g_flat[3 * k + 1] = g.y;
        g_flat[3 * k + 2] = g.z;
    }
    let gradient = fk.jacobian.transpose() * g_flat;

    let total = weights.attract * attraction
        + weights.repel * repulsion
        + weights.penetration * penetration;
    ContactEnergy {
        total,
        attraction: weights.attract * attraction,
        repulsion: weights.repel * repulsion,
        penetration: weights.penetration * penetration,
        gradient,
        mean_contacted_distance: if contacted > 0 {
            contacted_dist_sum / contacted as Real
        } else {
            0.0
        },
        contacted_vertices: contacted,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefineConfig {
    pub max_iterations: usize,
    pub gradient_tol: Real,
    pub initial_step: Real,
    pub max_backtracks: usize,
    /// Relative energy decrease per accepted step below which progress
    /// counts as stalled.
    pub progress_tol: Real,
    /// Consecutive stalled steps after which the solve is declared
    /// converged (the energy has flat valleys where the gradient test
    /// alone is unreachable).
    pub progress_patience: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iterations: 400,
            gradient_tol: 1e-8,
            initial_step: 1e-2,
            max_backtracks: 60,
            progress_tol: 1e-5,
            progress_patience: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub params: HandParams,
    pub initial: ContactEnergy,
    pub final_energy: ContactEnergy,
    /// Energy after every accepted step.
    pub energies: Vec<Real>,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient descent with backtracking line search on the contact
/// energy over all 26 hand parameters. Joint limits are enforced by
/// projection before each candidate is evaluated, so accepted-step
/// energy is non-increasing and the output always satisfies the limits.
///
/// Converges when the gradient norm falls below the tolerance or no
/// projected descent step can reduce the energy (a numerically
/// stationary point); hitting the iteration cap instead flags the
/// best-so-far result as unconverged.
pub fn refine_grasp(
    skeleton: &HandSkeleton,
    init: &HandParams,
    proxy: &CapsuleProxy,
    mesh: &TriMesh,
    cmap: &ContactMap,
    weights: &ContactWeights,
    config: &RefineConfig,
) -> RefineResult {
    let mut params = *init;
    skeleton.clamp_angles(&mut params.angles);
    let initial = contact_energy(skeleton, &params, proxy, mesh, cmap, weights);
    let mut current = initial.clone();
    let mut energies = Vec::new();
    let mut step = config.initial_step;
    let mut converged = false;
    let mut iterations = 0;
    let mut stalled = 0usize;
    // Previous accepted step and gradient for the Barzilai–Borwein
    // trial step length; combined with the kinematic preconditioner
    // below it keeps the descent usable on this badly conditioned
    // energy (palm translation and distal angles differ by several
    // orders of magnitude in curvature). Monotone backtracking keeps
    // every accepted step a strict descent.
    let mut prev: Option<(DVector<Real>, DVector<Real>)> = None;

    for iter in 0..config.max_iterations {
        iterations = iter;
        if current.gradient_norm() < config.gradient_tol {
            converged = true;
            break;
        }

        // Diagonal preconditioner from the kinematic sensitivity of the
        // landmarks to each parameter.
        let fk = fk_jacobian(skeleton, &params);
        let mut precond = [0.0; NUM_HAND_PARAMS];
        for (col, p) in precond.iter_mut().enumerate() {
            let mut sum = 0.0;
            for row in 0..3 * NUM_LANDMARKS {
                sum += fk.jacobian[(row, col)] * fk.jacobian[(row, col)];
            }
            *p = sum.max(1e-6);
        }
        let direction: DVector<Real> = DVector::from_iterator(
            NUM_HAND_PARAMS,
            current.gradient.iter().zip(&precond).map(|(g, d)| g / d),
        );

        let trial = match &prev {
            Some((dx, g_old)) => {
                let dg = &current.gradient - g_old;
                let num = dx.dot(dx);
                let den = dx.dot(&dg);
                if den > 0.0 && num.is_finite() {
                    // Spectral step in the realized-step metric, mapped
                    // onto the preconditioned direction scale.
                    let bb = num / den;
                    let dir_scale = direction.norm() / current.gradient.norm().max(1e-300);
                    (bb / dir_scale.max(1e-300)).clamp(1e-12, 1e9)
                } else {
                    step * 2.0
                }
            }
            None => step,
        };

        let mut alpha = trial;
        let mut accepted = false;
        for _ in 0..config.max_backtracks {
            let delta: Vec<Real> = direction.iter().map(|p| -alpha * p).collect();
            debug_assert_eq!(delta.len(), NUM_HAND_PARAMS);
            let mut candidate = params.retract(&delta);
            skeleton.clamp_angles(&mut candidate.angles);
            let cand_energy = contact_energy(skeleton, &candidate, proxy, mesh, cmap, weights);
            if cand_energy.total < current.total {
                // Record the realized step (after limit projection) for
                // the next spectral estimate.
                let mut realized = DVector::<Real>::zeros(NUM_HAND_PARAMS);
                for i in 0..6 {
                    realized[i] = delta[i];
                }
                for a in 0..candidate.angles.len() {
                    realized[6 + a] = candidate.angles[a] - params.angles[a];
                }
                prev = Some((realized, current.gradient.clone()));
                let decrease = current.total - cand_energy.total;
                if decrease < config.progress_tol * cand_energy.total.max(1e-300) {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                params = candidate;
                current = cand_energy;
                energies.push(current.total);
                step = alpha;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || stalled >= config.progress_patience {
            // Either no projected step reduces the energy or progress
            // has flattened out: numerically stationary.
            converged = true;
            iterations = iter + 1;
            break;
        }
        iterations = iter + 1;
    }

    RefineResult { params, initial, final_energy: current, energies, iterations, converged }
}
