//! Reprojection residual blocks shared by registration, bundle
//! adjustment and the joint hand+camera solve.

use nalgebra::{Matrix2x3, Matrix2x6, Vector2};

use crate::geom::{CameraIntrinsics, PixelPoint, Real, RigidTransform, Vec3, MIN_PROJECTION_DEPTH};

/// Linearization of one observation at the current state.
///
/// `residual` is `observed − projected` in pixels; the Jacobians are of
/// the *projection* with respect to the 3D point and the camera tangent
/// `[dt, omega]` (left-multiplied rotation update), so solvers form
/// normal equations `JᵀWJ δ = JᵀW r` and step `+δ`.
pub struct ProjectionBlocks {
    pub residual: Vector2<Real>,
    pub j_point: Matrix2x3<Real>,
    pub j_camera: Matrix2x6<Real>,
}

/// Returns `None` when the point fails the cheirality check for this
/// camera; the caller must drop the observation.
pub fn projection_blocks(
    x_world: &Vec3,
    camera_pose: &RigidTransform,
    observed: &PixelPoint,
    k: &CameraIntrinsics,
) -> Option<ProjectionBlocks> {
    let r_wc = camera_pose.rotation();
    let center = camera_pose.translation();
    let v = x_world - center;
    let q = r_wc.transpose() * v;
    if q.z <= MIN_PROJECTION_DEPTH {
        return None;
    }

    let inv_z = 1.0 / q.z;
    let proj_u = k.fx * q.x * inv_z + k.cx;
    let proj_v = k.fy * q.y * inv_z + k.cy;
    let residual = Vector2::new(observed.u - proj_u, observed.v - proj_v);

    // d(pixel)/d(camera-frame point)
    let dp_dq = Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * q.x * inv_z * inv_z,
        0.0,
        k.fy * inv_z,
        -k.fy * q.y * inv_z * inv_z,
    );

    let rt = r_wc.transpose();
    let j_point = dp_dq * rt;

    // Camera tangent [dt, omega]: q = exp(-omega) Rᵀ (x - t - dt)
    // linearized at zero gives dq/dt = -Rᵀ and dq/domega = Rᵀ skew(v).
    let mut j_camera = Matrix2x6::zeros();
    let dq_dt = -rt;
    let dq_dw = rt * crate::geom::skew(&v);
    j_camera.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dp_dq * dq_dt));
    j_camera.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dp_dq * dq_dw));

    Some(ProjectionBlocks { residual, j_point, j_camera })
}

/// Huber cost of a residual norm: quadratic inside the width, linear
/// outside.
pub(crate) fn huber_cost(norm: Real, width: Real) -> Real {
    if norm <= width {
        norm * norm
    } else {
        2.0 * width * norm - width * width
    }
}

/// IRLS weight so that `w·norm²` has the Huber gradient scale.
pub(crate) fn robust_weight(norm: Real, width: Real) -> Real {
    if norm <= width {
        1.0
    } else {
        width / norm
    }
}
