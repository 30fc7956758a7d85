//! Closed-form least-squares similarity alignment between corresponding
//! point sets, with the determinant-sign correction that excludes
//! reflections.

use nalgebra::{DMatrix, Matrix3};

use super::{GeomError, Mat3, Real, RigidTransform, SimilarityTransform, Vec3};

/// Relative threshold on the singular values of the centered source
/// matrix below which the configuration is rejected as degenerate.
const DEGENERACY_RATIO: Real = 1e-9;

/// Finds the similarity transform `T` minimizing `Σ ‖dst_i − T(src_i)‖²`.
///
/// Requires at least 3 correspondences and a source set whose centered
/// point matrix has full rank (the smallest two singular values must
/// each exceed `1e-9` times the largest); otherwise
/// [`GeomError::DegenerateConfiguration`] is returned and the caller
/// must skip the fit.
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3]) -> Result<SimilarityTransform, GeomError> {
    solve(src, dst, true)
}

/// Rigid variant of [`umeyama_align`]: scale is forced to 1.
pub fn umeyama_align_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform, GeomError> {
    let sim = solve(src, dst, false)?;
    Ok(RigidTransform::new(sim.rotation, sim.translation))
}

/// True when the centered point matrix is rank-deficient under the
/// alignment gate (fewer than 3 points, or a trailing singular value
/// below `1e-9` of the largest).
pub fn points_rank_deficient(points: &[Vec3]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let mean: Vec3 = points.iter().sum::<Vec3>() / points.len() as Real;
    let mut centered = DMatrix::<Real>::zeros(3, points.len());
    for (j, p) in points.iter().enumerate() {
        centered.set_column(j, &(p - mean));
    }
    let sv = centered.singular_values();
    let largest = sv.max();
    largest <= 0.0 || sv.iter().any(|&s| s <= DEGENERACY_RATIO * largest)
}

fn solve(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<SimilarityTransform, GeomError> {
    if src.len() != dst.len() {
        return Err(GeomError::DegenerateConfiguration(format!(
            "point count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(GeomError::DegenerateConfiguration(format!(
            "need at least 3 correspondences, got {n}"
        )));
    }

    let inv_n = 1.0 / n as Real;
    let src_mean: Vec3 = src.iter().sum::<Vec3>() * inv_n;
    let dst_mean: Vec3 = dst.iter().sum::<Vec3>() * inv_n;

    // Rank check on the centered source matrix.
    let mut centered = DMatrix::<Real>::zeros(3, n);
    for (j, p) in src.iter().enumerate() {
        centered.set_column(j, &(p - src_mean));
    }
    let sv = centered.singular_values();
    let largest = sv.max();
    if largest <= 0.0 || sv.iter().any(|&s| s <= DEGENERACY_RATIO * largest) {
        return Err(GeomError::DegenerateConfiguration(
            "source points are collinear or rank-deficient".into(),
        ));
    }

    let mut sigma = Mat3::zeros();
    let mut src_var = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - src_mean;
        let dc = d - dst_mean;
        sigma += dc * sc.transpose();
        src_var += sc.norm_squared();
    }
    sigma *= inv_n;
    src_var *= inv_n;

    let svd = sigma.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s_fix = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s_fix[(2, 2)] = -1.0;
    }
    let rotation = u * s_fix * v_t;

    let scale = if with_scale {
        let d = Vec3::new(svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]);
        let trace_ds = d.x * s_fix[(0, 0)] + d.y * s_fix[(1, 1)] + d.z * s_fix[(2, 2)];
        trace_ds / src_var
    } else {
        1.0
    };
    if scale <= 0.0 || !scale.is_finite() {
        return Err(GeomError::DegenerateConfiguration(format!(
            "alignment produced non-positive scale {scale}"
        )));
    }

    let translation = dst_mean - scale * (rotation * src_mean);
    Ok(SimilarityTransform { scale, rotation, translation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_exp;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tetrahedron() -> Vec<Vec3> {
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ]
    }

    fn max_residual(t: &SimilarityTransform, src: &[Vec3], dst: &[Vec3]) -> Real {
        src.iter()
            .zip(dst)
            .map(|(s, d)| (t.transform_point(s) - d).norm())
            .fold(0.0, Real::max)
    }

    #[test]
    fn identity_case() {
        let pts = tetrahedron();
        let t = umeyama_align(&pts, &pts).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!((t.rotation - Mat3::identity()).norm() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_constructed_similarity() {
        let src = tetrahedron();
        let rot = rotation_exp(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let truth = SimilarityTransform {
            scale: 2.0,
            rotation: rot,
            translation: Vec3::new(1.0, 2.0, 3.0),
        };
        let dst: Vec<Vec3> = src.iter().map(|p| truth.transform_point(p)).collect();
        let t = umeyama_align(&src, &dst).unwrap();
        assert!((t.scale - 2.0).abs() < 1e-9);
        assert!((t.rotation - rot).norm() < 1e-9);
        assert!((t.translation - truth.translation).norm() < 1e-9);
        assert!(max_residual(&t, &src, &dst) < 1e-9);
    }

    #[test]
    fn collinear_is_degenerate() {
        let src = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ];
        let err = umeyama_align(&src, &src);
        assert!(matches!(err, Err(GeomError::DegenerateConfiguration(_))));
    }

    #[test]
    fn too_few_points() {
        let src = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            umeyama_align(&src, &src),
            Err(GeomError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn rigid_variant_keeps_unit_scale() {
        let src = tetrahedron();
        let rot = rotation_exp(&Vec3::new(0.2, -0.1, 0.4));
        let t_true = RigidTransform::new(rot, Vec3::new(0.3, -0.2, 0.9));
        let dst: Vec<Vec3> = src.iter().map(|p| t_true.transform_point(p)).collect();
        let t = umeyama_align_rigid(&src, &dst).unwrap();
        assert!(t.rotation_angle_to(&t_true) < 1e-9);
        assert!(t.translation_distance_to(&t_true) < 1e-9);
    }

    proptest! {
        // Exactness: whenever dst is an exact similarity image of a
        // non-degenerate src, the recovered transform reproduces it.
        #[test]
        fn prop_exact_recovery(seed in 0u64..2000, n in 3usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut src: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(
                    rng.random::<Real>() * 2.0 - 1.0,
                    rng.random::<Real>() * 2.0 - 1.0,
                    rng.random::<Real>() * 2.0 - 1.0,
                ))
                .collect();
            // Guarantee rank 3 for small n by appending a tetrahedron.
            if n < 6 {
                src.extend(tetrahedron());
            }
            let axis = Vec3::new(
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
            ).normalize();
            let truth = SimilarityTransform {
                scale: 0.2 + 3.0 * rng.random::<Real>(),
                rotation: rotation_exp(&(axis * (rng.random::<Real>() * 3.0))),
                translation: Vec3::new(
                    rng.random::<Real>() * 4.0 - 2.0,
                    rng.random::<Real>() * 4.0 - 2.0,
                    rng.random::<Real>() * 4.0 - 2.0,
                ),
            };
            let dst: Vec<Vec3> = src.iter().map(|p| truth.transform_point(p)).collect();
            let t = umeyama_align(&src, &dst).unwrap();
            prop_assert!(max_residual(&t, &src, &dst) < 1e-9);
        }
    }
}
