//! Posed-skeleton OBJ dump: landmarks with bone polylines plus the
//! capsule proxy as coarse tube meshes, for inspection in external
//! viewers.

use std::path::Path;

use crate::contact::CapsuleProxy;
use crate::geom::{Real, Vec3};
use crate::hand::{HandSkeleton, JointSet3D};

const TUBE_SIDES: usize = 8;

pub fn export_hand_obj(
    skeleton: &HandSkeleton,
    joints: &JointSet3D,
    proxy: &CapsuleProxy,
    scale: Real,
    path: &Path,
) -> std::io::Result<()> {
    let mut out = String::new();
    out.push_str("o landmarks\n");
    for p in &joints.points {
        out.push_str(&format!("v {:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    for (i, lm) in skeleton.landmarks().iter().enumerate() {
        if let Some(parent) = lm.parent {
            out.push_str(&format!("l {} {}\n", parent + 1, i + 1));
        }
    }

    out.push_str("o capsules\n");
    let mut vertex_base = joints.points.len();
    for cap in proxy.posed(joints, scale) {
        let axis = cap.b - cap.a;
        let len = axis.norm();
        if len < 1e-9 {
            continue;
        }
        let dir = axis / len;
        // Any frame perpendicular to the axis.
        let ref_axis =
            if dir.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
        let u = dir.cross(&ref_axis).normalize();
        let v = dir.cross(&u);
        for ring in [cap.a - dir * cap.radius * 0.0, cap.b + dir * cap.radius * 0.0] {
            for s in 0..TUBE_SIDES {
                let phi = 2.0 * std::f64::consts::PI * s as Real / TUBE_SIDES as Real;
                let p = ring + cap.radius * (phi.cos() * u + phi.sin() * v);
                out.push_str(&format!("v {:?} {:?} {:?}\n", p.x, p.y, p.z));
            }
        }
        for s in 0..TUBE_SIDES {
            let a0 = vertex_base + s + 1;
            let a1 = vertex_base + (s + 1) % TUBE_SIDES + 1;
            let b0 = vertex_base + TUBE_SIDES + s + 1;
            let b1 = vertex_base + TUBE_SIDES + (s + 1) % TUBE_SIDES + 1;
            out.push_str(&format!("f {a0} {a1} {b1}\n"));
            out.push_str(&format!("f {a0} {b1} {b0}\n"));
        }
        vertex_base += 2 * TUBE_SIDES;
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::TriMesh;
    use crate::hand::{forward_kinematics, HandParams};

    #[test]
    fn export_produces_loadable_obj() {
        let skel = HandSkeleton::default_template();
        let joints = forward_kinematics(&skel, &HandParams::rest());
        let proxy = CapsuleProxy::from_skeleton(&skel);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hand.obj");
        export_hand_obj(&skel, &joints, &proxy, 1.0, &path).unwrap();
        // The capsule tubes alone form a valid triangle mesh; the `l`
        // polylines are ignored by the loader.
        let mesh = TriMesh::from_file(&path).unwrap();
        assert!(mesh.triangles().len() >= 21 * TUBE_SIDES);
    }
}
