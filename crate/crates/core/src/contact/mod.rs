//! Object-side geometry: ICP pose estimation, grasp-adjustment
//! estimation and contact-map-driven grasp refinement.

use thiserror::Error;

use crate::geom::{GeomError, Real, Vec3};
use crate::hand::{CapsuleSpec, HandSkeleton, JointSet3D};

mod energy;
mod icp;
mod mesh;

pub use energy::{
    contact_energy, refine_grasp, ContactEnergy, ContactWeights, RefineConfig, RefineResult,
};
pub use icp::{estimate_adjustment, icp_register, IcpConfig, IcpResult};
pub use mesh::{closest_point_on_triangle, SurfaceHit, TriMesh};

/// Minimum cloud size accepted by the registration routines.
pub const MIN_REGISTRATION_POINTS: usize = 100;

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("point cloud too small: {size} points, registration needs {min}")]
    CloudTooSmall { size: usize, min: usize },
    #[error("ill-conditioned correspondences: {0}")]
    IllConditioned(String),
    #[error("contact map has {got} values for {expected} vertices")]
    ContactMapMismatch { got: usize, expected: usize },
    #[error("contact map: {0}")]
    ContactMap(String),
    #[error("point cloud: {0}")]
    Cloud(String),
}

impl From<GeomError> for ContactError {
    fn from(e: GeomError) -> Self {
        ContactError::IllConditioned(e.to_string())
    }
}

/// Per-vertex contact values in `[0, 1]`, aligned to a mesh's vertices.
#[derive(Debug, Clone)]
pub struct ContactMap {
    values: Vec<Real>,
}

impl ContactMap {
    /// Validates the value count against the mesh and clamps into
    /// `[0, 1]`.
    pub fn new(values: Vec<Real>, mesh: &TriMesh) -> Result<Self, ContactError> {
        if values.len() != mesh.vertices().len() {
            return Err(ContactError::ContactMapMismatch {
                got: values.len(),
                expected: mesh.vertices().len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ContactError::ContactMap("non-finite contact value".into()));
        }
        Ok(Self { values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() })
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn value(&self, vertex: usize) -> Real {
        self.values[vertex]
    }

    /// Parses the sidecar format: one value per line, line i for
    /// vertex i.
    pub fn from_text(text: &str, mesh: &TriMesh) -> Result<Self, ContactError> {
        let values: Vec<Real> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.parse::<Real>()
                    .map_err(|_| ContactError::ContactMap(format!("bad value `{l}`")))
            })
            .collect::<Result<_, _>>()?;
        Self::new(values, mesh)
    }

    pub fn from_file(path: &std::path::Path, mesh: &TriMesh) -> Result<Self, ContactError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ContactError::ContactMap(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_text(&text, mesh)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 8);
        for v in &self.values {
            out.push_str(&format!("{v:?}\n"));
        }
        out
    }
}

/// A 3D point cloud in the sensor/world frame, meters.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, ContactError> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(ContactError::Cloud("non-finite point".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &crate::geom::RigidTransform) -> Self {
        Self { points: self.points.iter().map(|p| pose.transform_point(p)).collect() }
    }

    /// Parses ASCII `x y z` lines.
    pub fn from_text(text: &str) -> Result<Self, ContactError> {
        let mut points = Vec::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let coords: Vec<Real> = line
                .split_whitespace()
                .map(|t| t.parse::<Real>())
                .collect::<Result<_, _>>()
                .map_err(|_| ContactError::Cloud(format!("bad point at line {}", line_no + 1)))?;
            if coords.len() != 3 {
                return Err(ContactError::Cloud(format!(
                    "expected 3 coordinates at line {}",
                    line_no + 1
                )));
            }
            points.push(Vec3::new(coords[0], coords[1], coords[2]));
        }
        Self::new(points)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ContactError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ContactError::Cloud(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 24);
        for p in &self.points {
            out.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
        }
        out
    }
}

/// Capsule collision proxy for the hand: endpoints track skeleton
/// landmarks, so the posed capsules follow forward kinematics.
#[derive(Debug, Clone)]
pub struct CapsuleProxy {
    capsules: Vec<CapsuleSpec>,
}

/// A posed capsule: world-space segment plus radius.
#[derive(Debug, Clone, Copy)]
pub struct PosedCapsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: Real,
}

impl CapsuleProxy {
    pub fn from_skeleton(skeleton: &HandSkeleton) -> Self {
        Self { capsules: skeleton.capsules().to_vec() }
    }

    pub fn capsules(&self) -> &[CapsuleSpec] {
        &self.capsules
    }

    /// Binds the capsule endpoints to posed landmarks. Radii scale with
    /// `scale` so the proxy tracks the identity-scaled hand.
    pub fn posed(&self, joints: &JointSet3D, scale: Real) -> Vec<PosedCapsule> {
        self.capsules
            .iter()
            .map(|c| PosedCapsule { a: joints[c.a], b: joints[c.b], radius: c.radius * scale })
            .collect()
    }
}

/// Closest point on segment `ab` to `p`, returned as the interpolation
/// parameter `t` in `[0, 1]`.
pub(crate) fn segment_parameter(p: &Vec3, a: &Vec3, b: &Vec3) -> Real {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= 0.0 {
        return 0.0;
    }
    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
}

/// Signed distance from `p` to a capsule surface (negative inside).
pub fn capsule_distance(p: &Vec3, capsule: &PosedCapsule) -> Real {
    let t = segment_parameter(p, &capsule.a, &capsule.b);
    let closest = capsule.a + t * (capsule.b - capsule.a);
    (p - closest).norm() - capsule.radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sphere_mesh;

    #[test]
    fn contact_map_validates_length() {
        let mesh = sphere_mesh(0.06, 1);
        let n = mesh.vertices().len();
        assert!(ContactMap::new(vec![0.5; n], &mesh).is_ok());
        assert!(matches!(
            ContactMap::new(vec![0.5; n - 1], &mesh),
            Err(ContactError::ContactMapMismatch { .. })
        ));
    }

    #[test]
    fn contact_map_clamps_and_roundtrips() {
        let mesh = sphere_mesh(0.06, 1);
        let n = mesh.vertices().len();
        let mut values = vec![0.25; n];
        values[0] = 1.5;
        values[1] = -0.2;
        let map = ContactMap::new(values, &mesh).unwrap();
        assert_eq!(map.value(0), 1.0);
        assert_eq!(map.value(1), 0.0);
        let back = ContactMap::from_text(&map.to_text(), &mesh).unwrap();
        assert_eq!(map.values(), back.values());
    }

    #[test]
    fn cloud_text_roundtrip() {
        let cloud =
            PointCloud::new(vec![Vec3::new(0.1, -0.2, 0.3), Vec3::new(1.5, 2.5, -3.5)]).unwrap();
        let back = PointCloud::from_text(&cloud.to_text()).unwrap();
        assert_eq!(cloud.points(), back.points());
    }

    #[test]
    fn capsule_distance_signs() {
        let cap = PosedCapsule {
            a: Vec3::new(0.0, 0.0, 0.0),
            b: Vec3::new(1.0, 0.0, 0.0),
            radius: 0.1,
        };
        assert!((capsule_distance(&Vec3::new(0.5, 0.3, 0.0), &cap) - 0.2).abs() < 1e-15);
        assert!((capsule_distance(&Vec3::new(0.5, 0.05, 0.0), &cap) + 0.05).abs() < 1e-15);
        assert!((capsule_distance(&Vec3::new(1.2, 0.0, 0.0), &cap) - 0.1).abs() < 1e-15);
    }
}
