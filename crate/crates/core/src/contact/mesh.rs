//! Triangle meshes with a bounding-volume tree for nearest-point
//! queries, plus ASCII OBJ/OFF loading and writing.

use rand::Rng;

use super::ContactError;
use crate::geom::{Real, RigidTransform, Vec3};

/// Triangles with area below this threshold are dropped at load time.
const MIN_TRIANGLE_AREA: Real = 1e-14;

const LEAF_SIZE: usize = 8;

/// An indexed triangle mesh in meters. Vertex normals and the spatial
/// index are precomputed; the mesh is immutable afterwards and cheap to
/// share between threads.
#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    face_normals: Vec<Vec3>,
    vertex_normals: Vec<Vec3>,
    bvh: Bvh,
}

/// Result of a nearest-surface query.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceHit {
    pub point: Vec3,
    pub triangle: usize,
    pub distance: Real,
}

impl TriMesh {
    /// Builds a mesh, dropping degenerate triangles and precomputing
    /// normals and the spatial index.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self, ContactError> {
        if vertices.is_empty() {
            return Err(ContactError::Mesh("mesh has no vertices".into()));
        }
        for (i, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(ContactError::Mesh(format!("vertex {i} is not finite")));
            }
        }
        let mut kept = Vec::with_capacity(triangles.len());
        for (i, t) in triangles.iter().enumerate() {
            if t.iter().any(|&ix| ix >= vertices.len()) {
                return Err(ContactError::Mesh(format!("triangle {i} index out of range")));
            }
            let area2 = (vertices[t[1]] - vertices[t[0]])
                .cross(&(vertices[t[2]] - vertices[t[0]]))
                .norm();
            if area2 * 0.5 > MIN_TRIANGLE_AREA {
                kept.push(*t);
            }
        }
        if kept.is_empty() {
            return Err(ContactError::Mesh("mesh has no non-degenerate triangles".into()));
        }

        let face_normals: Vec<Vec3> = kept
            .iter()
            .map(|t| {
                (vertices[t[1]] - vertices[t[0]])
                    .cross(&(vertices[t[2]] - vertices[t[0]]))
                    .normalize()
            })
            .collect();
        let mut vertex_normals = vec![Vec3::zeros(); vertices.len()];
        for (t, _) in kept.iter().zip(&face_normals) {
            // Area weighting: accumulate the unnormalized face normal.
            let n = (vertices[t[1]] - vertices[t[0]]).cross(&(vertices[t[2]] - vertices[t[0]]));
            for &ix in t {
                vertex_normals[ix] += n;
            }
        }
        for n in &mut vertex_normals {
            let len = n.norm();
            if len > 1e-20 {
                *n /= len;
            }
        }
        let bvh = Bvh::build(&vertices, &kept);
        Ok(Self { vertices, triangles: kept, face_normals, vertex_normals, bvh })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn face_normal(&self, triangle: usize) -> Vec3 {
        self.face_normals[triangle]
    }

    pub fn vertex_normals(&self) -> &[Vec3] {
        &self.vertex_normals
    }

    /// Rigidly transformed copy (normals and index rebuilt).
    pub fn transformed(&self, pose: &RigidTransform) -> TriMesh {
        let vertices = self.vertices.iter().map(|v| pose.transform_point(v)).collect();
        TriMesh::new(vertices, self.triangles.clone()).expect("transform preserves validity")
    }

    /// Closest point on the mesh surface to `p`.
    pub fn closest_point(&self, p: &Vec3) -> SurfaceHit {
        self.bvh.closest_point(&self.vertices, &self.triangles, p)
    }

    /// Distance to the surface with sign taken from the nearest
    /// triangle's normal: negative inside. Meshes need not be
    /// watertight; the sign is only as consistent as the local surface
    /// orientation.
    pub fn signed_distance(&self, p: &Vec3) -> Real {
        let hit = self.closest_point(p);
        let dir = p - hit.point;
        if dir.dot(&self.face_normals[hit.triangle]) >= 0.0 {
            hit.distance
        } else {
            -hit.distance
        }
    }

    /// Uniform area-weighted surface samples, deterministic for a fixed
    /// generator state.
    pub fn sample_surface<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in &self.triangles {
            let area = 0.5
                * (self.vertices[t[1]] - self.vertices[t[0]])
                    .cross(&(self.vertices[t[2]] - self.vertices[t[0]]))
                    .norm();
            total += area;
            cumulative.push(total);
        }
        (0..n)
            .map(|_| {
                let pick = rng.random::<Real>() * total;
                let ti = cumulative.partition_point(|&c| c < pick).min(self.triangles.len() - 1);
                let t = &self.triangles[ti];
                let (mut u, mut v) = (rng.random::<Real>(), rng.random::<Real>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                self.vertices[t[0]]
                    + u * (self.vertices[t[1]] - self.vertices[t[0]])
                    + v * (self.vertices[t[2]] - self.vertices[t[0]])
            })
            .collect()
    }

    /// Parses ASCII OBJ (`v`/`f` records) or OFF by content sniffing.
    pub fn from_text(text: &str) -> Result<Self, ContactError> {
        if text.trim_start().starts_with("OFF") {
            Self::from_off(text)
        } else {
            Self::from_obj(text)
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ContactError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ContactError::Mesh(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    fn from_obj(text: &str) -> Result<Self, ContactError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("v") => {
                    let coords: Vec<Real> = tok
                        .take(3)
                        .map(|t| t.parse::<Real>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| {
                            ContactError::Mesh(format!("bad vertex at line {}", line_no + 1))
                        })?;
                    if coords.len() != 3 {
                        return Err(ContactError::Mesh(format!(
                            "vertex needs 3 coordinates at line {}",
                            line_no + 1
                        )));
                    }
                    vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<usize> = tok
                        .map(|t| {
                            let first = t.split('/').next().unwrap_or(t);
                            first.parse::<i64>().map_err(|_| {
                                ContactError::Mesh(format!("bad face at line {}", line_no + 1))
                            })
                        })
                        .collect::<Result<Vec<i64>, _>>()?
                        .into_iter()
                        .map(|i| {
                            if i > 0 {
                                (i - 1) as usize
                            } else {
                                (vertices.len() as i64 + i) as usize
                            }
                        })
                        .collect();
                    if idx.len() < 3 {
                        return Err(ContactError::Mesh(format!(
                            "face needs at least 3 vertices at line {}",
                            line_no + 1
                        )));
                    }
                    // Fan-triangulate polygons.
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }

    fn from_off(text: &str) -> Result<Self, ContactError> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .into_iter();
        let magic = tokens.next().unwrap_or_default();
        if magic != "OFF" {
            return Err(ContactError::Mesh("missing OFF header".into()));
        }
        let mut next_num = || {
            tokens
                .next()
                .and_then(|t| t.parse::<Real>().ok())
                .ok_or_else(|| ContactError::Mesh("truncated OFF file".into()))
        };
        let nv = next_num()? as usize;
        let nf = next_num()? as usize;
        let _ne = next_num()?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (x, y, z) = (next_num()?, next_num()?, next_num()?);
            vertices.push(Vec3::new(x, y, z));
        }
        let mut triangles = Vec::with_capacity(nf);
        for _ in 0..nf {
            let k = next_num()? as usize;
            let idx: Vec<usize> =
                (0..k).map(|_| next_num().map(|v| v as usize)).collect::<Result<_, _>>()?;
            for i in 1..idx.len() - 1 {
                triangles.push([idx[0], idx[i], idx[i + 1]]);
            }
        }
        Self::new(vertices, triangles)
    }

    /// ASCII OBJ serialization.
    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            out.push_str(&format!("v {:?} {:?} {:?}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        out
    }
}

/// Closest point on triangle `abc` to `p` (Ericson's region method).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + v * ab;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + w * ac;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + w * (c - b);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[derive(Debug, Clone)]
struct Bvh {
    nodes: Vec<BvhNode>,
    /// Triangle indices, permuted so each leaf owns a contiguous range.
    order: Vec<usize>,
}

#[derive(Debug, Clone)]
struct BvhNode {
    min: Vec3,
    max: Vec3,
    /// Leaf: (start, count) into `order`. Inner: children ids.
    kind: NodeKind,
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

impl Bvh {
    fn build(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Self {
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        let centroids: Vec<Vec3> = triangles
            .iter()
            .map(|t| (vertices[t[0]] + vertices[t[1]] + vertices[t[2]]) / 3.0)
            .collect();
        let mut nodes = Vec::new();
        build_node(vertices, triangles, &centroids, &mut order, 0, triangles.len(), &mut nodes);
        Self { nodes, order }
    }

    fn closest_point(&self, vertices: &[Vec3], triangles: &[[usize; 3]], p: &Vec3) -> SurfaceHit {
        let mut best = SurfaceHit { point: *p, triangle: usize::MAX, distance: Real::INFINITY };
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if aabb_distance_sq(&node.min, &node.max, p) >= best.distance * best.distance {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &ti in &self.order[start..start + count] {
                        let t = &triangles[ti];
                        let q = closest_point_on_triangle(
                            p,
                            &vertices[t[0]],
                            &vertices[t[1]],
                            &vertices[t[2]],
                        );
                        let d = (p - q).norm();
                        if d < best.distance {
                            best = SurfaceHit { point: q, triangle: ti, distance: d };
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    // Visit the closer child first for tighter pruning.
                    let dl = aabb_distance_sq(&self.nodes[left].min, &self.nodes[left].max, p);
                    let dr = aabb_distance_sq(&self.nodes[right].min, &self.nodes[right].max, p);
                    if dl < dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best
    }
}

fn build_node(
    vertices: &[Vec3],
    triangles: &[[usize; 3]],
    centroids: &[Vec3],
    order: &mut [usize],
    start: usize,
    count: usize,
    nodes: &mut Vec<BvhNode>,
) -> usize {
    let slice = &order[start..start + count];
    let mut min = Vec3::repeat(Real::INFINITY);
    let mut max = Vec3::repeat(Real::NEG_INFINITY);
    for &ti in slice {
        for &vi in &triangles[ti] {
            min = min.inf(&vertices[vi]);
            max = max.sup(&vertices[vi]);
        }
    }
    let id = nodes.len();
    nodes.push(BvhNode { min, max, kind: NodeKind::Leaf { start, count } });
    if count <= LEAF_SIZE {
        return id;
    }
    // Median split on the widest centroid axis.
    let mut cmin = Vec3::repeat(Real::INFINITY);
    let mut cmax = Vec3::repeat(Real::NEG_INFINITY);
    for &ti in &order[start..start + count] {
        cmin = cmin.inf(&centroids[ti]);
        cmax = cmax.sup(&centroids[ti]);
    }
    let extent = cmax - cmin;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = count / 2;
    order[start..start + count].select_nth_unstable_by(mid, |&a, &b| {
        centroids[a][axis].partial_cmp(&centroids[b][axis]).unwrap()
    });
    let left = build_node(vertices, triangles, centroids, order, start, mid, nodes);
    let right = build_node(vertices, triangles, centroids, order, start + mid, count - mid, nodes);
    nodes[id].kind = NodeKind::Inner { left, right };
    id
}

fn aabb_distance_sq(min: &Vec3, max: &Vec3, p: &Vec3) -> Real {
    let mut d = 0.0;
    for i in 0..3 {
        let c = p[i].clamp(min[i], max[i]);
        d += (p[i] - c) * (p[i] - c);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{box_mesh, sphere_mesh};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closest_point_on_triangle_regions() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(0.0, 1.0, 0.0);
        // Interior projection.
        let q = closest_point_on_triangle(&Vec3::new(0.2, 0.2, 1.0), &a, &b, &c);
        assert!((q - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        // Vertex region.
        let q = closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c);
        assert!((q - a).norm() < 1e-15);
        // Edge region.
        let q = closest_point_on_triangle(&Vec3::new(0.5, -1.0, 0.0), &a, &b, &c);
        assert!((q - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn sphere_distance_matches_analytic() {
        let mesh = sphere_mesh(0.06, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let dir = Vec3::new(
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
                rng.random::<Real>() - 0.5,
            )
            .normalize();
            let r = 0.001 + 0.2 * rng.random::<Real>();
            let p = dir * r;
            let sd = mesh.signed_distance(&p);
            // Icosphere level 3 underestimates the radius by < 0.5 mm.
            assert!(
                (sd - (r - 0.06)).abs() < 7e-4,
                "sd {sd} vs analytic {} at r {r}",
                r - 0.06
            );
        }
    }

    #[test]
    fn box_distance_matches_analytic_outside() {
        let (w, h, d) = (0.1, 0.1, 0.1);
        let mesh = box_mesh(w, h, d, 4);
        let analytic = |p: &Vec3| -> Real {
            let q = Vec3::new(p.x.abs() - w / 2.0, p.y.abs() - h / 2.0, p.z.abs() - d / 2.0);
            let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
            let inside = q.x.max(q.y).max(q.z).min(0.0);
            outside + inside
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let p = Vec3::new(
                (rng.random::<Real>() - 0.5) * 0.3,
                (rng.random::<Real>() - 0.5) * 0.3,
                (rng.random::<Real>() - 0.5) * 0.3,
            );
            let sd = mesh.signed_distance(&p);
            let truth = analytic(&p);
            // The ±facet tessellation is exact for a box.
            assert!((sd - truth).abs() < 1e-9, "sd {sd} vs analytic {truth} at {p:?}");
        }
    }

    #[test]
    fn bvh_agrees_with_brute_force() {
        let mesh = sphere_mesh(0.06, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = Vec3::new(
                (rng.random::<Real>() - 0.5) * 0.3,
                (rng.random::<Real>() - 0.5) * 0.3,
                (rng.random::<Real>() - 0.5) * 0.3,
            );
            let hit = mesh.closest_point(&p);
            let mut brute = Real::INFINITY;
            for t in mesh.triangles() {
                let q = closest_point_on_triangle(
                    &p,
                    &mesh.vertices()[t[0]],
                    &mesh.vertices()[t[1]],
                    &mesh.vertices()[t[2]],
                );
                brute = brute.min((p - q).norm());
            }
            assert!((hit.distance - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn obj_roundtrip() {
        let mesh = box_mesh(0.1, 0.08, 0.06, 2);
        let text = mesh.to_obj();
        let back = TriMesh::from_text(&text).unwrap();
        assert_eq!(mesh.vertices().len(), back.vertices().len());
        assert_eq!(mesh.triangles().len(), back.triangles().len());
        for (a, b) in mesh.vertices().iter().zip(back.vertices()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn off_parsing() {
        let text = "OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 2 3\n";
        let mesh = TriMesh::from_text(text).unwrap();
        assert_eq!(mesh.vertices().len(), 4);
        assert_eq!(mesh.triangles().len(), 2);
    }

    #[test]
    fn degenerate_triangles_filtered() {
        let vertices = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let triangles = vec![[0, 1, 2], [0, 1, 1]];
        let mesh = TriMesh::new(vertices, triangles).unwrap();
        assert_eq!(mesh.triangles().len(), 1);
    }

    #[test]
    fn sampling_stays_on_surface() {
        let mesh = sphere_mesh(0.06, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in mesh.sample_surface(500, &mut rng) {
            assert!(mesh.closest_point(&p).distance < 1e-12);
        }
    }
}
