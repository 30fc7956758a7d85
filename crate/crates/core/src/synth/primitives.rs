//! Procedural test meshes with exact analytic signed distances: an
//! icosphere and a grid-subdivided box.

use std::collections::HashMap;

use crate::contact::TriMesh;
use crate::geom::{Real, Vec3};

/// Icosphere of the given radius; `subdivisions` quadruples the face
/// count each level (level 3 gives 1280 triangles).
pub fn sphere_mesh(radius: Real, subdivisions: u32) -> TriMesh {
    let t = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoints.entry(key).or_insert_with(|| {
                    vertices.push((vertices[a] + vertices[b]).normalize());
                    vertices.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }

    let vertices = vertices.into_iter().map(|v| v * radius).collect();
    TriMesh::new(vertices, faces).expect("icosphere is a valid mesh")
}

/// Axis-aligned box centered at the origin with extents `(w, h, d)`,
/// each face subdivided into an `n`×`n` grid (outward winding).
pub fn box_mesh(w: Real, h: Real, d: Real, n: usize) -> TriMesh {
    let (a, b, c) = (w / 2.0, h / 2.0, d / 2.0);
    // (corner, u edge, v edge) per face, with u × v pointing outward.
    let faces: [(Vec3, Vec3, Vec3); 6] = [
        (Vec3::new(a, -b, -c), Vec3::new(0.0, 2.0 * b, 0.0), Vec3::new(0.0, 0.0, 2.0 * c)),
        (Vec3::new(-a, -b, -c), Vec3::new(0.0, 0.0, 2.0 * c), Vec3::new(0.0, 2.0 * b, 0.0)),
        (Vec3::new(-a, b, -c), Vec3::new(0.0, 0.0, 2.0 * c), Vec3::new(2.0 * a, 0.0, 0.0)),
        (Vec3::new(-a, -b, -c), Vec3::new(2.0 * a, 0.0, 0.0), Vec3::new(0.0, 0.0, 2.0 * c)),
        (Vec3::new(-a, -b, c), Vec3::new(2.0 * a, 0.0, 0.0), Vec3::new(0.0, 2.0 * b, 0.0)),
        (Vec3::new(-a, -b, -c), Vec3::new(0.0, 2.0 * b, 0.0), Vec3::new(2.0 * a, 0.0, 0.0)),
    ];
    let n = n.max(1);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (corner, u, v) in faces {
        let base = vertices.len();
        for i in 0..=n {
            for j in 0..=n {
                vertices.push(corner + u * (i as Real / n as Real) + v * (j as Real / n as Real));
            }
        }
        let at = |i: usize, j: usize| base + i * (n + 1) + j;
        for i in 0..n {
            for j in 0..n {
                triangles.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
                triangles.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
            }
        }
    }
    TriMesh::new(vertices, triangles).expect("box grid is a valid mesh")
}
