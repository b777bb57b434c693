//! Area-weighted surface sampling and cloud normalization.

use crate::error::{Error, Result};
use crate::geometry::{cross3, norm3, sub3, MeshModel, PointCloud};
use crate::rng::SeededRng;

/// Gray value substituted when a mesh carries no vertex colors.
pub const TEXTURELESS_FILL: f64 = 0.8;

fn face_area_and_normal(mesh: &MeshModel, face: [usize; 3]) -> (f64, [f64; 3]) {
    let e1 = sub3(mesh.vertices[face[1]], mesh.vertices[face[0]]);
    let e2 = sub3(mesh.vertices[face[2]], mesh.vertices[face[0]]);
    let c = cross3(e1, e2);
    let n = norm3(c);
    if n < 1e-12 {
        return (0.0, [0.0, 0.0, 1.0]);
    }
    (0.5 * n, [c[0] / n, c[1] / n, c[2] / n])
}

/// Draw `n` points from the mesh surface. Faces are chosen with probability
/// proportional to area; positions are uniform in the chosen triangle via
/// square-root barycentric coordinates; each point inherits the unit face
/// normal and the barycentric blend of vertex colors (or the gray fill).
pub fn sample_surface(mesh: &MeshModel, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::Usage("sample_surface needs n >= 1".into()));
    }
    mesh.validate()?;
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut normals = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for &f in &mesh.faces {
        let (area, normal) = face_area_and_normal(mesh, f);
        total += area;
        cumulative.push(total);
        normals.push(normal);
    }
    if total <= 0.0 {
        return Err(Error::Data("mesh surface is entirely degenerate".into()));
    }

    let mut rng = SeededRng::new(SeededRng::derive(seed, "surface-sample"));
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.uniform() * total;
        // First face whose cumulative area exceeds the draw.
        let fi = cumulative.partition_point(|&c| c <= u).min(mesh.faces.len() - 1);
        let face = mesh.faces[fi];
        let su = rng.uniform().sqrt();
        let t = rng.uniform();
        let (a, b, c) = (1.0 - su, su * (1.0 - t), su * t);
        let v0 = mesh.vertices[face[0]];
        let v1 = mesh.vertices[face[1]];
        let v2 = mesh.vertices[face[2]];
        let pos = [
            a * v0[0] + b * v1[0] + c * v2[0],
            a * v0[1] + b * v1[1] + c * v2[1],
            a * v0[2] + b * v1[2] + c * v2[2],
        ];
        let color = match &mesh.colors {
            Some(cols) => {
                let c0 = cols[face[0]];
                let c1 = cols[face[1]];
                let c2 = cols[face[2]];
                [
                    (a * c0[0] + b * c1[0] + c * c2[0]).clamp(0.0, 1.0),
                    (a * c0[1] + b * c1[1] + c * c2[1]).clamp(0.0, 1.0),
                    (a * c0[2] + b * c1[2] + c * c2[2]).clamp(0.0, 1.0),
                ]
            }
            None => [TEXTURELESS_FILL; 3],
        };
        let nrm = normals[fi];
        points.push([
            pos[0], pos[1], pos[2], color[0], color[1], color[2], nrm[0], nrm[1], nrm[2],
        ]);
    }
    Ok(PointCloud { points })
}

/// Translate the centroid to the origin and scale so the farthest point sits
/// at distance 1 (no scaling when all points coincide). Colors and normals
/// pass through untouched.
pub fn normalize_cloud(pc: &PointCloud) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::Data("cannot normalize an empty cloud".into()));
    }
    let n = pc.len() as f64;
    let mut centroid = [0.0f64; 3];
    for p in &pc.points {
        centroid[0] += p[0];
        centroid[1] += p[1];
        centroid[2] += p[2];
    }
    centroid[0] /= n;
    centroid[1] /= n;
    centroid[2] /= n;

    let mut max_dist = 0.0f64;
    for p in &pc.points {
        let d = norm3([p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]]);
        max_dist = max_dist.max(d);
    }
    let scale = if max_dist < 1e-12 { 1.0 } else { 1.0 / max_dist };

    let points = pc
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            q[0] = (p[0] - centroid[0]) * scale;
            q[1] = (p[1] - centroid[1]) * scale;
            q[2] = (p[2] - centroid[2]) * scale;
            q
        })
        .collect();
    Ok(PointCloud { points })
}
