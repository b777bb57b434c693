//! Procedural triangle-mesh generators for the six synthetic shape
//! families, with per-object seeded deformations and per-class colors.

use std::f64::consts::PI;

use crate::geometry::MeshModel;
use crate::rng::SeededRng;

/// The six procedural families. Class k of a dataset uses `ALL[k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Box,
    Ellipsoid,
    Cylinder,
    Cone,
    Torus,
    LBracket,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Box,
        ShapeFamily::Ellipsoid,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Torus,
        ShapeFamily::LBracket,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Box => "box",
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
            ShapeFamily::LBracket => "l-bracket",
        }
    }

    pub fn from_name(name: &str) -> Option<ShapeFamily> {
        ShapeFamily::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Base RGB of the family's color scheme.
    pub fn base_color(self) -> [f64; 3] {
        match self {
            ShapeFamily::Box => [0.85, 0.25, 0.20],
            ShapeFamily::Ellipsoid => [0.25, 0.75, 0.30],
            ShapeFamily::Cylinder => [0.20, 0.35, 0.85],
            ShapeFamily::Cone => [0.90, 0.80, 0.20],
            ShapeFamily::Torus => [0.65, 0.30, 0.80],
            ShapeFamily::LBracket => [0.30, 0.75, 0.80],
        }
    }
}

/// Append an axis-aligned cuboid spanning `min..max` with outward faces.
fn push_cuboid(vertices: &mut Vec<[f64; 3]>, faces: &mut Vec<[usize; 3]>, min: [f64; 3], max: [f64; 3]) {
    let base = vertices.len();
    let [x0, y0, z0] = min;
    let [x1, y1, z1] = max;
    vertices.extend_from_slice(&[
        [x0, y0, z0],
        [x1, y0, z0],
        [x1, y1, z0],
        [x0, y1, z0],
        [x0, y0, z1],
        [x1, y0, z1],
        [x1, y1, z1],
        [x0, y1, z1],
    ]);
    let quads: [[usize; 4]; 6] = [
        [0, 3, 2, 1], // bottom, -z
        [4, 5, 6, 7], // top, +z
        [0, 1, 5, 4], // front, -y
        [2, 3, 7, 6], // back, +y
        [0, 4, 7, 3], // left, -x
        [1, 2, 6, 5], // right, +x
    ];
    for q in quads {
        faces.push([base + q[0], base + q[1], base + q[2]]);
        faces.push([base + q[0], base + q[2], base + q[3]]);
    }
}

fn box_mesh(rng: &mut SeededRng) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let a = rng.range(0.4, 0.9);
    let b = rng.range(0.3, 0.8);
    let c = rng.range(0.35, 1.0);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    push_cuboid(&mut vertices, &mut faces, [-a, -b, -c], [a, b, c]);
    (vertices, faces)
}

fn ellipsoid_mesh(rng: &mut SeededRng) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let rx = rng.range(0.5, 1.0);
    let ry = rng.range(0.4, 0.9);
    let rz = rng.range(0.45, 1.0);
    let stacks = 8;
    let slices = 12;
    let mut vertices = vec![[0.0, 0.0, rz]];
    for i in 1..stacks {
        let theta = PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let phi = 2.0 * PI * j as f64 / slices as f64;
            vertices.push([
                rx * theta.sin() * phi.cos(),
                ry * theta.sin() * phi.sin(),
                rz * theta.cos(),
            ]);
        }
    }
    let south = vertices.len();
    vertices.push([0.0, 0.0, -rz]);

    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + (j % slices);
    let mut faces = Vec::new();
    for j in 0..slices {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            let a = ring(i, j);
            let b = ring(i + 1, j);
            let c = ring(i + 1, j + 1);
            let d = ring(i, j + 1);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    for j in 0..slices {
        faces.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    (vertices, faces)
}

fn cylinder_mesh(rng: &mut SeededRng) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let r = rng.range(0.3, 0.6);
    let h = rng.range(0.5, 1.0);
    let slices = 16;
    let mut vertices = Vec::new();
    for &z in &[-h, h] {
        for j in 0..slices {
            let phi = 2.0 * PI * j as f64 / slices as f64;
            vertices.push([r * phi.cos(), r * phi.sin(), z]);
        }
    }
    let bottom_center = vertices.len();
    vertices.push([0.0, 0.0, -h]);
    let top_center = vertices.len();
    vertices.push([0.0, 0.0, h]);

    let mut faces = Vec::new();
    for j in 0..slices {
        let j1 = (j + 1) % slices;
        let (b0, b1) = (j, j1);
        let (t0, t1) = (slices + j, slices + j1);
        faces.push([b0, b1, t1]);
        faces.push([b0, t1, t0]);
        faces.push([bottom_center, b1, b0]);
        faces.push([top_center, t0, t1]);
    }
    (vertices, faces)
}

fn cone_mesh(rng: &mut SeededRng) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let r = rng.range(0.4, 0.8);
    let h = rng.range(0.8, 1.6);
    let slices = 16;
    let base_z = -h / 3.0;
    let mut vertices = Vec::new();
    for j in 0..slices {
        let phi = 2.0 * PI * j as f64 / slices as f64;
        vertices.push([r * phi.cos(), r * phi.sin(), base_z]);
    }
    let apex = vertices.len();
    vertices.push([0.0, 0.0, base_z + h]);
    let center = vertices.len();
    vertices.push([0.0, 0.0, base_z]);

    let mut faces = Vec::new();
    for j in 0..slices {
        let j1 = (j + 1) % slices;
        faces.push([j, j1, apex]);
        faces.push([center, j1, j]);
    }
    (vertices, faces)
}

fn torus_mesh(rng: &mut SeededRng) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let major = rng.range(0.6, 0.9);
    let minor = rng.range(0.15, 0.3);
    let rings = 12;
    let sides = 8;
    let mut vertices = Vec::with_capacity(rings * sides);
    for i in 0..rings {
        let u = 2.0 * PI * i as f64 / rings as f64;
        for j in 0..sides {
            let v = 2.0 * PI * j as f64 / sides as f64;
            let w = major + minor * v.cos();
            vertices.push([w * u.cos(), w * u.sin(), minor * v.sin()]);
        }
    }
    let at = |i: usize, j: usize| (i % rings) * sides + (j % sides);
    let mut faces = Vec::new();
    for i in 0..rings {
        for j in 0..sides {
            let a = at(i, j);
            let b = at(i + 1, j);
            let c = at(i + 1, j + 1);
            let d = at(i, j + 1);
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    (vertices, faces)
}

fn l_bracket_mesh(rng: &mut SeededRng) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let w = rng.range(0.5, 0.9);
    let t = rng.range(0.25, 0.45);
    let h = rng.range(1.0, 1.5);
    let d = rng.range(0.8, 1.3);
    let t2 = rng.range(0.25, 0.45);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    // Vertical arm along z, horizontal arm along y; they share the corner.
    push_cuboid(&mut vertices, &mut faces, [0.0, 0.0, 0.0], [w, t, h]);
    push_cuboid(&mut vertices, &mut faces, [0.0, 0.0, 0.0], [w, d, t2]);
    (vertices, faces)
}

/// Build one seeded mesh of the family: randomized proportions, a mild
/// anisotropic scale, vertex jitter, and the class color scheme with a
/// vertical brightness gradient plus a per-object tint.
pub fn build_shape(family: ShapeFamily, rng: &mut SeededRng) -> MeshModel {
    let (mut vertices, faces) = match family {
        ShapeFamily::Box => box_mesh(rng),
        ShapeFamily::Ellipsoid => ellipsoid_mesh(rng),
        ShapeFamily::Cylinder => cylinder_mesh(rng),
        ShapeFamily::Cone => cone_mesh(rng),
        ShapeFamily::Torus => torus_mesh(rng),
        ShapeFamily::LBracket => l_bracket_mesh(rng),
    };

    // Wide per-object ranges keep objects within a family clearly apart,
    // which the retrieval benchmark depends on.
    let scale = [rng.range(0.6, 1.5), rng.range(0.6, 1.5), rng.range(0.6, 1.5)];
    for v in vertices.iter_mut() {
        for a in 0..3 {
            v[a] *= scale[a];
        }
    }
    let jitter = 0.05;
    for v in vertices.iter_mut() {
        for a in 0..3 {
            v[a] += rng.range(-jitter, jitter);
        }
    }

    let (mut z_lo, mut z_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in &vertices {
        z_lo = z_lo.min(v[2]);
        z_hi = z_hi.max(v[2]);
    }
    let span = (z_hi - z_lo).max(1e-9);
    let base = family.base_color();
    let tint = [
        rng.range(0.55, 1.25),
        rng.range(0.55, 1.25),
        rng.range(0.55, 1.25),
    ];
    let colors = vertices
        .iter()
        .map(|v| {
            let s = (v[2] - z_lo) / span;
            let level = 0.75 + 0.25 * s;
            [
                (base[0] * tint[0] * level).clamp(0.0, 1.0),
                (base[1] * tint[1] * level).clamp(0.0, 1.0),
                (base[2] * tint[2] * level).clamp(0.0, 1.0),
            ]
        })
        .collect();

    MeshModel {
        vertices,
        colors: Some(colors),
        faces,
    }
}
