//! Deterministic stand-in feature providers: a geometric per-view
//! descriptor, per-class text vectors, and a validated feature-file loader.

use std::path::Path;

use crate::container::{decode_tensor, Reader};
use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, PointCloud};
use crate::rng::SeededRng;
use crate::tensor::{Dtype, Tensor};

const GRID: usize = 8;
const RAW_FEATURES: usize = GRID * GRID * 3;
/// Points whose normal faces away from the camera beyond this threshold are
/// dropped as hidden.
const VISIBILITY_THRESHOLD: f64 = 0.2;

/// Orthonormal rows (u, v, w) with w equal to the gaze direction; rotating
/// by this matrix maps the gaze onto +z.
fn view_basis(view_dir: [f64; 3]) -> [[f64; 3]; 3] {
    let w = view_dir;
    let pick = if w[2].abs() > 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let mut u = [
        w[1] * pick[2] - w[2] * pick[1],
        w[2] * pick[0] - w[0] * pick[2],
        w[0] * pick[1] - w[1] * pick[0],
    ];
    let un = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    u = [u[0] / un, u[1] / un, u[2] / un];
    let v = [
        w[1] * u[2] - w[2] * u[1],
        w[2] * u[0] - w[0] * u[2],
        w[0] * u[1] - w[1] * u[0],
    ];
    [u, v, w]
}

/// Geometric view descriptor: normalize the cloud, rotate the gaze onto +z,
/// drop hidden points, rasterize an 8x8 grid of (max depth, mean
/// normal-to-view angle, mean luminance), then mix the 192 raw values to
/// `c` dims with a seeded fixed random projection and L2-normalize.
pub fn synthetic_view_features(
    pc: &PointCloud,
    view_dir: [f64; 3],
    c: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if c == 0 {
        return Err(Error::Usage("feature dimension must be positive".into()));
    }
    let norm = (view_dir[0] * view_dir[0] + view_dir[1] * view_dir[1] + view_dir[2] * view_dir[2]).sqrt();
    if (norm - 1.0).abs() > 1e-5 {
        return Err(Error::Usage(format!(
            "view direction must be unit length, got norm {norm}"
        )));
    }
    let cloud = normalize_cloud(pc)?;
    let basis = view_basis(view_dir);

    // Rotated position and normal per point, plus luminance.
    struct Projected {
        x: f64,
        y: f64,
        depth: f64,
        facing: f64,
        luma: f64,
    }
    let projected: Vec<Projected> = cloud
        .points
        .iter()
        .map(|p| {
            let rot = |row: [f64; 3]| row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
            let facing = basis[2][0] * p[6] + basis[2][1] * p[7] + basis[2][2] * p[8];
            Projected {
                x: rot(basis[0]),
                y: rot(basis[1]),
                depth: rot(basis[2]),
                facing,
                luma: 0.299 * p[3] + 0.587 * p[4] + 0.114 * p[5],
            }
        })
        .collect();
    let visible: Vec<&Projected> = projected
        .iter()
        .filter(|p| p.facing < VISIBILITY_THRESHOLD)
        .collect();
    // Degenerate normals can hide everything; fall back to the whole cloud.
    let visible = if visible.is_empty() {
        projected.iter().collect()
    } else {
        visible
    };

    let mut raw = [0.0f64; RAW_FEATURES];
    let mut counts = [0usize; GRID * GRID];
    for p in &visible {
        let cell_of = |coord: f64| {
            let unit = (coord + 1.0) / 2.0;
            ((unit * GRID as f64) as usize).min(GRID - 1)
        };
        let cell = cell_of(p.y) * GRID + cell_of(p.x);
        let base = cell * 3;
        if counts[cell] == 0 {
            raw[base] = p.depth;
        } else {
            raw[base] = raw[base].max(p.depth);
        }
        raw[base + 1] += p.facing;
        raw[base + 2] += p.luma;
        counts[cell] += 1;
    }
    for cell in 0..GRID * GRID {
        if counts[cell] > 0 {
            raw[cell * 3 + 1] /= counts[cell] as f64;
            raw[cell * 3 + 2] /= counts[cell] as f64;
        }
    }
    // Fixed projection: depends only on (c, seed).
    let mut rng = SeededRng::new(SeededRng::derive(seed, "view-feature-projection"));
    let scale = 1.0 / (RAW_FEATURES as f64).sqrt();
    let mut out = vec![0.0f64; c];
    for o in out.iter_mut() {
        let mut acc = 0.0;
        for r in raw.iter() {
            acc += rng.range(-1.0, 1.0) * scale * r;
        }
        *o = acc;
    }
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::Numeric("degenerate view feature: zero norm".into()));
    }
    for v in out.iter_mut() {
        *v /= n;
    }
    Ok(out)
}

/// Deterministic per-class unit vector standing in for a text embedding.
pub fn class_text_feature(class_name: &str, c: usize, seed: u64) -> Result<Vec<f64>> {
    if c == 0 {
        return Err(Error::Usage("feature dimension must be positive".into()));
    }
    let mut rng = SeededRng::new(SeededRng::derive(SeededRng::derive(seed, "text-feature"), class_name));
    let mut out: Vec<f64> = (0..c).map(|_| rng.range(-1.0, 1.0)).collect();
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        out[0] = 1.0;
        return Ok(out);
    }
    for v in out.iter_mut() {
        *v /= n;
    }
    Ok(out)
}

/// Locate the first non-finite payload value of an f32 tensor file and name
/// its position; used after decode reports a non-finite entry.
fn describe_nonfinite(bytes: &[u8], path: &Path) -> Error {
    let fallback = || Error::Numeric(format!("view features in {} have a non-finite entry", path.display()));
    let mut r = Reader::new(bytes);
    let Ok(_) = r.take(4) else { return fallback() };
    let Ok(dtype) = r.u8() else { return fallback() };
    if dtype != Dtype::F32 as u8 {
        return fallback();
    }
    let Ok(rank) = r.u8() else { return fallback() };
    let mut dims = Vec::new();
    for _ in 0..rank {
        match r.u64() {
            Ok(d) => dims.push(d as usize),
            Err(_) => return fallback(),
        }
    }
    let count: usize = dims.iter().product();
    let Ok(payload) = r.take(count * 4) else { return fallback() };
    for i in 0..count {
        let v = f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().expect("4-byte slice"));
        if !v.is_finite() {
            if dims.len() == 2 {
                return Error::Numeric(format!(
                    "view features in {} have a non-finite entry at row {}, col {}",
                    path.display(),
                    i / dims[1],
                    i % dims[1]
                ));
            }
            return Error::Numeric(format!(
                "view features in {} have a non-finite entry at index {i}",
                path.display()
            ));
        }
    }
    fallback()
}

/// Read a V x C feature tensor, rejecting wrong rank and non-finite
/// entries (named by row and column).
pub fn load_view_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read view features {}: {e}", path.display())))?;
    let t = match decode_tensor::<f32>(&bytes) {
        Ok(t) => t,
        Err(Error::Numeric(_)) => return Err(describe_nonfinite(&bytes, path)),
        Err(e) => return Err(e),
    };
    if t.rank() != 2 {
        return Err(Error::Data(format!(
            "view features in {} must be a rank-2 V x C tensor, got rank {}",
            path.display(),
            t.rank()
        )));
    }
    Ok(t)
}
