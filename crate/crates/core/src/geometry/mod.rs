//! Mesh ingestion and point-set geometry: OBJ loading, area-weighted surface
//! sampling, normalization, farthest point sampling, kNN patch grouping.

pub mod obj;
pub mod patch;
pub mod sample;

pub use obj::load_obj;
pub use patch::{farthest_point_sample, knn_group, PatchSet};
pub use sample::{normalize_cloud, sample_surface};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Triangle mesh with optional per-vertex RGB in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct MeshModel {
    pub vertices: Vec<[f64; 3]>,
    /// Parallel to `vertices` when present; a mesh is colored fully or not
    /// at all.
    pub colors: Option<Vec<[f64; 3]>>,
    pub faces: Vec<[usize; 3]>,
}

impl MeshModel {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.colors {
            if c.len() != self.vertices.len() {
                return Err(Error::Data(format!(
                    "mesh has {} colors for {} vertices",
                    c.len(),
                    self.vertices.len()
                )));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v >= self.vertices.len() {
                    return Err(Error::Data(format!(
                        "face {fi} references vertex {v}, mesh has {}",
                        self.vertices.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Point layout inside a 9-wide cloud row.
pub const PT_POS: std::ops::Range<usize> = 0..3;
pub const PT_COLOR: std::ops::Range<usize> = 3..6;
pub const PT_NORMAL: std::ops::Range<usize> = 6..9;

/// N points of [x, y, z, R, G, B, Nx, Ny, Nz].
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 9]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn pos(&self, i: usize) -> [f64; 3] {
        let p = &self.points[i];
        [p[0], p[1], p[2]]
    }

    /// Check the type invariants: nonempty, finite, unit normals within
    /// 1e-5, colors in [0,1].
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Data("point cloud is empty".into()));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite value in point {i}")));
            }
            for c in &p[PT_COLOR] {
                if !(0.0..=1.0).contains(c) {
                    return Err(Error::Data(format!(
                        "color {c} out of [0,1] in point {i}"
                    )));
                }
            }
            let n = &p[PT_NORMAL];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Data(format!(
                    "normal of point {i} has length {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Row-major N x 9 tensor in the on-disk column order.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let mut data = Vec::with_capacity(self.points.len() * 9);
        for p in &self.points {
            data.extend(p.iter().map(|&v| S::from_f64(v)));
        }
        Tensor::from_parts(vec![self.points.len(), 9], data)
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<PointCloud> {
        if t.rank() != 2 || t.cols() != 9 {
            return Err(Error::Data(format!(
                "point cloud tensor must be Nx9, got {:?}",
                t.dims()
            )));
        }
        let mut points = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let mut p = [0.0f64; 9];
            for (dst, &src) in p.iter_mut().zip(row) {
                *dst = src.to_f64();
            }
            points.push(p);
        }
        let pc = PointCloud { points };
        pc.validate()?;
        Ok(pc)
    }
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub3(a, b);
    dot3(d, d)
}
