//! Wavefront OBJ reader for the subset this project emits and consumes:
//! `v x y z [r g b]` and polygonal `f` lines (fan-triangulated). Stored
//! normals (`vn`) and texture coordinates (`vt`) are ignored because face
//! normals are recomputed from geometry at sampling time.

use crate::error::{Error, Result};
use crate::geometry::{cross3, norm3, sub3, MeshModel};

pub fn load_obj(text: &str) -> Result<MeshModel> {
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut colors: Vec<Option<[f64; 3]>> = Vec::new();
    let mut raw_faces: Vec<Vec<usize>> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let keyword = toks.next().unwrap();
        match keyword {
            "v" => {
                let nums: Vec<f64> = toks
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| {
                            Error::Data(format!(
                                "line {}: bad vertex coordinate {t:?}",
                                lineno + 1
                            ))
                        })
                    })
                    .collect::<Result<_>>()?;
                match nums.len() {
                    3 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        colors.push(None);
                    }
                    6 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        colors.push(Some([nums[3], nums[4], nums[5]]));
                    }
                    n => {
                        return Err(Error::Data(format!(
                            "line {}: vertex line has {n} numbers, expected 3 or 6",
                            lineno + 1
                        )))
                    }
                }
            }
            "f" => {
                let mut idx = Vec::new();
                for t in toks {
                    // Face tokens are v, v/vt, v/vt/vn or v//vn; only the
                    // leading vertex index matters here.
                    let first = t.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| {
                        Error::Data(format!("line {}: bad face index {t:?}", lineno + 1))
                    })?;
                    if i < 1 {
                        return Err(Error::Data(format!(
                            "line {}: face index {i} out of range (1-based positive only)",
                            lineno + 1
                        )));
                    }
                    idx.push((i - 1) as usize);
                }
                if idx.len() < 3 {
                    return Err(Error::Data(format!(
                        "line {}: face needs at least 3 vertices, got {}",
                        lineno + 1,
                        idx.len()
                    )));
                }
                raw_faces.push(idx);
            }
            // Tolerated and ignored: stored normals/texcoords and grouping
            // or material statements.
            "vn" | "vt" | "o" | "g" | "s" | "usemtl" | "mtllib" => {}
            _ => {}
        }
    }

    if vertices.is_empty() {
        return Err(Error::Data("OBJ has no vertices".into()));
    }
    let colored = colors.iter().filter(|c| c.is_some()).count();
    let mesh_colors = if colored == 0 {
        None
    } else if colored == vertices.len() {
        Some(colors.into_iter().map(|c| c.unwrap()).collect())
    } else {
        return Err(Error::Data(format!(
            "OBJ mixes colored and colorless vertices ({colored} of {})",
            vertices.len()
        )));
    };

    let mut faces = Vec::new();
    for idx in &raw_faces {
        for &v in idx {
            if v >= vertices.len() {
                return Err(Error::Data(format!(
                    "face references vertex {}, OBJ defines {}",
                    v + 1,
                    vertices.len()
                )));
            }
        }
        // Fan triangulation from the first polygon vertex.
        for k in 1..idx.len() - 1 {
            let tri = [idx[0], idx[k], idx[k + 1]];
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                continue;
            }
            let e1 = sub3(vertices[tri[1]], vertices[tri[0]]);
            let e2 = sub3(vertices[tri[2]], vertices[tri[0]]);
            if norm3(cross3(e1, e2)) < 1e-12 {
                continue;
            }
            faces.push(tri);
        }
    }
    if faces.is_empty() {
        return Err(Error::Data("OBJ has no non-degenerate faces".into()));
    }

    Ok(MeshModel {
        vertices,
        colors: mesh_colors,
        faces,
    })
}

/// Serialize a mesh back to OBJ text (used by the dataset generator).
pub fn write_obj(mesh: &MeshModel) -> String {
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => {
                let rgb = c[i];
                out.push_str(&format!(
                    "v {} {} {} {} {} {}\n",
                    v[0], v[1], v[2], rgb[0], rgb[1], rgb[2]
                ));
            }
            None => out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2])),
        }
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}
