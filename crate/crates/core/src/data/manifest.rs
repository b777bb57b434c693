//! Dataset layout on disk: a text manifest plus one directory per object
//! holding the mesh, per-view feature tensors, and an optional text tensor.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::container::{read_tensor, write_tensor};
use crate::data::features::{class_text_feature, load_view_features, synthetic_view_features};
use crate::data::shapes::{build_shape, ShapeFamily};
use crate::error::{Error, Result};
use crate::geometry::obj::write_obj;
use crate::geometry::{load_obj, normalize_cloud, sample_surface, PointCloud};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};
use crate::training::TripletSample;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "fbds1";

/// Generation parameters for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub n_objects: usize,
    pub n_classes: usize,
    pub views_per_object: usize,
    pub points_per_cloud: usize,
    pub feature_dim: usize,
    pub with_text: bool,
    pub textureless: bool,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn desk(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_objects: 64,
            n_classes: 6,
            views_per_object: 12,
            points_per_cloud: 2048,
            feature_dim: 64,
            with_text: true,
            textureless: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_objects < self.n_classes {
            return Err(Error::Usage(format!(
                "need n_objects >= n_classes >= 1, got {} objects, {} classes",
                self.n_objects, self.n_classes
            )));
        }
        if self.n_classes > ShapeFamily::ALL.len() {
            return Err(Error::Usage(format!(
                "at most {} shape classes are available, got {}",
                ShapeFamily::ALL.len(),
                self.n_classes
            )));
        }
        if self.views_per_object == 0 {
            return Err(Error::Usage("every object needs at least one view".into()));
        }
        if self.points_per_cloud == 0 || self.feature_dim == 0 {
            return Err(Error::Usage("points and feature dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectEntry {
    pub object_id: String,
    pub class_name: String,
}

/// Parsed manifest: dataset-wide settings plus the object table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub points: usize,
    pub feature_dim: usize,
    pub views: usize,
    pub with_text: bool,
    pub textureless: bool,
    pub objects: Vec<ObjectEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn object_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.objects[i].object_id)
    }

    pub fn mesh_path(&self, i: usize) -> PathBuf {
        self.object_dir(i).join("mesh.obj")
    }

    pub fn view_path(&self, i: usize, k: usize) -> PathBuf {
        self.object_dir(i).join("views").join(format!("{k}.fbt"))
    }

    pub fn text_path(&self, i: usize) -> PathBuf {
        self.object_dir(i).join("text.fbt")
    }

    fn encode(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MANIFEST_HEADER}");
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "points = {}", self.points);
        let _ = writeln!(out, "dim = {}", self.feature_dim);
        let _ = writeln!(out, "views = {}", self.views);
        let _ = writeln!(out, "text = {}", if self.with_text { 1 } else { 0 });
        let _ = writeln!(out, "textureless = {}", if self.textureless { 1 } else { 0 });
        for o in &self.objects {
            let _ = writeln!(out, "{} {}", o.object_id, o.class_name);
        }
        out
    }
}

/// Quasi-uniform unit view directions: a Fibonacci spiral rotated by a
/// seeded random rotation, shared by every object of a dataset.
pub fn view_directions(v: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = SeededRng::new(SeededRng::derive(seed, "view-rig"));
    let mut q = [0.0f64; 4];
    loop {
        for e in q.iter_mut() {
            *e = rng.range(-1.0, 1.0);
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 {
            for e in q.iter_mut() {
                *e /= n;
            }
            break;
        }
    }
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let rot = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];

    let golden = PI * (3.0 - 5.0f64.sqrt());
    (0..v)
        .map(|k| {
            let zc = 1.0 - 2.0 * (k as f64 + 0.5) / v as f64;
            let r = (1.0 - zc * zc).max(0.0).sqrt();
            let phi = golden * k as f64;
            let p = [r * phi.cos(), r * phi.sin(), zc];
            let mut d = [0.0f64; 3];
            for i in 0..3 {
                d[i] = rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2];
            }
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            [d[0] / n, d[1] / n, d[2] / n]
        })
        .collect()
}

fn object_id_for(i: usize) -> String {
    format!("obj{i:03}")
}

fn cloud_seed(dataset_seed: u64, object_id: &str) -> u64 {
    SeededRng::derive(SeededRng::derive(dataset_seed, object_id), "cloud")
}

/// Generate meshes, view features, and text features under `out_dir` and
/// write the manifest. Fully deterministic for a fixed `DatasetSpec`.
pub fn generate_synthetic_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dirs = view_directions(spec.views_per_object, spec.seed);
    let mut objects = Vec::with_capacity(spec.n_objects);
    for i in 0..spec.n_objects {
        let object_id = object_id_for(i);
        let family = ShapeFamily::ALL[i % spec.n_classes];
        let obj_seed = SeededRng::derive(spec.seed, &object_id);
        let mut mesh_rng = SeededRng::new(SeededRng::derive(obj_seed, "mesh"));
        let mut mesh = build_shape(family, &mut mesh_rng);
        if spec.textureless {
            mesh.colors = None;
        }

        let dir = out_dir.join(&object_id);
        std::fs::create_dir_all(dir.join("views"))?;
        std::fs::write(dir.join("mesh.obj"), write_obj(&mesh))?;

        let cloud = sample_surface(&mesh, spec.points_per_cloud, SeededRng::derive(obj_seed, "cloud"))?;
        let cloud = normalize_cloud(&cloud)?;
        for (k, &vd) in dirs.iter().enumerate() {
            let feat = synthetic_view_features(&cloud, vd, spec.feature_dim, spec.seed)?;
            let t = Tensor::<f32>::row(feat.iter().map(|&x| x as f32).collect())?;
            write_tensor(&t, &dir.join("views").join(format!("{k}.fbt")))?;
        }
        if spec.with_text {
            let txt = class_text_feature(family.name(), spec.feature_dim, spec.seed)?;
            let t = Tensor::<f32>::row(txt.iter().map(|&x| x as f32).collect())?;
            write_tensor(&t, &dir.join("text.fbt"))?;
        }
        objects.push(ObjectEntry {
            object_id,
            class_name: family.name().to_string(),
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        seed: spec.seed,
        points: spec.points_per_cloud,
        feature_dim: spec.feature_dim,
        views: spec.views_per_object,
        with_text: spec.with_text,
        textureless: spec.textureless,
        objects,
    };
    std::fs::write(out_dir.join(MANIFEST_FILE), manifest.encode())?;
    Ok(manifest)
}

/// Parse `<root>/manifest.txt` and verify that every referenced file
/// exists, IDs are unique, and every object has at least one view.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MANIFEST_HEADER => {}
        _ => return Err(Error::Data(format!("manifest {} missing '{MANIFEST_HEADER}' header", path.display()))),
    }

    let mut seed = None;
    let mut points = None;
    let mut dim = None;
    let mut views = None;
    let mut with_text = None;
    let mut textureless = None;
    let mut objects = Vec::new();
    for (n, raw) in lines {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            let (key, value) = (key.trim(), value.trim());
            let parse_num = |v: &str| -> Result<u64> {
                v.parse()
                    .map_err(|_| Error::Data(format!("manifest line {}: bad number '{v}'", n + 1)))
            };
            match key {
                "seed" => seed = Some(parse_num(value)?),
                "points" => points = Some(parse_num(value)? as usize),
                "dim" => dim = Some(parse_num(value)? as usize),
                "views" => views = Some(parse_num(value)? as usize),
                "text" => with_text = Some(parse_num(value)? != 0),
                "textureless" => textureless = Some(parse_num(value)? != 0),
                _ => {
                    return Err(Error::Data(format!(
                        "manifest line {}: unknown key '{key}'",
                        n + 1
                    )))
                }
            }
        } else {
            let mut parts = line.split_whitespace();
            let (Some(id), Some(class), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Data(format!(
                    "manifest line {}: expected 'object_id class'",
                    n + 1
                )));
            };
            objects.push(ObjectEntry {
                object_id: id.to_string(),
                class_name: class.to_string(),
            });
        }
    }

    let missing = |k: &str| Error::Data(format!("manifest is missing the '{k}' header"));
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        seed: seed.ok_or_else(|| missing("seed"))?,
        points: points.ok_or_else(|| missing("points"))?,
        feature_dim: dim.ok_or_else(|| missing("dim"))?,
        views: views.ok_or_else(|| missing("views"))?,
        with_text: with_text.ok_or_else(|| missing("text"))?,
        textureless: textureless.ok_or_else(|| missing("textureless"))?,
        objects,
    };
    if manifest.objects.is_empty() {
        return Err(Error::Data("manifest lists no objects".into()));
    }
    if manifest.views == 0 {
        return Err(Error::Data("manifest declares zero views per object".into()));
    }

    let mut seen = HashSet::new();
    for (i, o) in manifest.objects.iter().enumerate() {
        if !seen.insert(o.object_id.as_str()) {
            return Err(Error::Data(format!("duplicate object id '{}'", o.object_id)));
        }
        let mesh = manifest.mesh_path(i);
        if !mesh.is_file() {
            return Err(Error::Data(format!("missing mesh file {}", mesh.display())));
        }
        for k in 0..manifest.views {
            let vp = manifest.view_path(i, k);
            if !vp.is_file() {
                return Err(Error::Data(format!("missing view file {}", vp.display())));
            }
        }
        if manifest.with_text {
            let tp = manifest.text_path(i);
            if !tp.is_file() {
                return Err(Error::Data(format!("missing text file {}", tp.display())));
            }
        }
    }
    Ok(manifest)
}

/// Stack the object's per-view feature files into one V x C matrix.
pub fn load_object_views(m: &DatasetManifest, i: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(m.views * m.feature_dim);
    for k in 0..m.views {
        let path = m.view_path(i, k);
        let t = load_view_features(&path)?;
        if t.cols() != m.feature_dim {
            return Err(Error::Shape(format!(
                "view file {} has {} columns, manifest says {}",
                path.display(),
                t.cols(),
                m.feature_dim
            )));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::matrix(m.views, m.feature_dim, data)
}

/// Load the object's mesh and resample its normalized point cloud with the
/// same derived seed the generator used.
pub fn load_object_cloud(m: &DatasetManifest, i: usize) -> Result<PointCloud> {
    let path = m.mesh_path(i);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read mesh {}: {e}", path.display())))?;
    let mesh = load_obj(&text)?;
    let cloud = sample_surface(&mesh, m.points, cloud_seed(m.seed, &m.objects[i].object_id))?;
    normalize_cloud(&cloud)
}

/// Load every object as a training triplet.
pub fn load_triplets<S: Scalar>(m: &DatasetManifest) -> Result<Vec<TripletSample<S>>> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let views = load_object_views(m, i)?.cast::<S>();
        let text = if m.with_text {
            let t = read_tensor::<f32>(&m.text_path(i))?;
            if t.rank() != 2 || t.rows() != 1 || t.cols() != m.feature_dim {
                return Err(Error::Shape(format!(
                    "text file for '{}' must be 1 x {}",
                    m.objects[i].object_id, m.feature_dim
                )));
            }
            Some(t.data().iter().map(|&v| S::from_f64(v as f64)).collect())
        } else {
            None
        };
        out.push(TripletSample {
            object_id: m.objects[i].object_id.clone(),
            view_features: views,
            text_feature: text,
            point_cloud: load_object_cloud(m, i)?,
        });
    }
    Ok(out)
}
