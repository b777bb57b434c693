//! Normal-aware point-cloud encoder: FPS/kNN patchification, Mini-PointNet
//! patch tokens with positional embeddings, a CLS-prefixed pre-LN
//! transformer, a projection into the joint space, and the image/text
//! alignment adapter heads.

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_group, normalize_cloud, PointCloud};
use crate::nn::layers::{
    feed_forward, init_attention, init_feed_forward, init_layer_norm, init_linear, layer_norm,
    lease_attention, lease_feed_forward, lease_layer_norm, lease_linear, linear,
    multi_head_attention, Activation, AttentionConfig,
};
use crate::nn::store::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Width of the Mini-PointNet and positional-MLP middle layer.
const POINTNET_MID: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoder3DConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_expansion: usize,
    /// Patch count P from farthest point sampling.
    pub patches: usize,
    /// Points per patch N' from kNN grouping.
    pub patch_size: usize,
    /// Joint embedding dimension d (matches the view-feature dim C).
    pub joint_dim: usize,
    pub adapters: bool,
}

impl Encoder3DConfig {
    /// Small configuration for commodity-hardware runs.
    pub fn desk() -> Encoder3DConfig {
        Encoder3DConfig {
            layers: 4,
            heads: 4,
            hidden: 64,
            mlp_expansion: 3,
            patches: 32,
            patch_size: 16,
            joint_dim: 64,
            adapters: true,
        }
    }

    /// Full-size profile (shape checks only; not trained here). The joint
    /// dimension follows the full-size view-feature width so the two
    /// branches land in one space.
    pub fn paper_shape() -> Encoder3DConfig {
        Encoder3DConfig {
            layers: 12,
            heads: 8,
            hidden: 512,
            mlp_expansion: 3,
            patches: 64,
            patch_size: 32,
            joint_dim: 1280,
            adapters: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.heads == 0
            || self.hidden == 0
            || self.mlp_expansion == 0
            || self.patches == 0
            || self.patch_size == 0
            || self.joint_dim == 0
        {
            return Err(Error::Usage("encoder3d config fields must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Usage(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.hidden,
            heads: self.heads,
        }
    }
}

/// Patchified cloud ready for encoding: geometry is parameter-free, so this
/// can be computed once per object and reused across training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCloud {
    /// P patches of N' re-centered rows.
    pub patches: Vec<Vec<[f64; 9]>>,
    /// Original patch-center positions (normalized coordinates).
    pub centers: Vec<[f64; 3]>,
}

/// Joint-space outputs for one cloud, as tape variables (each 1 x d, unit).
pub struct EncoderVars {
    pub f3d: Var,
    pub f3d_img: Option<Var>,
    pub f3d_txt: Option<Var>,
}

/// Extracted embeddings for one cloud.
#[derive(Debug, Clone)]
pub struct ShapeEmbedding<S: Scalar> {
    pub f3d: Vec<S>,
    pub f3d_img: Option<Vec<S>>,
    pub f3d_txt: Option<Vec<S>>,
}

/// Register every encoder parameter under the "encoder3d." prefix.
pub fn init_encoder3d<S: Scalar>(store: &mut ParamStore<S>, cfg: &Encoder3DConfig) -> Result<()> {
    cfg.validate()?;
    let h = cfg.hidden;
    init_linear(store, "encoder3d.pointnet.l1", 9, POINTNET_MID, true)?;
    init_linear(store, "encoder3d.pointnet.l2", POINTNET_MID, h, true)?;
    init_linear(store, "encoder3d.pos.l1", 3, POINTNET_MID, true)?;
    init_linear(store, "encoder3d.pos.l2", POINTNET_MID, h, true)?;
    let bound = (1.0 / h as f64).sqrt();
    store.init_uniform("encoder3d.cls", vec![1, h], bound)?;
    for l in 0..cfg.layers {
        init_layer_norm(store, &format!("encoder3d.block{l}.ln1"), h)?;
        init_attention(store, &format!("encoder3d.block{l}.attn"), h)?;
        init_layer_norm(store, &format!("encoder3d.block{l}.ln2"), h)?;
        init_feed_forward(
            store,
            &format!("encoder3d.block{l}.ffn"),
            h,
            h * cfg.mlp_expansion,
            h,
        )?;
    }
    init_layer_norm(store, "encoder3d.final_ln", h)?;
    init_linear(store, "encoder3d.proj", h, cfg.joint_dim, true)?;
    if cfg.adapters {
        for head in ["iaa", "taa"] {
            init_linear(store, &format!("encoder3d.{head}.l1"), h, h, true)?;
            // Zero-initialized output layer: the adapters start as exact
            // identities over the shared projection.
            store.init_const(&format!("encoder3d.{head}.l2.weight"), vec![h, cfg.joint_dim], 0.0)?;
            store.init_const(&format!("encoder3d.{head}.l2.bias"), vec![1, cfg.joint_dim], 0.0)?;
        }
    }
    Ok(())
}

/// Replace every color with the 0.8 gray fill; positions/normals untouched.
pub fn fill_textureless(pc: &PointCloud) -> PointCloud {
    let points = pc
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            q[3] = crate::geometry::sample::TEXTURELESS_FILL;
            q[4] = crate::geometry::sample::TEXTURELESS_FILL;
            q[5] = crate::geometry::sample::TEXTURELESS_FILL;
            q
        })
        .collect();
    PointCloud { points }
}

/// Normalize, FPS, kNN-group. `ablate_normals` zeroes the normal channels of
/// the patch rows (the no-normals ablation arm).
pub fn prepare_cloud(
    pc: &PointCloud,
    cfg: &Encoder3DConfig,
    ablate_normals: bool,
) -> Result<PreparedCloud> {
    cfg.validate()?;
    pc.validate()?;
    if pc.len() < cfg.patches {
        return Err(Error::Data(format!(
            "cloud has {} points, need at least P={}",
            pc.len(),
            cfg.patches
        )));
    }
    let normalized = normalize_cloud(pc)?;
    let centers = farthest_point_sample(&normalized, cfg.patches, 0)?;
    let set = knn_group(&normalized, &centers, cfg.patch_size)?;
    let mut patches = set.points;
    if ablate_normals {
        for patch in patches.iter_mut() {
            for row in patch.iter_mut() {
                row[6] = 0.0;
                row[7] = 0.0;
                row[8] = 0.0;
            }
        }
    }
    Ok(PreparedCloud {
        patches,
        centers: set.center_positions,
    })
}

/// Shared per-point MLP (9 -> 128 -> hidden) followed by max-pooling over
/// the patch rows; exactly invariant to row permutation.
pub fn mini_pointnet_embed<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    patch: &[[f64; 9]],
) -> Result<Var> {
    if patch.is_empty() {
        return Err(Error::Usage("mini_pointnet_embed needs at least one row".into()));
    }
    let mut data = Vec::with_capacity(patch.len() * 9);
    for row in patch {
        data.extend(row.iter().map(|&v| S::from_f64(v)));
    }
    let rows = tape.constant(Tensor::new(vec![patch.len(), 9], data)?)?;
    let l1 = lease_linear(tape, store, "encoder3d.pointnet.l1")?;
    let l2 = lease_linear(tape, store, "encoder3d.pointnet.l2")?;
    let h = linear(tape, rows, &l1)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, &l2)?;
    tape.max_rows(h)
}

fn positional_embed<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    center: [f64; 3],
) -> Result<Var> {
    let c = tape.constant(Tensor::new(
        vec![1, 3],
        center.iter().map(|&v| S::from_f64(v)).collect(),
    )?)?;
    let l1 = lease_linear(tape, store, "encoder3d.pos.l1")?;
    let l2 = lease_linear(tape, store, "encoder3d.pos.l2")?;
    let h = linear(tape, c, &l1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, &l2)
}

/// IAA/TAA heads over the final CLS state: each is a bottleneck MLP whose
/// output rides a residual bypass through the shared hidden->d projection.
pub fn apply_adapters_vars<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    f3d_pre: Var,
    cfg: &Encoder3DConfig,
) -> Result<(Var, Var)> {
    if !cfg.adapters {
        return Err(Error::Usage("adapters are disabled in this config".into()));
    }
    let proj = lease_linear(tape, store, "encoder3d.proj")?;
    let shared = linear(tape, f3d_pre, &proj)?;
    let mut heads = Vec::with_capacity(2);
    for head in ["iaa", "taa"] {
        let l1 = lease_linear(tape, store, &format!("encoder3d.{head}.l1"))?;
        let l2 = lease_linear(tape, store, &format!("encoder3d.{head}.l2"))?;
        let a = linear(tape, f3d_pre, &l1)?;
        let a = tape.gelu(a)?;
        let a = linear(tape, a, &l2)?;
        let sum = tape.add(shared, a)?;
        heads.push(tape.l2_norm_rows(sum)?);
    }
    Ok((heads[0], heads[1]))
}

/// Encode an already-patchified cloud onto the given tape.
pub fn encode_prepared_vars<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prep: &PreparedCloud,
    cfg: &Encoder3DConfig,
) -> Result<EncoderVars> {
    cfg.validate()?;
    if prep.patches.len() != cfg.patches || prep.centers.len() != cfg.patches {
        return Err(Error::Shape(format!(
            "prepared cloud has {} patches, config expects {}",
            prep.patches.len(),
            cfg.patches
        )));
    }
    let mut rows = Vec::with_capacity(cfg.patches + 1);
    rows.push(tape.param(store, "encoder3d.cls")?);
    for (patch, &center) in prep.patches.iter().zip(&prep.centers) {
        if patch.len() != cfg.patch_size {
            return Err(Error::Shape(format!(
                "patch has {} rows, config expects N'={}",
                patch.len(),
                cfg.patch_size
            )));
        }
        let token = mini_pointnet_embed(tape, store, patch)?;
        let pos = positional_embed(tape, store, center)?;
        rows.push(tape.add(token, pos)?);
    }
    let mut x = tape.concat_rows(&rows)?;

    let attn_cfg = cfg.attention();
    for l in 0..cfg.layers {
        // Pre-LN block: x += Attn(LN(x)); x += FFN(LN(x)).
        let ln1 = lease_layer_norm(tape, store, &format!("encoder3d.block{l}.ln1"))?;
        let attn = lease_attention(tape, store, &format!("encoder3d.block{l}.attn"))?;
        let normed = layer_norm(tape, x, &ln1)?;
        let a = multi_head_attention(tape, normed, normed, &attn, &attn_cfg)?;
        x = tape.add(x, a.out)?;
        let ln2 = lease_layer_norm(tape, store, &format!("encoder3d.block{l}.ln2"))?;
        let ffn = lease_feed_forward(tape, store, &format!("encoder3d.block{l}.ffn"))?;
        let normed = layer_norm(tape, x, &ln2)?;
        let f = feed_forward(tape, normed, &ffn, Activation::Gelu)?;
        x = tape.add(x, f)?;
    }
    let final_ln = lease_layer_norm(tape, store, "encoder3d.final_ln")?;
    let x = layer_norm(tape, x, &final_ln)?;
    let cls = tape.slice_rows(x, 0, 1)?;

    let proj = lease_linear(tape, store, "encoder3d.proj")?;
    let projected = linear(tape, cls, &proj)?;
    let f3d = tape.l2_norm_rows(projected)?;

    let (f3d_img, f3d_txt) = if cfg.adapters {
        let (i, t) = apply_adapters_vars(tape, store, cls, cfg)?;
        (Some(i), Some(t))
    } else {
        (None, None)
    };
    Ok(EncoderVars {
        f3d,
        f3d_img,
        f3d_txt,
    })
}

/// Full encoding pipeline for one cloud on a private tape.
pub fn encode_cloud<S: Scalar>(
    store: &ParamStore<S>,
    pc: &PointCloud,
    cfg: &Encoder3DConfig,
    ablate_normals: bool,
) -> Result<ShapeEmbedding<S>> {
    let prep = prepare_cloud(pc, cfg, ablate_normals)?;
    let mut tape: Tape<S> = Tape::new();
    let vars = encode_prepared_vars(&mut tape, store, &prep, cfg)?;
    Ok(ShapeEmbedding {
        f3d: tape.value(vars.f3d).data().to_vec(),
        f3d_img: vars.f3d_img.map(|v| tape.value(v).data().to_vec()),
        f3d_txt: vars.f3d_txt.map(|v| tape.value(v).data().to_vec()),
    })
}
