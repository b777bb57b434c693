//! Multi-view visual aggregator: self-attention blocks refine the V view
//! features jointly, then a consensus query (the mean of the refined rows)
//! cross-attends over them to pool one unit-norm descriptor. The attention
//! weights double as per-view fusion weights.

use crate::error::{Error, Result};
use crate::nn::layers::{
    feed_forward, init_attention, init_feed_forward, init_layer_norm, layer_norm, lease_attention,
    lease_feed_forward, lease_layer_norm, multi_head_attention, Activation, AttentionConfig,
};
use crate::nn::store::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::tensor::{l2_normalize_slice, Scalar, Tensor};

/// FFN width multiplier inside each self-attention block.
const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatorConfig {
    /// View-feature dimension C; the pooled descriptor has the same width.
    pub feature_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl AggregatorConfig {
    /// Small configuration for commodity-hardware runs.
    pub fn desk() -> AggregatorConfig {
        AggregatorConfig {
            feature_dim: 64,
            layers: 2,
            heads: 4,
        }
    }

    /// Full-size profile (shape checks only; not trained here).
    pub fn paper_shape() -> AggregatorConfig {
        AggregatorConfig {
            feature_dim: 1280,
            layers: 6,
            heads: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Usage("aggregator config fields must be positive".into()));
        }
        if self.feature_dim % self.heads != 0 {
            return Err(Error::Usage(format!(
                "feature dim {} not divisible by heads {}",
                self.feature_dim, self.heads
            )));
        }
        Ok(())
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.feature_dim,
            heads: self.heads,
        }
    }
}

/// Pooled descriptor plus per-view fusion weights.
#[derive(Debug, Clone)]
pub struct FusedViewEmbedding<S: Scalar> {
    /// Unit-norm C-dim descriptor.
    pub f_mvimg: Vec<S>,
    /// Head-averaged attention weights over the V views (simplex).
    pub beta: Vec<f64>,
}

/// Tape-resident pooling result for training.
pub struct PoolVars {
    /// 1 x C unit-norm descriptor.
    pub fused: Var,
    pub beta: Vec<f64>,
}

/// Register every aggregator parameter under the "mvagg." prefix.
pub fn init_aggregator<S: Scalar>(store: &mut ParamStore<S>, cfg: &AggregatorConfig) -> Result<()> {
    cfg.validate()?;
    let c = cfg.feature_dim;
    for l in 0..cfg.layers {
        init_attention(store, &format!("mvagg.block{l}.attn"), c)?;
        init_layer_norm(store, &format!("mvagg.block{l}.ln1"), c)?;
        init_feed_forward(store, &format!("mvagg.block{l}.ffn"), c, c * FFN_EXPANSION, c)?;
        init_layer_norm(store, &format!("mvagg.block{l}.ln2"), c)?;
    }
    init_layer_norm(store, "mvagg.pool.ln", c)?;
    init_attention(store, "mvagg.pool.attn", c)?;
    init_layer_norm(store, "mvagg.pool.post_ln", c)?;
    Ok(())
}

fn check_input<S: Scalar>(tape: &Tape<S>, x: Var, cfg: &AggregatorConfig) -> Result<()> {
    let t = tape.value(x);
    if t.rank() != 2 || t.rows() == 0 {
        return Err(Error::Shape("view features must be a nonempty V x C matrix".into()));
    }
    if t.cols() != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "view features have {} columns, config expects C={}",
            t.cols(),
            cfg.feature_dim
        )));
    }
    Ok(())
}

/// Joint self-attention over the view rows: post-norm blocks
/// y = LN(x + SelfAttn(x)), z = LN(y + FFN(y)); no positional encoding, so
/// the map is permutation-equivariant over rows.
pub fn self_attend_views_vars<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    cfg: &AggregatorConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_input(tape, x, cfg)?;
    let attn_cfg = cfg.attention();
    let mut cur = x;
    for l in 0..cfg.layers {
        let attn = lease_attention(tape, store, &format!("mvagg.block{l}.attn"))?;
        let ln1 = lease_layer_norm(tape, store, &format!("mvagg.block{l}.ln1"))?;
        let ffn = lease_feed_forward(tape, store, &format!("mvagg.block{l}.ffn"))?;
        let ln2 = lease_layer_norm(tape, store, &format!("mvagg.block{l}.ln2"))?;
        let a = multi_head_attention(tape, cur, cur, &attn, &attn_cfg)?;
        let y = tape.add(cur, a.out)?;
        let y = layer_norm(tape, y, &ln1)?;
        let f = feed_forward(tape, y, &ffn, Activation::Gelu)?;
        let z = tape.add(y, f)?;
        cur = layer_norm(tape, z, &ln2)?;
    }
    Ok(cur)
}

/// Cross-attention pooling with the mean of the refined rows as the sole
/// query. A shared LayerNorm conditions both the query and the keys, the
/// pooled row is layer-normed and L2-normalized, and beta is the
/// head-averaged attention weight vector.
pub fn consensus_pool_vars<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x_refined: Var,
    cfg: &AggregatorConfig,
) -> Result<PoolVars> {
    cfg.validate()?;
    check_input(tape, x_refined, cfg)?;
    let pre_ln = lease_layer_norm(tape, store, "mvagg.pool.ln")?;
    let q = tape.mean_rows(x_refined)?;
    let qn = layer_norm(tape, q, &pre_ln)?;
    let kn = layer_norm(tape, x_refined, &pre_ln)?;
    let attn = lease_attention(tape, store, "mvagg.pool.attn")?;
    let pooled = multi_head_attention(tape, qn, kn, &attn, &cfg.attention())?;
    let post_ln = lease_layer_norm(tape, store, "mvagg.pool.post_ln")?;
    let out = layer_norm(tape, pooled.out, &post_ln)?;
    let fused = tape.l2_norm_rows(out)?;

    let views = tape.value(x_refined).rows();
    let mut beta = vec![0.0f64; views];
    for head in &pooled.head_weights {
        for (b, &w) in beta.iter_mut().zip(tape.value(*head).data()) {
            *b += Scalar::to_f64(w);
        }
    }
    for b in beta.iter_mut() {
        *b /= pooled.head_weights.len() as f64;
    }
    Ok(PoolVars { fused, beta })
}

/// Full aggregation: refine, then pool.
pub fn aggregate_vars<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: Var,
    cfg: &AggregatorConfig,
) -> Result<PoolVars> {
    let refined = self_attend_views_vars(tape, store, x, cfg)?;
    consensus_pool_vars(tape, store, refined, cfg)
}

/// Aggregate a V x C feature matrix on a private tape.
pub fn aggregate<S: Scalar>(
    store: &ParamStore<S>,
    x: &Tensor<S>,
    cfg: &AggregatorConfig,
) -> Result<FusedViewEmbedding<S>> {
    let mut tape: Tape<S> = Tape::new();
    let input = tape.constant(x.clone())?;
    let pooled = aggregate_vars(&mut tape, store, input, cfg)?;
    Ok(FusedViewEmbedding {
        f_mvimg: tape.value(pooled.fused).data().to_vec(),
        beta: pooled.beta,
    })
}

/// Ablation baseline: plain row mean, L2-normalized.
pub fn mean_pool_baseline<S: Scalar>(x: &Tensor<S>) -> Result<Vec<S>> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::Shape("view features must be a nonempty V x C matrix".into()));
    }
    x.validate_finite()?;
    let (v, c) = (x.rows(), x.cols());
    let mut mean = vec![S::zero(); c];
    for r in 0..v {
        for (m, &val) in mean.iter_mut().zip(x.row_slice(r)) {
            *m = *m + val;
        }
    }
    let inv = S::from_f64(1.0 / v as f64);
    for m in mean.iter_mut() {
        *m = *m * inv;
    }
    l2_normalize_slice(&mut mean, "mean")?;
    Ok(mean)
}
