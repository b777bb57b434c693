//! Layer builders over the tape: linear, layer norm, multi-head attention,
//! position-wise feed-forward. Each layer has an `init_*` that registers
//! parameters in a store and a `lease_*` that pulls them onto a tape.

use crate::error::{Error, Result};
use crate::nn::store::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Shared epsilon for every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Result<AttentionConfig> {
        let cfg = AttentionConfig { model_dim, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 {
            return Err(Error::Usage(format!(
                "attention needs heads >= 1 and model_dim >= 1, got {}x{}",
                self.heads, self.model_dim
            )));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Usage(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: Var,
    pub b: Option<Var>,
}

pub fn init_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    let bound = (1.0 / fan_in as f64).sqrt();
    store.init_uniform(&format!("{prefix}.weight"), vec![fan_in, fan_out], bound)?;
    if bias {
        store.init_const(&format!("{prefix}.bias"), vec![1, fan_out], 0.0)?;
    }
    Ok(())
}

pub fn lease_linear<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
) -> Result<LinearParams> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let bias_name = format!("{prefix}.bias");
    let b = if store.contains(&bias_name) {
        Some(tape.param(store, &bias_name)?)
    } else {
        None
    };
    Ok(LinearParams { w, b })
}

/// y = x W (+ b).
pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &LinearParams) -> Result<Var> {
    let y = tape.matmul(x, p.w)?;
    match p.b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: Var,
    pub beta: Var,
}

pub fn init_layer_norm<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    store.init_const(&format!("{prefix}.gamma"), vec![1, dim], 1.0)?;
    store.init_const(&format!("{prefix}.beta"), vec![1, dim], 0.0)
}

pub fn lease_layer_norm<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
) -> Result<LayerNormParams> {
    Ok(LayerNormParams {
        gamma: tape.param(store, &format!("{prefix}.gamma"))?,
        beta: tape.param(store, &format!("{prefix}.beta"))?,
    })
}

pub fn layer_norm<S: Scalar>(tape: &mut Tape<S>, x: Var, p: &LayerNormParams) -> Result<Var> {
    tape.layer_norm(x, p.gamma, p.beta, LN_EPS)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub fn init_attention<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    model_dim: usize,
) -> Result<()> {
    let bound = (1.0 / model_dim as f64).sqrt();
    for w in ["wq", "wk", "wv", "wo"] {
        store.init_uniform(&format!("{prefix}.{w}"), vec![model_dim, model_dim], bound)?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.init_const(&format!("{prefix}.{b}"), vec![1, model_dim], 0.0)?;
    }
    Ok(())
}

pub fn lease_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
) -> Result<AttentionParams> {
    Ok(AttentionParams {
        wq: tape.param(store, &format!("{prefix}.wq"))?,
        bq: tape.param(store, &format!("{prefix}.bq"))?,
        wk: tape.param(store, &format!("{prefix}.wk"))?,
        bk: tape.param(store, &format!("{prefix}.bk"))?,
        wv: tape.param(store, &format!("{prefix}.wv"))?,
        bv: tape.param(store, &format!("{prefix}.bv"))?,
        wo: tape.param(store, &format!("{prefix}.wo"))?,
        bo: tape.param(store, &format!("{prefix}.bo"))?,
    })
}

pub struct MhaOutput {
    pub out: Var,
    /// Per-head softmax attention weights, each (query rows x key rows).
    pub head_weights: Vec<Var>,
}

/// Scaled dot-product multi-head attention. `query` is (m, d), `keys` is
/// (n, d); keys and values come from the same input. Scores are scaled by
/// 1/sqrt(head_dim) before the row softmax, heads are concatenated and sent
/// through the output projection.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    query: Var,
    keys: Var,
    p: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<MhaOutput> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let qd = tape.value(query).dims().to_vec();
    let kd = tape.value(keys).dims().to_vec();
    if qd.len() != 2 || qd[1] != d {
        return Err(Error::Shape(format!(
            "attention query must be (m, {d}), got {qd:?}"
        )));
    }
    if kd.len() != 2 || kd[1] != d {
        return Err(Error::Shape(format!(
            "attention keys must be (n, {d}), got {kd:?}"
        )));
    }
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let q = tape.matmul(query, p.wq)?;
    let q = tape.add_row(q, p.bq)?;
    let k = tape.matmul(keys, p.wk)?;
    let k = tape.add_row(k, p.bk)?;
    let v = tape.matmul(keys, p.wv)?;
    let v = tape.add_row(v, p.bv)?;

    let mut head_outs = Vec::with_capacity(cfg.heads);
    let mut head_weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax(scores)?;
        let oh = tape.matmul(weights, vh)?;
        head_outs.push(oh);
        head_weights.push(weights);
    }
    let cat = tape.concat_cols(&head_outs)?;
    let out = tape.matmul(cat, p.wo)?;
    let out = tape.add_row(out, p.bo)?;
    Ok(MhaOutput { out, head_weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn init_feed_forward<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
) -> Result<()> {
    let b1 = (1.0 / d_in as f64).sqrt();
    let b2 = (1.0 / d_hidden as f64).sqrt();
    store.init_uniform(&format!("{prefix}.w1"), vec![d_in, d_hidden], b1)?;
    store.init_const(&format!("{prefix}.b1"), vec![1, d_hidden], 0.0)?;
    store.init_uniform(&format!("{prefix}.w2"), vec![d_hidden, d_out], b2)?;
    store.init_const(&format!("{prefix}.b2"), vec![1, d_out], 0.0)
}

pub fn lease_feed_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
) -> Result<FeedForwardParams> {
    Ok(FeedForwardParams {
        w1: tape.param(store, &format!("{prefix}.w1"))?,
        b1: tape.param(store, &format!("{prefix}.b1"))?,
        w2: tape.param(store, &format!("{prefix}.w2"))?,
        b2: tape.param(store, &format!("{prefix}.b2"))?,
    })
}

/// Two-layer MLP: act(x W1 + b1) W2 + b2.
pub fn feed_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    p: &FeedForwardParams,
    act: Activation,
) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = match act {
        Activation::Gelu => tape.gelu(h)?,
        Activation::Identity => h,
    };
    let y = tape.matmul(h, p.w2)?;
    tape.add_row(y, p.b2)
}
