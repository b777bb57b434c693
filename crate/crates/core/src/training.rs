//! Two-stage contrastive alignment. Stage 1 trains the 3D encoder and its
//! adapter heads against per-view image features (and text features when
//! present) with a symmetric InfoNCE loss. Stage 2 freezes the encoder and
//! trains the multi-view aggregator to match the frozen visual-head
//! embeddings. Temperatures are learned in log space and clamped.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use crate::container::fnv1a;
use crate::encoder3d::{
    encode_prepared_vars, init_encoder3d, prepare_cloud, Encoder3DConfig, PreparedCloud,
};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::mvagg::{aggregate_vars, init_aggregator, AggregatorConfig};
use crate::nn::store::ParamStore;
use crate::nn::tape::{Tape, Var};
use crate::nn::{AdamConfig, AdamState};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

pub const TAU_PARAM_STAGE1: &str = "tau1.log";
pub const TAU_PARAM_STAGE2: &str = "tau2.log";

/// One aligned training sample: an object's point cloud, its V per-view
/// image features (unit rows), and an optional text feature.
#[derive(Debug, Clone)]
pub struct TripletSample<S: Scalar> {
    pub object_id: String,
    pub view_features: Tensor<S>,
    pub text_feature: Option<Vec<S>>,
    pub point_cloud: PointCloud,
}

/// Architecture bundle shared by training, embedding, and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: Encoder3DConfig,
    pub aggregator: AggregatorConfig,
    /// Zero the normal channels before encoding (ablation arm).
    pub ablate_normals: bool,
}

impl ModelConfig {
    pub fn desk() -> ModelConfig {
        ModelConfig {
            encoder: Encoder3DConfig::desk(),
            aggregator: AggregatorConfig::desk(),
            ablate_normals: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.aggregator.validate()?;
        if self.encoder.joint_dim != self.aggregator.feature_dim {
            return Err(Error::Usage(format!(
                "encoder joint dim {} must equal aggregator feature dim {}",
                self.encoder.joint_dim, self.aggregator.feature_dim
            )));
        }
        if !self.encoder.adapters {
            return Err(Error::Usage("training requires the encoder adapter heads".into()));
        }
        Ok(())
    }
}

/// Stable hash of the architecture, stored in every checkpoint so later
/// stages refuse parameter files from a different model.
pub fn model_hash(model: &ModelConfig) -> u64 {
    let e = &model.encoder;
    let a = &model.aggregator;
    let text = format!(
        "enc(l={},h={},hid={},exp={},p={},n={},d={},ad={});agg(c={},l={},h={});abl={}",
        e.layers,
        e.heads,
        e.hidden,
        e.mlp_expansion,
        e.patches,
        e.patch_size,
        e.joint_dim,
        e.adapters,
        a.feature_dim,
        a.layers,
        a.heads,
        model.ablate_normals
    );
    fnv1a(text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub seed: u64,
    pub stage: u8,
}

impl TrainConfig {
    pub fn desk_stage(stage: u8, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            // The aggregator stage is far cheaper per epoch, so it gets a
            // longer schedule by default.
            epochs: if stage == 2 { 300 } else { 150 },
            learning_rate: 1e-3,
            tau_init: 0.07,
            tau_min: 0.01,
            tau_max: 1.0,
            seed,
            stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Usage("batch size must be at least 2 for contrastive negatives".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Usage("epoch count must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Usage("learning rate must be positive".into()));
        }
        if self.tau_min <= 0.0 || self.tau_max < self.tau_min {
            return Err(Error::Usage("temperature bounds must satisfy 0 < min <= max".into()));
        }
        if self.tau_init < self.tau_min || self.tau_init > self.tau_max {
            return Err(Error::Usage("initial temperature must lie within the bounds".into()));
        }
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Usage(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub tau: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!("{},{},{},{}", self.step, self.stage, self.loss, self.tau)
    }
}

/// Append step records as "step,stage,loss,tau" lines.
pub fn append_loss_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for entry in log {
        writeln!(file, "{}", entry.line())?;
    }
    Ok(())
}

/// Trained parameters plus the per-step loss trace.
pub struct TrainOutcome<S: Scalar> {
    pub store: ParamStore<S>,
    pub log: Vec<StepLog>,
}

/// Register the full model plus both stage temperatures and the checkpoint
/// metadata slots.
pub fn init_model<S: Scalar>(store: &mut ParamStore<S>, model: &ModelConfig) -> Result<()> {
    model.validate()?;
    init_encoder3d(store, &model.encoder)?;
    init_aggregator(store, &model.aggregator)?;
    store.init_const(TAU_PARAM_STAGE1, vec![1, 1], (0.07f64).ln())?;
    store.init_const(TAU_PARAM_STAGE2, vec![1, 1], (0.07f64).ln())?;
    store.add("meta.stage", Tensor::zeros(vec![1, 1]), false)?;
    let h = model_hash(model);
    let chunks: Vec<S> = [(h >> 48) & 0xffff, (h >> 32) & 0xffff, (h >> 16) & 0xffff, h & 0xffff]
        .iter()
        .map(|&c| S::from_f64(c as f64))
        .collect();
    store.add("meta.config", Tensor::new(vec![1, 4], chunks)?, false)?;
    Ok(())
}

/// Training stage recorded in a checkpoint (1 or 2).
pub fn stage_of<S: Scalar>(store: &ParamStore<S>) -> Result<u8> {
    let v = Scalar::to_f64(store.get("meta.stage")?.value.data()[0]);
    if v == 1.0 {
        Ok(1)
    } else if v == 2.0 {
        Ok(2)
    } else {
        Err(Error::Data("checkpoint has no training stage tag".into()))
    }
}

fn set_stage<S: Scalar>(store: &mut ParamStore<S>, stage: u8) -> Result<()> {
    store.get_mut("meta.stage")?.value.data_mut()[0] = S::from_f64(stage as f64);
    Ok(())
}

/// Error if the checkpoint's architecture hash differs from `model`.
pub fn verify_model<S: Scalar>(store: &ParamStore<S>, model: &ModelConfig) -> Result<()> {
    let h = model_hash(model);
    let want = [(h >> 48) & 0xffff, (h >> 32) & 0xffff, (h >> 16) & 0xffff, h & 0xffff];
    let stored = &store.get("meta.config")?.value;
    for (i, &w) in want.iter().enumerate() {
        if Scalar::to_f64(stored.data()[i]) != w as f64 {
            return Err(Error::Data(
                "checkpoint was built with a different model configuration".into(),
            ));
        }
    }
    Ok(())
}

/// Current temperature value exp(log tau) for one of the stage parameters.
pub fn current_tau<S: Scalar>(store: &ParamStore<S>, name: &str) -> Result<f64> {
    Ok(Scalar::to_f64(store.get(name)?.value.data()[0]).exp())
}

fn check_nce_operand<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<()> {
    if t.rank() != 2 || t.rows() < 2 {
        return Err(Error::Usage(format!(
            "{what} must be a BxD matrix with B >= 2, got dims {:?}",
            t.dims()
        )));
    }
    for r in 0..t.rows() {
        let norm: f64 = t
            .row_slice(r)
            .iter()
            .map(|&x| Scalar::to_f64(x).powi(2))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Numeric(format!(
                "{what} row {r} is not unit-norm (norm {norm})"
            )));
        }
    }
    Ok(())
}

/// Contrastive loss: mean over rows of -log softmax of the matched cosine
/// against all targets. Plain f64 evaluation used by tests and reporting.
pub fn info_nce<S: Scalar>(anchors: &Tensor<S>, targets: &Tensor<S>, tau: f64) -> Result<f64> {
    check_nce_operand(anchors, "anchors")?;
    check_nce_operand(targets, "targets")?;
    if anchors.dims() != targets.dims() {
        return Err(Error::Shape(format!(
            "anchor dims {:?} differ from target dims {:?}",
            anchors.dims(),
            targets.dims()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Usage(format!("temperature must be positive, got {tau}")));
    }
    let b = anchors.rows();
    let d = anchors.cols();
    let mut total = 0.0;
    for i in 0..b {
        let ai = anchors.row_slice(i);
        let mut logits = Vec::with_capacity(b);
        for j in 0..b {
            let tj = targets.row_slice(j);
            let dot: f64 = (0..d)
                .map(|k| Scalar::to_f64(ai[k]) * Scalar::to_f64(tj[k]))
                .sum();
            logits.push(dot / tau);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / b as f64)
}

/// Tape version of [`info_nce`]; `inv_tau` is a 1x1 variable holding 1/tau
/// (shared across the loss terms of one step so the temperature gradient
/// accumulates).
pub fn info_nce_vars<S: Scalar>(
    tape: &mut Tape<S>,
    anchors: Var,
    targets: Var,
    inv_tau: Var,
) -> Result<Var> {
    check_nce_operand(tape.value(anchors), "anchors")?;
    check_nce_operand(tape.value(targets), "targets")?;
    if tape.value(anchors).dims() != tape.value(targets).dims() {
        return Err(Error::Shape("anchor and target dims differ".into()));
    }
    let tt = tape.transpose(targets)?;
    let sim = tape.matmul(anchors, tt)?;
    let logits = tape.scale_var(sim, inv_tau)?;
    let lse = tape.log_sum_exp_rows(logits)?;
    let diag = tape.take_diag(logits)?;
    let delta = tape.sub(lse, diag)?;
    tape.mean_all(delta)
}

fn lease_inv_tau<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, name: &str) -> Result<Var> {
    let log_tau = tape.param(store, name)?;
    let neg = tape.scale(log_tau, -1.0)?;
    tape.exp(neg)
}

/// One stage-1 batch entry: a patchified cloud, the selected view's feature
/// row, and the optional text feature.
pub struct Stage1Item<'a, S: Scalar> {
    pub prepared: &'a PreparedCloud,
    pub view: &'a [S],
    pub text: Option<&'a [S]>,
}

/// Symmetric stage-1 loss: image terms through the visual adapter head in
/// both directions, plus the matching text terms when every sample in the
/// batch carries a text feature.
pub fn stage1_loss_vars<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    items: &[Stage1Item<'_, S>],
    model: &ModelConfig,
) -> Result<Var> {
    if items.len() < 2 {
        return Err(Error::Usage("stage-1 batch needs at least 2 samples".into()));
    }
    let d = model.encoder.joint_dim;
    let with_text = items.iter().all(|it| it.text.is_some());

    let mut img_rows = Vec::with_capacity(items.len());
    let mut txt_rows = Vec::with_capacity(items.len());
    let mut view_data = Vec::with_capacity(items.len() * d);
    let mut text_data = Vec::with_capacity(items.len() * d);
    for item in items {
        if item.view.len() != d {
            return Err(Error::Shape(format!(
                "view feature has {} entries, expected {d}",
                item.view.len()
            )));
        }
        let enc = encode_prepared_vars(tape, store, item.prepared, &model.encoder)?;
        img_rows.push(enc.f3d_img.ok_or_else(|| {
            Error::Usage("stage-1 loss requires the adapter heads".into())
        })?);
        view_data.extend_from_slice(item.view);
        if with_text {
            let text = item.text.unwrap();
            if text.len() != d {
                return Err(Error::Shape(format!(
                    "text feature has {} entries, expected {d}",
                    text.len()
                )));
            }
            txt_rows.push(enc.f3d_txt.expect("adapters exist when f3d_img does"));
            text_data.extend_from_slice(text);
        }
    }
    let inv_tau = lease_inv_tau(tape, store, TAU_PARAM_STAGE1)?;
    let f3d_img = tape.concat_rows(&img_rows)?;
    let img = tape.constant(Tensor::new(vec![items.len(), d], view_data)?)?;
    let a = info_nce_vars(tape, img, f3d_img, inv_tau)?;
    let b = info_nce_vars(tape, f3d_img, img, inv_tau)?;
    let mut sum = tape.add(a, b)?;
    if with_text {
        let f3d_txt = tape.concat_rows(&txt_rows)?;
        let txt = tape.constant(Tensor::new(vec![items.len(), d], text_data)?)?;
        let c = info_nce_vars(tape, txt, f3d_txt, inv_tau)?;
        let t = info_nce_vars(tape, f3d_txt, txt, inv_tau)?;
        sum = tape.add(sum, c)?;
        sum = tape.add(sum, t)?;
    }
    tape.scale(sum, 0.5)
}

/// One stage-2 batch entry: the view subset fed to the aggregator and the
/// precomputed frozen visual-head embedding of the same object.
pub struct Stage2Item<'a, S: Scalar> {
    pub views: Tensor<S>,
    pub target: &'a [S],
}

/// Symmetric stage-2 loss between aggregated multi-view descriptors and the
/// frozen encoder's visual-head embeddings.
pub fn stage2_loss_vars<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    items: &[Stage2Item<'_, S>],
    model: &ModelConfig,
) -> Result<Var> {
    if items.len() < 2 {
        return Err(Error::Usage("stage-2 batch needs at least 2 samples".into()));
    }
    let d = model.aggregator.feature_dim;
    let mut fused_rows = Vec::with_capacity(items.len());
    let mut target_data = Vec::with_capacity(items.len() * d);
    for item in items {
        if item.target.len() != d {
            return Err(Error::Shape(format!(
                "target embedding has {} entries, expected {d}",
                item.target.len()
            )));
        }
        let input = tape.constant(item.views.clone())?;
        let pooled = aggregate_vars(tape, store, input, &model.aggregator)?;
        fused_rows.push(pooled.fused);
        target_data.extend_from_slice(item.target);
    }
    let inv_tau = lease_inv_tau(tape, store, TAU_PARAM_STAGE2)?;
    let fused = tape.concat_rows(&fused_rows)?;
    let targets = tape.constant(Tensor::new(vec![items.len(), d], target_data)?)?;
    let a = info_nce_vars(tape, fused, targets, inv_tau)?;
    let b = info_nce_vars(tape, targets, fused, inv_tau)?;
    let sum = tape.add(a, b)?;
    tape.scale(sum, 0.5)
}

fn validate_dataset<S: Scalar>(dataset: &[TripletSample<S>], model: &ModelConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let mut seen = HashSet::new();
    let d = model.aggregator.feature_dim;
    for sample in dataset {
        if !seen.insert(sample.object_id.as_str()) {
            return Err(Error::Data(format!(
                "duplicate object id '{}' in dataset",
                sample.object_id
            )));
        }
        let views = &sample.view_features;
        if views.rank() != 2 || views.rows() == 0 || views.cols() != d {
            return Err(Error::Data(format!(
                "object '{}' has view features {:?}, expected Vx{d}",
                sample.object_id,
                views.dims()
            )));
        }
        views.validate_finite()?;
        if let Some(text) = &sample.text_feature {
            if text.len() != d {
                return Err(Error::Data(format!(
                    "object '{}' has a {}-dim text feature, expected {d}",
                    sample.object_id,
                    text.len()
                )));
            }
        }
    }
    Ok(())
}

fn set_tau<S: Scalar>(store: &mut ParamStore<S>, name: &str, tau: f64) -> Result<()> {
    store.get_mut(name)?.value.data_mut()[0] = S::from_f64(tau.ln());
    Ok(())
}

/// Align the 3D encoder and adapters with the per-view features. Returns
/// the trained parameters (stage tag 1) and the loss trace.
pub fn train_stage1<S: Scalar>(
    dataset: &[TripletSample<S>],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Usage(format!("train_stage1 called with stage {}", cfg.stage)));
    }
    model.validate()?;
    validate_dataset(dataset, model)?;
    if cfg.batch_size > dataset.len() {
        return Err(Error::Usage(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }

    let mut store: ParamStore<S> = ParamStore::new(SeededRng::derive(cfg.seed, "model-init"));
    init_model(&mut store, model)?;
    set_tau(&mut store, TAU_PARAM_STAGE1, cfg.tau_init)?;

    let prepared: Vec<PreparedCloud> = dataset
        .iter()
        .map(|s| prepare_cloud(&s.point_cloud, &model.encoder, model.ablate_normals))
        .collect::<Result<_>>()?;

    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut rng = SeededRng::new(SeededRng::derive(cfg.seed, "stage1-train"));
    let mut log = Vec::new();
    let mut step = 0u64;
    let (lo, hi) = (cfg.tau_min.ln(), cfg.tau_max.ln());

    for _ in 0..cfg.epochs {
        // One uniformly chosen view per sample per epoch, then the epoch's
        // batch order; both from the same seeded stream in a fixed order.
        let choices: Vec<usize> = dataset
            .iter()
            .map(|s| rng.index(s.view_features.rows()))
            .collect();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < cfg.batch_size {
                continue;
            }
            store.zero_grads();
            let mut tape: Tape<S> = Tape::new();
            let items: Vec<Stage1Item<'_, S>> = batch
                .iter()
                .map(|&i| Stage1Item {
                    prepared: &prepared[i],
                    view: dataset[i].view_features.row_slice(choices[i]),
                    text: dataset[i].text_feature.as_deref(),
                })
                .collect();
            let loss = stage1_loss_vars(&mut tape, &store, &items, model)?;
            let loss_value = Scalar::to_f64(tape.value(loss).data()[0]);
            tape.backward(loss, &mut store)?;
            adam.step(&mut store, &adam_cfg)?;
            store.clamp_param(TAU_PARAM_STAGE1, lo, hi)?;
            step += 1;
            log.push(StepLog {
                step,
                stage: 1,
                loss: loss_value,
                tau: current_tau(&store, TAU_PARAM_STAGE1)?,
            });
        }
    }
    set_stage(&mut store, 1)?;
    Ok(TrainOutcome { store, log })
}

/// Freeze the stage-1 encoder and train the aggregator against its
/// embeddings. Consumes the stage-1 parameter store.
pub fn train_stage2<S: Scalar>(
    dataset: &[TripletSample<S>],
    mut store: ParamStore<S>,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Usage(format!("train_stage2 called with stage {}", cfg.stage)));
    }
    model.validate()?;
    validate_dataset(dataset, model)?;
    if cfg.batch_size > dataset.len() {
        return Err(Error::Usage(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            dataset.len()
        )));
    }
    if stage_of(&store)? != 1 {
        return Err(Error::Data("stage-2 training requires a stage-1 checkpoint".into()));
    }
    verify_model(&store, model)?;

    store.freeze_prefix("encoder3d.");
    store.freeze_prefix("tau1.");
    set_tau(&mut store, TAU_PARAM_STAGE2, cfg.tau_init)?;

    // The encoder is frozen, so its embeddings are constants of the run;
    // compute each object's visual-head target once.
    let mut targets: Vec<Vec<S>> = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let prep = prepare_cloud(&sample.point_cloud, &model.encoder, model.ablate_normals)?;
        let mut tape: Tape<S> = Tape::new();
        let enc = encode_prepared_vars(&mut tape, &store, &prep, &model.encoder)?;
        let img = enc
            .f3d_img
            .ok_or_else(|| Error::Usage("stage-2 targets require the adapter heads".into()))?;
        targets.push(tape.value(img).data().to_vec());
    }

    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut rng = SeededRng::new(SeededRng::derive(cfg.seed, "stage2-train"));
    let mut log = Vec::new();
    let mut step = 0u64;
    let (lo, hi) = (cfg.tau_min.ln(), cfg.tau_max.ln());
    let c = model.aggregator.feature_dim;

    for _ in 0..cfg.epochs {
        // Per sample per epoch: a uniformly sized, uniformly chosen view
        // subset, so the aggregator sees varying view counts.
        let subsets: Vec<Vec<usize>> = dataset
            .iter()
            .map(|s| {
                let v = s.view_features.rows();
                let take = 1 + rng.index(v);
                rng.sample_indices(v, take)
            })
            .collect();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < cfg.batch_size {
                continue;
            }
            store.zero_grads();
            let mut tape: Tape<S> = Tape::new();
            let mut items = Vec::with_capacity(batch.len());
            for &i in batch {
                let subset = &subsets[i];
                let mut data = Vec::with_capacity(subset.len() * c);
                for &v in subset {
                    data.extend_from_slice(dataset[i].view_features.row_slice(v));
                }
                items.push(Stage2Item {
                    views: Tensor::new(vec![subset.len(), c], data)?,
                    target: &targets[i],
                });
            }
            let loss = stage2_loss_vars(&mut tape, &store, &items, model)?;
            let loss_value = Scalar::to_f64(tape.value(loss).data()[0]);
            tape.backward(loss, &mut store)?;
            adam.step(&mut store, &adam_cfg)?;
            store.clamp_param(TAU_PARAM_STAGE2, lo, hi)?;
            step += 1;
            log.push(StepLog {
                step,
                stage: 2,
                loss: loss_value,
                tau: current_tau(&store, TAU_PARAM_STAGE2)?,
            });
        }
    }
    set_stage(&mut store, 2)?;
    Ok(TrainOutcome { store, log })
}
