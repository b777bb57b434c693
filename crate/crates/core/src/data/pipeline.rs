//! End-to-end orchestration shared by the CLI and the acceptance suite:
//! generate, train, embed, index, and evaluate, all at f32 run precision.

use std::path::PathBuf;

use crate::container::write_tensor;
use crate::data::config::{EvalAggregator, RunConfig};
use crate::data::manifest::{
    generate_synthetic_dataset, load_manifest, load_object_cloud, load_object_views, load_triplets,
    DatasetManifest,
};
use crate::encoder3d::encode_cloud;
use crate::error::{Error, Result};
use crate::mvagg::{aggregate, mean_pool_baseline};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::store::ParamStore;
use crate::retrieval::{build_index, query_topk, recall_at_k, save_index, QueryResult, RetrievalIndex};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::training::{
    append_loss_log, init_model, train_stage1, train_stage2, ModelConfig, TrainOutcome,
};

/// Fresh parameter store with the architecture registered, ready to receive
/// a checkpoint.
pub fn fresh_store(model: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new(SeededRng::derive(seed, "model-init"));
    init_model(&mut store, model)?;
    Ok(store)
}

/// Load a checkpoint into a fresh store of this run's architecture.
pub fn load_model(cfg: &RunConfig, path: &PathBuf) -> Result<(ModelConfig, ParamStore<f32>)> {
    let model = cfg.model_config()?;
    let mut store = fresh_store(&model, cfg.seed)?;
    load_checkpoint(path, &mut store)?;
    crate::training::verify_model(&store, &model)?;
    Ok((model, store))
}

pub fn run_gen_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    generate_synthetic_dataset(&cfg.dataset_spec(), &cfg.data_dir)
}

/// Train one stage from the on-disk dataset and save its checkpoint (and
/// the loss log when configured). Returns the outcome for inspection.
pub fn run_train(cfg: &RunConfig, stage: u8) -> Result<TrainOutcome<f32>> {
    if stage != 1 && stage != 2 {
        return Err(Error::Usage(format!("stage must be 1 or 2, got {stage}")));
    }
    let manifest = load_manifest(&cfg.data_dir)?;
    let dataset = load_triplets::<f32>(&manifest)?;
    let model = cfg.model_config()?;
    let tc = cfg.train_config(stage);
    let outcome = match stage {
        1 => train_stage1(&dataset, &model, &tc)?,
        _ => {
            let mut store = fresh_store(&model, cfg.seed)?;
            load_checkpoint(&cfg.stage1_checkpoint, &mut store)?;
            train_stage2(&dataset, store, &model, &tc)?
        }
    };
    let path = if stage == 1 { &cfg.stage1_checkpoint } else { &cfg.stage2_checkpoint };
    save_checkpoint(&outcome.store, path)?;
    if let Some(log) = &cfg.loss_log {
        append_loss_log(log, &outcome.log)?;
    }
    Ok(outcome)
}

/// Per-object image-aligned 3D embeddings, in manifest order.
pub fn embed_objects(
    manifest: &DatasetManifest,
    model: &ModelConfig,
    store: &ParamStore<f32>,
) -> Result<Vec<(String, Vec<f32>)>> {
    let mut out = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let cloud = load_object_cloud(manifest, i)?;
        let emb = encode_cloud(store, &cloud, &model.encoder, model.ablate_normals)?;
        let f = emb
            .f3d_img
            .ok_or_else(|| Error::Data("encoder was built without the image-alignment head".into()))?;
        out.push((manifest.objects[i].object_id.clone(), f));
    }
    Ok(out)
}

/// Fused multi-view query embeddings from each object's first `views` view
/// features, in manifest order.
pub fn fused_queries(
    manifest: &DatasetManifest,
    model: &ModelConfig,
    store: &ParamStore<f32>,
    views: usize,
    agg: EvalAggregator,
) -> Result<Vec<(String, Vec<f32>)>> {
    if views == 0 || views > manifest.views {
        return Err(Error::Usage(format!(
            "need 1 <= views <= {}, got {views}",
            manifest.views
        )));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let all = load_object_views(manifest, i)?;
        let sub = Tensor::matrix(
            views,
            all.cols(),
            all.data()[..views * all.cols()].to_vec(),
        )?;
        let q = match agg {
            EvalAggregator::Learned => aggregate(store, &sub, &model.aggregator)?.f_mvimg,
            EvalAggregator::MeanPool => mean_pool_baseline(&sub)?,
        };
        out.push((manifest.objects[i].object_id.clone(), q));
    }
    Ok(out)
}

/// Build the retrieval index over every object's 3D embedding.
pub fn build_object_index(
    manifest: &DatasetManifest,
    model: &ModelConfig,
    store: &ParamStore<f32>,
) -> Result<RetrievalIndex> {
    build_index(&embed_objects(manifest, model, store)?)
}

/// One evaluation row: views used, K, and the recall fraction.
pub type RecallRow = (usize, usize, f64);

/// Query the index with fused features at each view count and tabulate
/// Recall@K for every requested K.
pub fn evaluate(
    manifest: &DatasetManifest,
    model: &ModelConfig,
    store: &ParamStore<f32>,
    index: &RetrievalIndex,
    views_list: &[usize],
    ks: &[usize],
    agg: EvalAggregator,
) -> Result<Vec<RecallRow>> {
    if views_list.is_empty() || ks.is_empty() {
        return Err(Error::Usage("need at least one view count and one K".into()));
    }
    let max_k = *ks.iter().max().expect("nonempty ks");
    let mut rows = Vec::with_capacity(views_list.len() * ks.len());
    for &v in views_list {
        let queries = fused_queries(manifest, model, store, v, agg)?;
        let results: Vec<(String, QueryResult)> = queries
            .into_iter()
            .map(|(id, q)| Ok((id, query_topk(index, &q, max_k)?)))
            .collect::<Result<_>>()?;
        let report = recall_at_k(&results, ks)?;
        for (k, r) in report.recalls {
            rows.push((v, k, r));
        }
    }
    Ok(rows)
}

/// Write each object's 3D embedding to `<object>/f3d.fbt`.
pub fn write_3d_embeddings(cfg: &RunConfig) -> Result<usize> {
    let manifest = load_manifest(&cfg.data_dir)?;
    let (model, store) = load_model(cfg, &cfg.stage2_checkpoint)?;
    let embeddings = embed_objects(&manifest, &model, &store)?;
    for (i, (_, e)) in embeddings.iter().enumerate() {
        let t = Tensor::<f32>::row(e.clone())?;
        write_tensor(&t, &manifest.object_dir(i).join("f3d.fbt"))?;
    }
    Ok(embeddings.len())
}

/// Write each object's fused view embedding to `<object>/fmv.fbt`, using
/// the first `views` views (all of them when `None`).
pub fn write_view_embeddings(cfg: &RunConfig, views: Option<usize>) -> Result<usize> {
    let manifest = load_manifest(&cfg.data_dir)?;
    let (model, store) = load_model(cfg, &cfg.stage2_checkpoint)?;
    let views = views.unwrap_or(manifest.views);
    let queries = fused_queries(&manifest, &model, &store, views, cfg.eval_aggregator)?;
    for (i, (_, q)) in queries.iter().enumerate() {
        let t = Tensor::<f32>::row(q.clone())?;
        write_tensor(&t, &manifest.object_dir(i).join("fmv.fbt"))?;
    }
    Ok(queries.len())
}

/// Assemble the index file from the per-object `f3d.fbt` files written by
/// [`write_3d_embeddings`].
pub fn build_index_from_files(cfg: &RunConfig) -> Result<RetrievalIndex> {
    let manifest = load_manifest(&cfg.data_dir)?;
    let mut entries = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let path = manifest.object_dir(i).join("f3d.fbt");
        let t = crate::container::read_tensor::<f32>(&path)?;
        if t.rank() != 2 || t.rows() != 1 {
            return Err(Error::Shape(format!(
                "embedding file {} must be a single row",
                path.display()
            )));
        }
        entries.push((manifest.objects[i].object_id.clone(), t.data().to_vec()));
    }
    let index = build_index(&entries)?;
    save_index(&index, &cfg.index_file)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::load_index;
    use crate::training::stage_of;

    // One tiny dataset and a full pipeline pass shared by the tests below;
    // kept small so the whole module stays quick.
    fn tiny_cfg(dir: &std::path::Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 21;
        cfg.data_dir = dir.join("ds");
        cfg.objects = 8;
        cfg.classes = 4;
        cfg.views = 4;
        cfg.points = 160;
        cfg.dim = 16;
        cfg.batch_size = 4;
        cfg.epochs_stage1 = 2;
        cfg.epochs_stage2 = 2;
        cfg.stage1_checkpoint = dir.join("s1.fbck");
        cfg.stage2_checkpoint = dir.join("s2.fbck");
        cfg.index_file = dir.join("index.fbix");
        cfg.loss_log = Some(dir.join("loss.csv"));
        cfg
    }

    #[test]
    fn test_full_pipeline_runs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        run_gen_data(&cfg).unwrap();
        let s1 = run_train(&cfg, 1).unwrap();
        assert_eq!(stage_of(&s1.store).unwrap(), 1);
        let s2 = run_train(&cfg, 2).unwrap();
        assert_eq!(stage_of(&s2.store).unwrap(), 2);
        assert!(!s2.log.is_empty());
        let log_text = std::fs::read_to_string(cfg.loss_log.as_ref().unwrap()).unwrap();
        assert_eq!(log_text.lines().count(), s1.log.len() + s2.log.len());

        let n = write_3d_embeddings(&cfg).unwrap();
        assert_eq!(n, 8);
        write_view_embeddings(&cfg, Some(2)).unwrap();
        let index = build_index_from_files(&cfg).unwrap();
        assert_eq!(index.len(), 8);
        let reloaded = load_index(&cfg.index_file).unwrap();
        assert_eq!(reloaded, index);

        // Second identical run from scratch: byte-identical artifacts.
        let dir2 = tempfile::tempdir().unwrap();
        let cfg2 = tiny_cfg(dir2.path());
        run_gen_data(&cfg2).unwrap();
        run_train(&cfg2, 1).unwrap();
        run_train(&cfg2, 2).unwrap();
        write_3d_embeddings(&cfg2).unwrap();
        build_index_from_files(&cfg2).unwrap();
        assert_eq!(
            std::fs::read(&cfg.stage2_checkpoint).unwrap(),
            std::fs::read(&cfg2.stage2_checkpoint).unwrap()
        );
        assert_eq!(
            std::fs::read(&cfg.index_file).unwrap(),
            std::fs::read(&cfg2.index_file).unwrap()
        );

        // Evaluation produces a full grid of rows in range.
        let manifest = load_manifest(&cfg.data_dir).unwrap();
        let (model, store) = load_model(&cfg, &cfg.stage2_checkpoint).unwrap();
        let rows = evaluate(
            &manifest,
            &model,
            &store,
            &index,
            &[1, 2, 4],
            &[1, 3],
            EvalAggregator::Learned,
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        for &(v, k, r) in &rows {
            assert!(v == 1 || v == 2 || v == 4);
            assert!(k == 1 || k == 3);
            assert!((0.0..=1.0).contains(&r));
        }
        let rows2 = evaluate(
            &manifest,
            &model,
            &store,
            &index,
            &[1, 2, 4],
            &[1, 3],
            EvalAggregator::Learned,
        )
        .unwrap();
        assert_eq!(rows, rows2);

        // The mean-pool baseline also evaluates cleanly.
        let baseline = evaluate(
            &manifest,
            &model,
            &store,
            &index,
            &[2],
            &[1],
            EvalAggregator::MeanPool,
        )
        .unwrap();
        assert_eq!(baseline.len(), 1);
    }

    #[test]
    fn test_run_train_rejects_bad_stage_and_missing_data() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        assert!(matches!(run_train(&cfg, 3), Err(Error::Usage(_))));
        // No dataset generated yet: data error.
        assert!(matches!(run_train(&cfg, 1), Err(Error::Data(_))));
        // Stage 2 without a stage-1 checkpoint.
        run_gen_data(&cfg).unwrap();
        assert!(run_train(&cfg, 2).is_err());
    }

    #[test]
    fn test_fused_queries_validates_view_count() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let manifest = run_gen_data(&cfg).unwrap();
        let model = cfg.model_config().unwrap();
        let store = fresh_store(&model, cfg.seed).unwrap();
        assert!(fused_queries(&manifest, &model, &store, 0, EvalAggregator::Learned).is_err());
        assert!(fused_queries(&manifest, &model, &store, 5, EvalAggregator::Learned).is_err());
        let q = fused_queries(&manifest, &model, &store, 4, EvalAggregator::Learned).unwrap();
        assert_eq!(q.len(), 8);
        assert_eq!(q[0].1.len(), 16);
    }
}
