//! End-to-end command tests driven through the dispatch entry point.

use std::path::Path;

use fusionbert::container::{encode_tensor, fnv1a};
use fusionbert::tensor::Tensor;
use fusionbert_cli::dispatch;

struct CmdOutput {
    code: i32,
    out: String,
    err: String,
}

fn fb(args: &[&str]) -> CmdOutput {
    let mut argv = vec!["fusionbert".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = dispatch(&argv, &mut out, &mut err);
    CmdOutput {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn write_tiny_config(dir: &Path) -> String {
    let cfg = format!(
        "seed = 33\n\
         paths.data_dir = {0}/ds\n\
         paths.stage1_checkpoint = {0}/s1.fbck\n\
         paths.stage2_checkpoint = {0}/s2.fbck\n\
         paths.index = {0}/index.fbix\n\
         dataset.objects = 8\n\
         dataset.classes = 4\n\
         dataset.views = 4\n\
         dataset.points = 160\n\
         dataset.dim = 16\n\
         train.batch_size = 4\n\
         train.epochs_stage1 = 2\n\
         train.epochs_stage2 = 2\n",
        dir.display()
    );
    let path = dir.join("run.cfg");
    std::fs::write(&path, cfg).unwrap();
    path.display().to_string()
}

#[test]
fn test_usage_errors_exit_one_with_usage_text() {
    let r = fb(&["--no-such-flag"]);
    assert_eq!(r.code, 1);
    assert!(r.err.to_lowercase().contains("usage"), "{}", r.err);

    let r = fb(&[]);
    assert_eq!(r.code, 1);

    let r = fb(&["frobnicate"]);
    assert_eq!(r.code, 1);

    let r = fb(&["--help"]);
    assert_eq!(r.code, 0);
    assert!(r.out.contains("gen-data"));
}

#[test]
fn test_selftest_passes_on_a_clean_build() {
    let r = fb(&["selftest"]);
    assert_eq!(r.code, 0, "stderr: {}", r.err);
    assert!(r.out.contains("ok fps-oracle"));
    assert!(r.out.contains("selftest passed"));
}

#[test]
fn test_bad_configs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Missing config file: data error.
    let r = fb(&["gen-data", "--config", &format!("{}/absent.cfg", dir.path().display())]);
    assert_eq!(r.code, 2, "stderr: {}", r.err);
    assert!(r.err.starts_with("error:"));
    assert_eq!(r.err.lines().count(), 1);

    // Unknown key: usage error.
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "dataset.objects = 4\nnot.a.key = 1\n").unwrap();
    let r = fb(&["gen-data", "--config", &bad.display().to_string()]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("unknown config key"));

    // Training without a dataset: data error.
    let cfg = write_tiny_config(dir.path());
    let r = fb(&["train", "--stage", "1", "--config", &cfg]);
    assert_eq!(r.code, 2);

    // Bad stage flag: usage error.
    let r = fb(&["train", "--stage", "5", "--config", &cfg]);
    assert_eq!(r.code, 1);
}

#[test]
fn test_full_workflow_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());

    let r = fb(&["gen-data", "--config", &cfg]);
    assert_eq!(r.code, 0, "stderr: {}", r.err);
    assert!(r.out.contains("generated 8 objects"));
    assert!(dir.path().join("ds").join("manifest.txt").is_file());

    let r = fb(&["train", "--stage", "1", "--config", &cfg]);
    assert_eq!(r.code, 0, "stderr: {}", r.err);
    assert!(r.out.contains("stage 1 done"));

    let r = fb(&["train", "--stage", "2", "--config", &cfg]);
    assert_eq!(r.code, 0, "stderr: {}", r.err);

    let r = fb(&["embed-3d", "--config", &cfg]);
    assert_eq!(r.code, 0, "stderr: {}", r.err);
    assert!(dir.path().join("ds").join("obj000").join("f3d.fbt").is_file());

    let r = fb(&["embed-views", "--views", "2", "--config", &cfg]);
    assert_eq!(r.code, 0, "stderr: {}", r.err);
    let fmv = dir.path().join("ds").join("obj003").join("fmv.fbt");
    assert!(fmv.is_file());

    let r = fb(&["build-index", "--config", &cfg]);
    assert_eq!(r.code, 0, "stderr: {}", r.err);
    assert!(dir.path().join("index.fbix").is_file());

    let r = fb(&["query", "--topk", "3", "--config", &cfg, &fmv.display().to_string()]);
    assert_eq!(r.code, 0, "stderr: {}", r.err);
    let lines: Vec<&str> = r.out.lines().collect();
    assert_eq!(lines[0], "rank,object_id,score");
    assert_eq!(lines.len(), 4);
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3);
        assert_eq!(fields[0], (i + 1).to_string());
        assert!(fields[1].starts_with("obj"));
        fields[2].parse::<f32>().unwrap();
    }

    let r = fb(&["query", "--topk", "0", "--config", &cfg, &fmv.display().to_string()]);
    assert_eq!(r.code, 1);

    let eval1 = fb(&["eval", "--views", "1,2", "--ks", "1,3", "--config", &cfg]);
    assert_eq!(eval1.code, 0, "stderr: {}", eval1.err);
    let lines: Vec<&str> = eval1.out.lines().collect();
    assert_eq!(lines[0], "views,K,recall");
    assert_eq!(lines.len(), 5);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3);
        let recall: f64 = fields[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&recall));
    }

    // Same command twice: identical table.
    let eval2 = fb(&["eval", "--views", "1,2", "--ks", "1,3", "--config", &cfg]);
    assert_eq!(eval1.out, eval2.out);
}

#[test]
fn test_query_with_nonfinite_embedding_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    assert_eq!(fb(&["gen-data", "--config", &cfg]).code, 0);
    assert_eq!(fb(&["train", "--stage", "1", "--config", &cfg]).code, 0);
    assert_eq!(fb(&["train", "--stage", "2", "--config", &cfg]).code, 0);
    assert_eq!(fb(&["embed-3d", "--config", &cfg]).code, 0);
    assert_eq!(fb(&["build-index", "--config", &cfg]).code, 0);

    // A checksum-valid tensor file whose payload hides a NaN.
    let t = Tensor::<f32>::row(vec![0.25; 16]).unwrap();
    let mut bytes = encode_tensor(&t);
    let header = 4 + 1 + 1 + 16;
    bytes[header..header + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    let body = bytes.len() - 8;
    let sum = fnv1a(&bytes[..body]);
    bytes[body..].copy_from_slice(&sum.to_le_bytes());
    let nan_path = dir.path().join("nan.fbt");
    std::fs::write(&nan_path, &bytes).unwrap();

    let r = fb(&["query", "--topk", "3", "--config", &cfg, &nan_path.display().to_string()]);
    assert_eq!(r.code, 3, "stderr: {}", r.err);
}
