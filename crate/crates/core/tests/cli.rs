//! Command-line behaviour: exit codes and the outputs of each subcommand.

use std::path::Path;
use std::process::{Command, Output};

use tinyobs::config::PipelineConfig;
use tinyobs::manifest::DatasetManifest;
use tinyobs::mlregions::MLRegionSet;
use tinyobs::model::TrainedModel;
use tinyobs::pipeline::read_ranked_boxes;

fn tinyobs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinyobs")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = tinyobs(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn small_config(dir: &Path) -> String {
    let mut cfg = PipelineConfig::default();
    cfg.proposals.nms_overlap = Some(0.75);
    cfg.proposals.max_scored = Some(300);
    cfg.forest.ordr_trees = 10;
    cfg.forest.obdr_trees = 10;
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[fusion]\ntau_beta = 2.0\n").unwrap();
    let out = tinyobs(&["regions", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fusion.tau_beta"));

    assert_eq!(tinyobs(&["regions", "--out", "x"]).status.code(), Some(2));
    assert_eq!(tinyobs(&["train", "--layers", "9", "--out", "x"]).status.code(), Some(2));
    assert_eq!(tinyobs(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.json");
    std::fs::write(&manifest, "{\"version\": 1, \"records\": [}").unwrap();
    let out = tinyobs(&["regions", "--manifest", manifest.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let missing = dir.path().join("absent.json");
    let out = tinyobs(&["regions", "--manifest", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn full_pipeline_writes_documented_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let data = d.join("data");
    let run = d.join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());
    let manifest = data.join("manifest.json");
    let m = manifest.to_str().unwrap();
    let model = run.join("model.json");
    let model_s = model.to_str().unwrap();

    ok(&["synth", "--n-train", "24", "--n-test", "6", "--seed", "5", "--out", data_s]);
    let loaded = DatasetManifest::load(&manifest).unwrap();
    assert_eq!(loaded.records.len(), 30);

    ok(&["regions", "--manifest", m, "--config", &cfg, "--out", run_s]);
    let regions = MLRegionSet::load(&run.join("regions.json")).unwrap();
    assert_eq!(regions.k(), 4);

    ok(&[
        "train",
        "--manifest",
        m,
        "--config",
        &cfg,
        "--regions",
        run.join("regions.json").to_str().unwrap(),
        "--out",
        run_s,
    ]);
    let trained = TrainedModel::load(&model).unwrap();
    assert_eq!(trained.regions, regions);

    ok(&["infer", "--manifest", m, "--model", model_s, "--config", &cfg, "--out", run_s]);
    for r in loaded.records.iter().filter(|r| r.id.starts_with("test")) {
        assert!(run.join("maps").join(format!("{}.png", r.id)).is_file());
        assert!(run.join("masks").join(format!("{}.png", r.id)).is_file());
    }
    let scored = read_ranked_boxes(&run.join("scores.csv")).unwrap();
    assert_eq!(scored.len(), 6);

    ok(&["eval-roc", "--manifest", m, "--maps", run.join("maps").to_str().unwrap(), "--out", run_s]);
    let roc = std::fs::read_to_string(run.join("roc.csv")).unwrap();
    assert_eq!(roc.lines().count(), 101);
    assert!(std::fs::read_to_string(run.join("roc_summary.csv")).unwrap().contains("0.02,"));

    ok(&["proposals", "--manifest", m, "--model", model_s, "--config", &cfg, "--multistride", "false", "--out", run_s]);
    ok(&["eval-recall", "--manifest", m, "--proposals", run.join("proposals.csv").to_str().unwrap(), "--out", run_s]);
    for f in ["recall_by_count.csv", "recall_by_iou.csv", "ar.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    ok(&["features", "--manifest", m, "--model", model_s, "--config", &cfg, "--out", run_s]);
    let features = std::fs::read_to_string(run.join("features.csv")).unwrap();
    assert_eq!(features.lines().next().unwrap().split(',').count(), 22);
    assert_eq!(features.lines().count(), 1 + 6 * 300);

    ok(&["edges", "--manifest", m, "--model", model_s, "--split", "test", "--out", run_s]);
    assert_eq!(std::fs::read_dir(run.join("edges")).unwrap().count(), 6);
    assert_eq!(std::fs::read_dir(run.join("enhanced")).unwrap().count(), 6);

    ok(&[
        "render",
        "--manifest",
        m,
        "--maps",
        run.join("maps").to_str().unwrap(),
        "--proposals",
        run.join("scores.csv").to_str().unwrap(),
        "--out",
        run_s,
    ]);
    assert_eq!(std::fs::read_dir(run.join("overlays")).unwrap().count(), 6);
    assert_eq!(tinyobs(&["render", "--manifest", m, "--out", run_s]).status.code(), Some(2));
}
