use std::fs;
use std::path::Path;

use cmfiou::config::RunConfig;
use cmfiou::io::{write_calib, RawScan};
use cmfiou::model::Model;
use cmfiou::pipeline::{load_scene, output_paths, run_pipeline, run_scene, select_proposals};
use cmfiou::postprocess::{nms, ScoredDetection};
use cmfiou::synthetic::{synthetic_scene, write_scene, SyntheticConfig};
use cmfiou::Error;

fn fixture_config() -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(11);
    cfg.pseudo_stride = 4;
    cfg
}

fn fixture_dir(dir: &Path, scenes: usize) {
    for i in 0..scenes {
        let s = synthetic_scene(&format!("{i:06}"), 100 + i as u64, &SyntheticConfig::default()).unwrap();
        write_scene(dir, &s).unwrap();
    }
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("lidar")] {
        let mut entries: Vec<_> = fs::read_dir(&sub).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file()) {
            out.push((p.display().to_string().replace(&dir.display().to_string(), ""), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn empty_scan_gives_no_detections() {
    let dir = tempfile::tempdir().unwrap();
    fixture_dir(dir.path(), 1);
    let cfg = fixture_config();
    let mut scene = load_scene(dir.path(), "000000").unwrap();
    scene.scan = RawScan::default();
    let out = run_scene(&scene, &Model::seeded(&cfg, 1), &cfg).unwrap();
    assert!(out.detections.is_empty() && out.results.is_empty());
}

#[test]
fn zero_regression_keeps_proposals() {
    let dir = tempfile::tempdir().unwrap();
    fixture_dir(dir.path(), 1);
    let cfg = fixture_config();
    let mut model = Model::seeded(&cfg, 1);
    model.zero_regression();
    let scene = load_scene(dir.path(), "000000").unwrap();
    let out = run_scene(&scene, &model, &cfg).unwrap();
    let inputs = select_proposals(&scene.rpn, cfg.total_rois);
    assert_eq!(out.proposals, inputs);
    assert!(!out.detections.is_empty());
    for d in &out.detections {
        assert!(inputs.iter().any(|p| p.bbox == d.bbox && p.class_id == d.class_id));
    }
    // Every kept box is an input box, so NMS over the inputs with the same
    // scores must keep the same sequence.
    let rescored: Vec<ScoredDetection> = inputs
        .iter()
        .map(|p| {
            let d = out.detections.iter().find(|d| d.bbox == p.bbox);
            let (c, i) = d.map_or((0.0, 0.0), |d| (d.cls_score, d.iou_score));
            ScoredDetection::new(p.bbox, p.class_id, c, i, cfg.beta).unwrap()
        })
        .collect();
    let kept: Vec<_> = nms(&rescored, cfg.nms_iou, cfg.nms_view)
        .into_iter()
        .filter(|&i| rescored[i].confidence > 0.0)
        .map(|i| rescored[i].bbox)
        .collect();
    assert_eq!(kept, out.detections.iter().map(|d| d.bbox).collect::<Vec<_>>());
}

#[test]
fn byte_identical_across_runs_and_jobs() {
    let scenes = tempfile::tempdir().unwrap();
    fixture_dir(scenes.path(), 3);
    let cfg = fixture_config();
    let model = Model::seeded(&cfg, 2);
    let mut trees = Vec::new();
    for jobs in [1, 4, 1] {
        let out = tempfile::tempdir().unwrap();
        let res = run_pipeline(scenes.path(), &model, &cfg, out.path(), jobs).unwrap();
        assert_eq!(res.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["000000", "000001", "000002"]);
        assert!(output_paths(out.path(), "000001").0.exists());
        trees.push(read_tree(out.path()));
    }
    assert_eq!(trees[0].len(), 6);
    assert!(trees[0].iter().any(|(_, b)| !b.is_empty()));
    assert_eq!(trees[0], trees[1]);
    assert_eq!(trees[0], trees[2]);
}

#[test]
fn failing_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    fixture_dir(dir.path(), 1);
    let mut calib = cmfiou::synthetic::kitti_like_calib();
    calib.r0_rect = [[0.0; 3]; 3];
    fs::write(dir.path().join("calib/000000.txt"), write_calib(&calib)).unwrap();
    let cfg = fixture_config();
    let out = tempfile::tempdir().unwrap();
    let err = run_pipeline(dir.path(), &Model::seeded(&cfg, 1), &cfg, out.path(), 1).unwrap_err();
    match err {
        Error::Scene { scene, source } => {
            assert_eq!(scene, "000000");
            assert!(matches!(*source, Error::Stage { stage: "projection", .. }), "{source}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn missing_scene_file_fails_in_load() {
    let dir = tempfile::tempdir().unwrap();
    fixture_dir(dir.path(), 1);
    fs::remove_file(dir.path().join("calib/000000.txt")).unwrap();
    let cfg = fixture_config();
    let out = tempfile::tempdir().unwrap();
    let err = run_pipeline(dir.path(), &Model::seeded(&cfg, 1), &cfg, out.path(), 1).unwrap_err();
    assert!(err.to_string().contains("`load`"), "{err}");
}
