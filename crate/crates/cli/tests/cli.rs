use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cmfiou::io::{read_depth_map, read_labels, read_points, read_sparse_tensor, write_depth_map, write_labels, DepthEncoding, DepthMap};
use cmfiou::postprocess::{nms, read_detections, write_detections, NmsView, ScoredDetection};
use cmfiou::Box3D;

fn cmfiou(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmfiou")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = cmfiou(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, scenes: usize) {
    ok(&["synth", "--out", s(dir), "--scenes", &scenes.to_string(), "--seed", "21"]);
}

#[test]
fn pseudo_counts_positive_depth_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let d = dir.path();
    let out = d.join("p.cmfp");
    ok(&[
        "pseudo", "--depth", s(&d.join("depth/000000.bin")), "--rgb", s(&d.join("image_2/000000.bin")),
        "--calib", s(&d.join("calib/000000.txt")), "--out", s(&out),
    ]);
    let depth = read_depth_map(&fs::read(d.join("depth/000000.bin")).unwrap()).unwrap();
    let positive = depth.depth.iter().filter(|&&v| v > 0.0).count();
    let pts = read_points(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(pts.len(), positive);
    assert!(pts.iter().all(|p| p.is_pseudo()));

    let vox = d.join("p.cmfv");
    ok(&["voxelize", "--points", s(&out), "--out", s(&vox)]);
    let t = read_sparse_tensor(&fs::read(&vox).unwrap()).unwrap();
    assert!(!t.is_empty() && t.len() <= pts.len());
    let raw_vox = d.join("r.cmfv");
    ok(&["voxelize", "--velodyne", s(&d.join("velodyne/000000.bin")), "--out", s(&raw_vox)]);
    assert!(!read_sparse_tensor(&fs::read(&raw_vox).unwrap()).unwrap().is_empty());
}

#[test]
fn empty_depth_gives_empty_dump() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let d = dir.path();
    let empty = d.join("empty.bin");
    fs::write(&empty, write_depth_map(&DepthMap::zeros(30, 20), DepthEncoding::F32).unwrap()).unwrap();
    let out = d.join("e.cmfp");
    ok(&["pseudo", "--depth", s(&empty), "--calib", s(&d.join("calib/000000.txt")), "--out", s(&out)]);
    assert!(read_points(&fs::read(&out).unwrap()).unwrap().is_empty());
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("lidar")] {
        for e in fs::read_dir(&sub).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_is_repeatable_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 2);
    let cfg = d.join("run.cfg");
    fs::write(&cfg, "# coarse pseudo points keep the test fast\npseudo_stride = 4\n").unwrap();
    let (a, b) = (d.join("out_a"), d.join("out_b"));
    ok(&["pipeline", "--scenes", s(d), "--out", s(&a), "--config", s(&cfg), "--seed", "4", "--jobs", "1"]);
    ok(&["pipeline", "--scenes", s(d), "--out", s(&b), "--config", s(&cfg), "--seed", "4", "--jobs", "4"]);
    assert_eq!(tree(&a), tree(&b));
    let c = d.join("out_c");
    ok(&["pipeline", "--scenes", s(d), "--out", s(&c), "--config", s(&cfg), "--seed", "5"]);
    assert_ne!(tree(&a), tree(&c));

    let csv = String::from_utf8(ok(&["eval", "--results", s(&a), "--labels", s(&d.join("label_2"))]).stdout).unwrap();
    assert!(csv.starts_with("class,difficulty,distance,metric,num_gt,ap\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 4 * 3);
}

#[test]
fn eval_of_labels_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 2);
    let (res, empty) = (d.join("as_results"), d.join("empty_results"));
    fs::create_dir_all(&res).unwrap();
    fs::create_dir_all(&empty).unwrap();
    for id in ["000000", "000001"] {
        let mut labels = read_labels(&fs::read_to_string(d.join(format!("label_2/{id}.txt"))).unwrap()).unwrap();
        labels.iter_mut().for_each(|l| l.score = Some(1.0));
        fs::write(res.join(format!("{id}.txt")), write_labels(&labels)).unwrap();
        fs::write(empty.join(format!("{id}.txt")), "").unwrap();
    }
    let csv_path = d.join("summary.csv");
    ok(&["eval", "--results", s(&res), "--labels", s(&d.join("label_2")), "--out", s(&csv_path)]);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let aps: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(aps.iter().any(|&a| a == "1.000000"));
    assert!(aps.iter().all(|&a| a == "1.000000" || a == "n/a"), "{csv}");

    let csv = String::from_utf8(ok(&["eval", "--results", s(&empty), "--labels", s(&d.join("label_2"))]).stdout).unwrap();
    let aps: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(aps.iter().any(|&a| a == "0.000000"));
    assert!(aps.iter().all(|&a| a == "0.000000" || a == "n/a"));

    fs::remove_file(empty.join("000001.txt")).unwrap();
    let out = cmfiou(&["eval", "--results", s(&empty), "--labels", s(&d.join("label_2"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("only in labels [000001]"), "{err}");
}

#[test]
fn gen_proposals_fills_every_interval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 1);
    let out = d.join("props.txt");
    let labels = d.join("label_2/000000.txt");
    ok(&["gen-proposals", "--labels", s(&labels), "--calib", s(&d.join("calib/000000.txt")), "--iteration", "2", "--out", s(&out), "--seed", "3"]);
    let n_obj = read_labels(&fs::read_to_string(&labels).unwrap()).unwrap().iter().filter(|l| l.class.id().is_some()).count();
    let dump = cmfiou::proposals::read_proposal_dump(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(dump.len(), 100 * n_obj);
    for iv in 0..4 {
        assert_eq!(dump.iter().filter(|p| p.interval == Some(iv)).count(), 25 * n_obj);
    }
    assert!(dump.iter().all(|p| p.scene == "000000" && p.generated));

    let mixed = d.join("mixed.txt");
    ok(&[
        "gen-proposals", "--labels", s(&labels), "--calib", s(&d.join("calib/000000.txt")), "--rpn",
        s(&d.join("proposals/000000.txt")), "--scene", "x", "--out", s(&mixed),
    ]);
    let dump = cmfiou::proposals::read_proposal_dump(&fs::read_to_string(&mixed).unwrap()).unwrap();
    assert_eq!(dump.len(), 160);
    let n_rpn = fs::read_to_string(d.join("proposals/000000.txt")).unwrap().lines().filter(|l| !l.trim().is_empty()).count().min(60);
    assert!(dump[..100].iter().all(|p| p.generated));
    assert!(dump[100..100 + n_rpn].iter().all(|p| !p.generated));
    for i in 100 + n_rpn..160 {
        assert_eq!(dump[i], dump[i % (100 + n_rpn)]);
    }
    let again = d.join("again.txt");
    ok(&[
        "gen-proposals", "--labels", s(&labels), "--calib", s(&d.join("calib/000000.txt")), "--rpn",
        s(&d.join("proposals/000000.txt")), "--scene", "x", "--out", s(&again),
    ]);
    assert_eq!(fs::read(&mixed).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn nms_command_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dets: Vec<ScoredDetection> = (0..12)
        .map(|i| {
            let b = Box3D::new([0.3 * i as f64, 0.1 * (i % 3) as f64, 0.0], [3.9, 1.6, 1.5], 0.05 * i as f64);
            ScoredDetection::new(b, i % 2, 0.1 + 0.07 * i as f64, 0.9 - 0.05 * i as f64, 0.5).unwrap()
        })
        .collect();
    let input = d.join("dets.txt");
    fs::write(&input, write_detections(&dets)).unwrap();
    for (view, beta, t) in [("3d", 0.5, None), ("bev", 0.0, None), ("bev", 1.0, Some(0.3))] {
        let out = d.join(format!("kept_{view}_{beta}.txt"));
        let mut args = vec!["nms", "--input", s(&input), "--out", s(&out), "--view", view];
        let beta_s = beta.to_string();
        args.extend(["--beta", &beta_s]);
        let t_s = t.map(|v: f64| v.to_string());
        if let Some(t) = &t_s {
            args.extend(["--nms-iou", t]);
        }
        ok(&args);
        let v: NmsView = view.parse().unwrap();
        let rescored = read_detections(&fs::read_to_string(&input).unwrap(), beta).unwrap();
        let want: Vec<_> = nms(&rescored, t.unwrap_or(v.default_threshold()), v).into_iter().map(|i| rescored[i].clone()).collect();
        assert_eq!(fs::read_to_string(&out).unwrap(), write_detections(&want));
    }
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = cmfiou(&["nms", "--input", s(&d.join("missing.txt")), "--out", s(&d.join("o.txt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));

    let cfg = d.join("bad.cfg");
    fs::write(&cfg, "voxle_size = 0.1,0.1,0.1\n").unwrap();
    let out = cmfiou(&["bench", "--scenes", "0", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("voxle_size"));

    synth(d, 1);
    fs::write(d.join("calib/000000.txt"), "P2: 1 2 3\n").unwrap();
    let out = cmfiou(&["pipeline", "--scenes", s(d), "--out", s(&d.join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("000000") && err.contains("load"), "{err}");

    let out = cmfiou(&["nms", "--input", s(&d.join("calib/000000.txt")), "--out", s(&d.join("o.txt")), "--beta", "2"]);
    assert!(!out.status.success());
}

#[test]
fn bench_reports_each_scene() {
    let out = ok(&["bench", "--scenes", "1", "--seed", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("scene,raw_points"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn eval_matches_hand_computed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (res, lab) = (d.join("res"), d.join("lab"));
    fs::create_dir_all(&res).unwrap();
    fs::create_dir_all(&lab).unwrap();
    // Two Easy cars 15 m and 20.2 m out; one hit at 0.9, one stray box at 0.8.
    let car = "Car 0 0 0 100 100 200 160 1.5 1.6 3.9";
    fs::write(lab.join("000007.txt"), format!("{car} 0 1.7 15 0\n{car} 3 1.7 20 0\n")).unwrap();
    fs::write(res.join("000007.txt"), format!("{car} 0 1.7 15 0 0.9\n{car} -5 1.7 30 0 0.8\n")).unwrap();

    let csv = String::from_utf8(ok(&["eval", "--results", s(&res), "--labels", s(&lab)]).stdout).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        // Precision 1 up to recall 1/2, nothing beyond: 20 of 40 positions.
        let want = if f[0] == "Car" && (f[2] == "all" || f[2] == "10-40") { "2,0.500000" } else { "0,n/a" };
        assert_eq!(format!("{},{}", f[4], f[5]), want, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 3 * 3 * 4 * 2);
}
