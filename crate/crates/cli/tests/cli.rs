mod common;

use std::fs;

use common::{code, east, metrics, p, stderr, stdout};
use east::formats::{format_quad_file, parse_quad_file, QuadRecord, TensorFile};
use east::Quad;
use tempfile::TempDir;

fn box_record() -> QuadRecord {
    QuadRecord::from_quad(&Quad::axis_aligned(10.0, 20.0, 40.0, 12.0).unwrap())
}

#[test]
fn empty_gt_file_gives_all_zero_score() {
    let dir = TempDir::new().unwrap();
    let gt = dir.path().join("gt.txt");
    fs::write(&gt, "").unwrap();
    let out = east(["labelgen", "--gt", p(&gt), "--size", "64x64", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let score = TensorFile::read(dir.path().join("score.tnsr")).unwrap();
    assert_eq!(score.dims, vec![16, 16]);
    assert!(score.data.iter().all(|&v| v == 0.0));
    let geometry = TensorFile::read(dir.path().join("geometry.tnsr")).unwrap();
    assert_eq!(geometry.dims, vec![5, 16, 16]);
}

#[test]
fn malformed_gt_line_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let gt = dir.path().join("gt.txt");
    fs::write(&gt, "1,2,3,4,5,6,7\n").unwrap();
    let out = east(["labelgen", "--gt", p(&gt), "--size", "64x64", "--out", p(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gt.txt"));
}

#[test]
fn missing_input_and_bad_flags_exit_two() {
    assert_eq!(code(&east(["nms", "--input", "/nonexistent/dets.txt", "--out", "/tmp/x.txt"])), 2);
    assert_eq!(code(&east(["labelgen", "--gt", "a", "--size", "64by64", "--out", "b"])), 2);
    assert_eq!(code(&east(["no-such-command"])), 2);
}

#[test]
fn non_convex_quad_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let gt = dir.path().join("gt.txt");
    // A bow tie: edges cross.
    fs::write(&gt, "0,0,10,10,10,0,0,10\n").unwrap();
    let out = east(["labelgen", "--gt", p(&gt), "--size", "64x64", "--out", p(dir.path())]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn thousand_duplicates_collapse() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("dets.txt");
    let output = dir.path().join("kept.txt");
    let stats = dir.path().join("stats.csv");
    let rec = QuadRecord {
        score: Some(1.0),
        ..box_record()
    };
    fs::write(&input, format_quad_file(&vec![rec; 1000])).unwrap();
    let out = east(["nms", "--input", p(&input), "--out", p(&output), "--stats", p(&stats)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let kept = parse_quad_file(&fs::read_to_string(&output).unwrap()).unwrap();
    assert_eq!(kept.len(), 1);
    assert!((kept[0].score.unwrap() - 1000.0).abs() < 1e-9);
    for (a, b) in kept[0].coords.iter().zip(rec.coords) {
        assert!((a - b).abs() < 1e-9);
    }
    let csv = fs::read_to_string(&stats).unwrap();
    assert_eq!(csv.lines().nth(1), Some("1000,1,999,999"));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = TempDir::new().unwrap();
    let gt = dir.path().join("gt.txt");
    fs::write(&gt, format_quad_file(&[box_record()])).unwrap();
    let out = east(["eval", "--dets", p(&gt), "--gt", p(&gt)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(metrics(&stdout(&out)), Some((1.0, 1.0, 1.0)));
}

#[test]
fn labelgen_decode_nms_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("gt.txt"), format_quad_file(&[box_record()])).unwrap();
    for head in ["rbox", "quad"] {
        let run = |args: &[&str]| {
            let out = east(args);
            assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        };
        run(&["labelgen", "--gt", p(&d.join("gt.txt")), "--size", "64x64", "--head", head, "--out", p(d)]);
        run(&[
            "decode",
            "--score",
            p(&d.join("score.tnsr")),
            "--geometry",
            p(&d.join("geometry.tnsr")),
            "--head",
            head,
            "--threshold",
            "0.5",
            "--out",
            p(&d.join("cand.txt")),
        ]);
        run(&["nms", "--input", p(&d.join("cand.txt")), "--out", p(&d.join("dets.txt"))]);
        let out = east(["eval", "--dets", p(&d.join("dets.txt")), "--gt", p(&d.join("gt.txt")), "--iou", "0.95"]);
        assert_eq!(metrics(&stdout(&out)), Some((1.0, 1.0, 1.0)), "{head}");
    }
}

#[test]
fn decode_rejects_mismatched_maps() {
    let dir = TempDir::new().unwrap();
    let score = dir.path().join("score.tnsr");
    let geometry = dir.path().join("geometry.tnsr");
    TensorFile::new(vec![4, 4], vec![0.0; 16]).write(&score).unwrap();
    TensorFile::new(vec![5, 3, 3], vec![0.0; 45]).write(&geometry).unwrap();
    let out = east([
        "decode",
        "--score",
        p(&score),
        "--geometry",
        p(&geometry),
        "--out",
        p(&dir.path().join("o.txt")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn check_grads_passes() {
    let out = east(["check-grads", "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    for name in ["balanced_xent", "iou_loss", "angle_loss", "quad_loss", "network_rbox", "network_quad"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn synth_writes_images_and_ground_truth() {
    let dir = TempDir::new().unwrap();
    let out = east(["synth", "--start", "3", "--count", "2", "--out", p(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for i in [3, 4] {
        assert!(dir.path().join(format!("scene_{i:05}.pgm")).exists());
        let gt = fs::read_to_string(dir.path().join(format!("scene_{i:05}.txt"))).unwrap();
        assert!(!parse_quad_file(&gt).unwrap().is_empty());
    }
}
