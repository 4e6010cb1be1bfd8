//! On-disk formats: IDX, label binaries, dataset cache and report CSVs.

use std::collections::BTreeSet;
use std::path::Path;

use gift_core::data::{load_bundle, load_idx, save_bundle, write_idx, DatasetBundle};
use gift_core::harness::report::RESULTS_HEADER;
use gift_core::harness::{emit_report, grid_sweep, parse_axis, ExperimentConfig};
use gift_core::labels::{softmax_rows, LabelMatrix, LabelRole};
use gift_core::Tensor;

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn idx_hand_built_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
    // two 2x3 images, labels 4 and 1, written byte by byte
    let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    bytes.extend([0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 0]);
    std::fs::write(&img, bytes).unwrap();
    std::fs::write(&lbl, [0, 0, 8, 1, 0, 0, 0, 2, 4, 1]).unwrap();
    let b = load_idx(&img, &lbl).unwrap();
    assert_eq!(b.images.shape(), &[2, 1, 2, 3]);
    assert_eq!(&b.images.data()[..6], &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(b.hard.classes(), vec![4, 1]);
    assert_eq!(b.classes, 5);
}

#[test]
fn idx_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
    let pixels: Vec<u8> = (0..3 * 16).map(|i| (i * 5) as u8).collect();
    write_idx(&img, &lbl, 4, 4, &pixels, &[0, 2, 1]).unwrap();
    let b = load_idx(&img, &lbl).unwrap();
    assert_eq!(b.len(), 3);
    assert_eq!(b.images.data()[17], 85.0 / 255.0);

    // images and labels swapped: wrong magic on both
    let err = load_idx(&lbl, &img).unwrap_err().to_string();
    assert!(err.contains("bad magic"), "{err}");

    let short = dir.path().join("short");
    std::fs::write(&short, &std::fs::read(&img).unwrap()[..30]).unwrap();
    assert!(load_idx(&short, &lbl).is_err());

    let other = dir.path().join("lbl2");
    write_idx(&dir.path().join("img2"), &other, 4, 4, &pixels[..32], &[0, 1]).unwrap();
    assert!(load_idx(&img, &other).is_err());
}

#[test]
fn label_binary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let raw = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.9).sin()).collect()).unwrap();
    let soft = LabelMatrix::new(softmax_rows(&raw), LabelRole::Soft, "fixture").unwrap();
    let path = dir.path().join("soft.glbl");
    soft.write_binary(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"GLBL");
    let back = LabelMatrix::read_binary(&path).unwrap();
    assert_eq!(back.role(), LabelRole::Soft);
    assert_eq!(back.values().data(), soft.values().data());

    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(LabelMatrix::from_bytes(&corrupt, "corrupt").is_err());
    assert!(LabelMatrix::from_bytes(&bytes[..bytes.len() - 3], "truncated").is_err());
}

#[test]
fn dataset_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let images = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 / 7.0).collect()).unwrap();
    let hard = LabelMatrix::from_classes(&[0, 1, 1, 0], 2).unwrap();
    let soft = LabelMatrix::new(
        Tensor::new(vec![4, 2], vec![0.9, 0.1, 0.3, 0.7, 0.2, 0.8, 0.6, 0.4]).unwrap(),
        LabelRole::Soft,
        "t",
    )
    .unwrap();
    let logits = Tensor::new(vec![4, 2], vec![1.0, -1.0, 0.0, 2.0, -0.5, 0.5, 3.0, 1.0]).unwrap();
    let bundle = DatasetBundle::new(images, hard, "fixture")
        .unwrap()
        .with_soft(soft)
        .unwrap()
        .with_teacher_logits(logits)
        .unwrap();
    save_bundle(&bundle, dir.path(), "fx").unwrap();
    let back = load_bundle(dir.path(), "fx").unwrap();
    assert_eq!(back.images.data(), bundle.images.data());
    assert_eq!(back.hard.classes(), bundle.hard.classes());
    assert_eq!(back.soft.unwrap().values().data(), bundle.soft.unwrap().values().data());
    assert_eq!(back.teacher_logits.unwrap().data(), bundle.teacher_logits.unwrap().data());
}

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("dataset.classes", "3"),
        ("dataset.per_class", "12"),
        ("dataset.test_per_class", "5"),
        ("dataset.dim", "4"),
        ("dataset.ipc", "4"),
        ("teacher.hidden", "8"),
        ("teacher.epochs", "3"),
        ("student.hidden", "8"),
        ("epochs", "5"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn report_files_join_on_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let axes = vec![parse_axis("loss=kl,cosine").unwrap(), parse_axis("seed=0,1").unwrap()];
    let records = grid_sweep(&tiny(), &axes).unwrap();
    let files = emit_report(&records, dir.path()).unwrap();

    let (header, rows) = read_csv(&files.results);
    assert_eq!(header, RESULTS_HEADER);
    // two groups of two seeds: four run rows and two aggregates
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r[9] == "*").count(), 2);

    let (cheader, crows) = read_csv(&files.configs);
    assert_eq!(cheader, ["fingerprint", "key", "value"]);
    let known: BTreeSet<&str> = crows.iter().map(|r| r[0].as_str()).collect();
    for r in &rows {
        assert!(known.contains(r[0].as_str()), "fingerprint {} missing from configs.csv", r[0]);
    }

    // one curve row per epoch and run
    let (_, curve) = read_csv(&files.loss_curves);
    assert_eq!(curve.len(), 4 * 5);
    let (_, norms) = read_csv(&files.grad_norms);
    assert_eq!(norms.len(), 4 * 5);
    assert!(norms.iter().all(|r| r[3].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn report_reemit_leaves_no_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let rec = gift_core::harness::run_experiment(&tiny()).unwrap();
    for _ in 0..3 {
        emit_report(std::slice::from_ref(&rec), dir.path()).unwrap();
    }
    let names: BTreeSet<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let expected: BTreeSet<String> = ["configs.csv", "grad_norms.csv", "loss_curves.csv", "results.csv", "summary.md"]
        .into_iter()
        .map(String::from)
        .collect();
    assert_eq!(names, expected);
    let (_, rows) = read_csv(&dir.path().join("results.csv"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn fingerprint_frozen() {
    // canonical serialization is platform independent; this value was
    // recorded once and must not drift
    assert_eq!(ExperimentConfig::default().fingerprint(), FROZEN_DEFAULT);
    let mut moved = ExperimentConfig::default();
    moved.set("output", "elsewhere").unwrap();
    assert_eq!(moved.fingerprint(), FROZEN_DEFAULT);
}

const FROZEN_DEFAULT: &str = "ac1def5dddeae6d5";
