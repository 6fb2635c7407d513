use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbe_core::binarizer::read_codes;
use dbe_core::config::KeyValues;
use dbe_core::datasets::{write_idx_images, write_idx_labels, write_label_matrix, IdxImages, LabelSet};
use tempfile::TempDir;

const SMALL_NET: &[&str] = &[
    "--code-length",
    "16",
    "--conv1-channels",
    "2",
    "--conv2-channels",
    "3",
    "--dense-width",
    "12",
    "--epochs",
    "1",
    "--batch-size",
    "16",
    "--val-size",
    "20",
];

fn dbe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Digit-like fixture: class `c` lights up a class-specific band of rows.
fn write_fixture(dir: &Path, n: usize, name: &str) -> (PathBuf, PathBuf) {
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let mut pixels = Vec::with_capacity(n * 784);
    for (i, &y) in labels.iter().enumerate() {
        for p in 0..784 {
            let row = p / 28;
            let on = row / 3 == usize::from(y) || (p * 31 + i * 7) % 97 == 0;
            pixels.push(if on { 220 } else { 10 });
        }
    }
    let img = dir.join(format!("{name}-images"));
    let lab = dir.join(format!("{name}-labels"));
    let mut buf = Vec::new();
    write_idx_images(&mut buf, &IdxImages { count: n, rows: 28, cols: 28, pixels }).unwrap();
    fs::write(&img, buf).unwrap();
    let mut buf = Vec::new();
    write_idx_labels(&mut buf, &labels).unwrap();
    fs::write(&lab, buf).unwrap();
    (img, lab)
}

struct Trained {
    dir: TempDir,
    images: PathBuf,
    labels: PathBuf,
    run: PathBuf,
}

fn trained(extra: &[&str]) -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path(), 120, "train");
    let run = dir.path().join("run");
    let mut args = vec!["train", "--train-images", s(&images), "--train-labels", s(&labels), "--out", s(&run)];
    args.extend_from_slice(SMALL_NET);
    args.extend_from_slice(extra);
    ok(&dbe(&args));
    Trained { dir, images, labels, run }
}

fn manifest(dir: &Path) -> KeyValues {
    KeyValues::parse(&fs::read_to_string(dir.join("manifest.txt")).unwrap()).unwrap()
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let t = trained(&["--lambda", "0.01"]);
    for f in ["model.dbec", "train_log.csv", "manifest.txt"] {
        assert!(t.run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(t.run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,loss,val_acc,seconds\n"));
    assert_eq!(log.lines().count(), 2);
    let m = manifest(&t.run);
    assert_eq!(m.get("command"), Some("train"));
    assert_eq!(m.get("config.lambda"), Some("0.01"));
    assert_eq!(m.get("config.batch_size"), Some("16"));
    assert!(m.contains("started_unix") && m.contains("tool_version"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path(), 60, "train");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\nlambda = 0.5\nweight_decay = 0.001\n").unwrap();
    let out = dir.path().join("out");
    let mut args = vec!["train", "--config", s(&cfg), "--lambda", "0.25", "--train-images", s(&images)];
    args.extend_from_slice(&["--train-labels", s(&labels), "--out", s(&out)]);
    args.extend_from_slice(SMALL_NET);
    ok(&dbe(&args));
    let m = manifest(&out);
    assert_eq!(m.get("config.lambda"), Some("0.25"));
    assert_eq!(m.get("config.weight_decay"), Some("0.001"));
    assert_eq!(m.get("config.momentum"), Some("0.9"));
}

#[test]
fn unknown_key_fails_listing_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "learnin_rate = 0.1\n").unwrap();
    let out = dir.path().join("out");
    let r = dbe(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("learnin_rate") && err.contains("learning_rate") && err.contains("code_length"), "{err}");
    assert!(!out.exists());
}

#[test]
fn missing_data_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("nope");
    let r = dbe(&["train", "--train-images", s(&missing), "--train-labels", s(&missing), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(!out.exists());
}

#[test]
fn export_is_deterministic_and_consistent_with_analysis() {
    let t = trained(&[]);
    let ckpt = t.run.join("model.dbec");
    let (a, b) = (t.dir.path().join("a"), t.dir.path().join("b"));
    let first = ok(&dbe(&["export-codes", "--checkpoint", s(&ckpt), "--images", s(&t.images), "--labels", s(&t.labels), "--out", s(&a)]));
    ok(&dbe(&["export-codes", "--checkpoint", s(&ckpt), "--images", s(&t.images), "--out", s(&b)]));
    let bytes = fs::read(a.join("codes.dbe1")).unwrap();
    assert_eq!(bytes, fs::read(b.join("codes.dbe1")).unwrap());
    let codes = read_codes(&bytes[..]).unwrap();
    assert_eq!((codes.len(), codes.code_length()), (120, 16));
    assert_eq!(fs::read(a.join("labels-idx1-ubyte")).unwrap(), fs::read(&t.labels).unwrap());

    let (big_images, _) = write_fixture(t.dir.path(), 6300, "big");
    let c = t.dir.path().join("c");
    ok(&dbe(&["export-codes", "--checkpoint", s(&ckpt), "--images", s(&big_images), "--out", s(&c)]));
    let exported = ok(&dbe(&["export-codes", "--checkpoint", s(&ckpt), "--images", s(&big_images), "--out", s(&c)]));
    let an = t.dir.path().join("an");
    let analyzed = ok(&dbe(&["analyze-activations", "--checkpoint", s(&ckpt), "--images", s(&big_images), "--out", s(&an)]));
    assert_eq!(exported, analyzed);
    assert!(first.contains("frac_mid="));
    let hist = fs::read_to_string(an.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 101);
    let fr = fs::read_to_string(an.join("fractions.csv")).unwrap();
    let total: f64 = fr.lines().skip(1).take(3).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-5);
    assert_eq!(fs::read_to_string(an.join("density.csv")).unwrap().lines().count(), 31);
}

#[test]
fn export_rejects_mismatched_images() {
    let t = trained(&[]);
    let small = t.dir.path().join("small");
    let mut buf = Vec::new();
    write_idx_images(&mut buf, &IdxImages { count: 2, rows: 8, cols: 8, pixels: vec![0; 128] }).unwrap();
    fs::write(&small, buf).unwrap();
    let out = t.dir.path().join("x");
    let r = dbe(&["export-codes", "--checkpoint", s(&t.run.join("model.dbec")), "--images", s(&small), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("configuration error"));
    assert!(!out.exists());
}

#[test]
fn classify_and_retrieve_on_exported_codes() {
    let t = trained(&[]);
    let codes_dir = t.dir.path().join("codes");
    ok(&dbe(&[
        "export-codes",
        "--checkpoint",
        s(&t.run.join("model.dbec")),
        "--images",
        s(&t.images),
        "--labels",
        s(&t.labels),
        "--out",
        s(&codes_dir),
    ]));
    let codes = codes_dir.join("codes.dbe1");
    let labels = codes_dir.join("labels-idx1-ubyte");
    let cls = t.dir.path().join("cls");
    ok(&dbe(&[
        "eval-classify", "--train-codes", s(&codes), "--train-labels", s(&labels), "--test-codes", s(&codes),
        "--test-labels", s(&t.labels), "--svm-epochs", "3", "--out", s(&cls),
    ]));
    let m = fs::read_to_string(cls.join("metrics.csv")).unwrap();
    assert_eq!(m.lines().count(), 2);
    assert!(m.lines().nth(1).unwrap().starts_with("accuracy,16,"));

    let ret = t.dir.path().join("ret");
    ok(&dbe(&[
        "eval-retrieve", "--db-codes", s(&codes), "--db-labels", s(&labels), "--query-codes", s(&codes),
        "--query-labels", s(&labels), "--precision-at", "1,10", "--dump-rankings", "3", "--out", s(&ret),
    ]));
    let tsv = fs::read_to_string(ret.join("rankings.tsv")).unwrap();
    let bytes = fs::read(&codes).unwrap();
    let set = read_codes(&bytes[..]).unwrap();
    for line in tsv.lines().skip(1).filter(|l| l.split('\t').nth(1) == Some("1")) {
        let f: Vec<&str> = line.split('\t').collect();
        let (q, db): (usize, usize) = (f[0].parse().unwrap(), f[2].parse().unwrap());
        assert_eq!(f[3], "0");
        assert_eq!(set.row(q), set.row(db));
        assert!(db <= q);
    }
    let metrics = fs::read_to_string(ret.join("metrics.csv")).unwrap();
    assert!(metrics.contains("map,16,") && metrics.contains("precision@10,16,"));
}

#[test]
fn annotate_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let labels = LabelSet::multilabel(
        vec![true, false, true, false, false, true, true, true, false, true, true, false],
        4,
    )
    .unwrap();
    let path = dir.path().join("truth.dbel");
    let mut buf = Vec::new();
    write_label_matrix(&labels, &mut buf).unwrap();
    fs::write(&path, buf).unwrap();
    let out = dir.path().join("ann");
    let stdout = ok(&dbe(&["eval-annotate", "--labels", s(&path), "--predictions", s(&path), "--out", s(&out)]));
    assert!(stdout.contains("o_f1=1.000000"), "{stdout}");
    let m = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(m.contains("n_cp,0,7.000000"));
}

#[test]
fn synth_then_multilabel_training() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_fixture(dir.path(), 50, "src");
    let synth = dir.path().join("synth");
    ok(&dbe(&["make-synth", "--images", s(&images), "--labels", s(&labels), "--count", "64", "--seed", "3", "--out", s(&synth)]));
    let run = dir.path().join("run");
    let mut args = vec![
        "train", "--task", "multilabel", "--input-height", "56", "--input-width", "56",
        "--train-images", s(&synth.join("images-idx3-ubyte")).to_owned().leak(),
        "--train-labels", s(&synth.join("labels.dbel")).to_owned().leak(),
        "--out", s(&run),
    ];
    args.extend_from_slice(SMALL_NET);
    ok(&dbe(&args));
    assert_eq!(manifest(&run).get("config.task"), Some("multilabel"));
}
