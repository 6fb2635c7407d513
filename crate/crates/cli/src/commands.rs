use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dbe_core::binarizer::{
    activation_stats, density_transform_check, read_codes, threshold_codes, write_codes, ActivationStats,
    BinaryCodeSet,
};
use dbe_core::config::KeyValues;
use dbe_core::datasets::{
    load_idx_dataset, load_idx_images, load_labels, split_train_val, synth_multilabel, write_idx_images,
    write_label_matrix, IdxImages, ImageDataset, LabelSet, Split,
};
use dbe_core::network::{build_dbe_lenet, read_checkpoint, write_checkpoint, Model};
use dbe_core::retrieval::{
    annotate_top_k, classify_on_codes, evaluate_retrieval, metrics_csv, overall_metrics, rank_all,
    write_rankings_tsv, HammingIndex, QuerySource, SvmConfig,
};
use dbe_core::trainer::{self, sweep_csv, CodeEvaluation};
use dbe_core::Error;

use crate::output::Run;
use crate::settings::{ConfigArgs, Settings};
use crate::{AnnotateArgs, ClassifyArgs, RetrieveArgs, SynthArgs};

const EMBED_CHUNK: usize = 500;

fn load_model(path: &Path) -> Result<(Model<f32>, KeyValues)> {
    let f = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    read_checkpoint(BufReader::new(f)).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_code_file(path: &Path) -> Result<BinaryCodeSet> {
    let f = File::open(path).with_context(|| format!("opening codes {}", path.display()))?;
    read_codes(BufReader::new(f)).with_context(|| format!("reading codes {}", path.display()))
}

fn labels_from(path: &Path, classes: usize) -> Result<LabelSet> {
    load_labels(path, classes).with_context(|| format!("reading labels {}", path.display()))
}

fn load_split(settings: &Settings) -> Result<(ImageDataset, ImageDataset)> {
    let d = &settings.data;
    let full = load_idx_dataset(&d.train_images, &d.train_labels, settings.model.classes, Split::Train)
        .with_context(|| format!("loading training data {}", d.train_images.display()))?;
    let full = if d.train_limit > 0 { full.head(d.train_limit) } else { full };
    Ok(split_train_val(&full, d.val_size, d.split_seed)?)
}

fn images_for(model: &Model<f32>, path: &Path) -> Result<dbe_core::Tensor<f32>> {
    let images = load_idx_images(path).with_context(|| format!("reading images {}", path.display()))?;
    let shape = &images.shape()[1..];
    if shape != model.config().input_shape {
        return Err(Error::Config(format!(
            "images {} are {shape:?} but the checkpoint expects {:?}",
            path.display(),
            model.config().input_shape
        ))
        .into());
    }
    Ok(images)
}

fn stats_summary(s: &ActivationStats) -> String {
    format!(
        "frac_low={:.6} frac_mid={:.6} frac_high={:.6}",
        s.frac_low(),
        s.frac_mid(),
        s.frac_high()
    )
}

pub fn train(args: &ConfigArgs, out: &Path) -> Result<()> {
    let settings = Settings::resolve(args)?;
    let mut run = Run::new("train", out);
    run.config(&settings.to_key_values());
    run.note("seed", settings.model.seed);
    run.input("train_images", &settings.data.train_images);
    run.input("train_labels", &settings.data.train_labels);
    let (train_set, val_set) = load_split(&settings)?;
    log::info!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let model = build_dbe_lenet(&settings.model)?;
    let (model, log) = trainer::train(model, &train_set, &val_set, &settings.train)?;
    let best = log.best().expect("at least one epoch");
    run.note("best_epoch", best.epoch);
    run.note("best_val_score", best.val_score);
    let mut ckpt = Vec::new();
    write_checkpoint(&model, &settings.train.to_key_values(), &mut ckpt)?;
    run.file("model.dbec", ckpt);
    run.file("train_log.csv", log.to_csv());
    run.commit()
}

pub fn export_codes(checkpoint: &Path, images: &Path, labels: Option<&Path>, out: &Path) -> Result<()> {
    let mut run = Run::new("export-codes", out);
    run.input("checkpoint", checkpoint);
    run.input("images", images);
    let (model, _) = load_model(checkpoint)?;
    run.config(&model.config().to_key_values());
    let x = images_for(&model, images)?;
    let z = model.embed(&x, EMBED_CHUNK)?.z;
    let codes = threshold_codes(&z)?;
    let stats = activation_stats(z.data())?;
    println!("{}", stats_summary(&stats));
    let mut buf = Vec::new();
    write_codes(&codes, &mut buf)?;
    run.file("codes.dbe1", buf);
    if let Some(path) = labels {
        run.input("labels", path);
        let l = labels_from(path, model.config().classes)?;
        ensure!(l.len() == codes.len(), Error::Data(format!("{} labels for {} images", l.len(), codes.len())));
        let name = match l {
            LabelSet::Multiclass { .. } => "labels-idx1-ubyte",
            LabelSet::Multilabel { .. } => "labels.dbel",
        };
        run.file(name, std::fs::read(path)?);
    }
    run.note("count", codes.len());
    run.note("code_length", codes.code_length());
    run.commit()
}

pub fn eval_classify(a: &ClassifyArgs) -> Result<()> {
    let mut run = Run::new("eval-classify", &a.out);
    for (n, p) in [
        ("train_codes", &a.train_codes),
        ("train_labels", &a.train_labels),
        ("test_codes", &a.test_codes),
        ("test_labels", &a.test_labels),
    ] {
        run.input(n, p);
    }
    let svm = SvmConfig {
        reg: a.reg,
        epochs: a.svm_epochs,
        seed: a.svm_seed,
    };
    run.note("config.reg", svm.reg);
    run.note("config.svm_epochs", svm.epochs);
    run.note("seed", svm.seed);
    let tr = load_code_file(&a.train_codes)?;
    let te = load_code_file(&a.test_codes)?;
    let ytr = labels_from(&a.train_labels, a.classes)?;
    let yte = labels_from(&a.test_labels, a.classes)?;
    for (codes, labels, what) in [(&tr, &ytr, "training"), (&te, &yte, "test")] {
        if codes.len() != labels.len() {
            return Err(Error::Data(format!("{} {what} codes but {} labels", codes.len(), labels.len())).into());
        }
    }
    let (Some(ytr_c), Some(yte_c)) = (ytr.as_classes(), yte.as_classes()) else {
        bail!(Error::Usage("classification needs single-class labels".into()));
    };
    let classes = ytr.classes().max(yte.classes());
    let acc = classify_on_codes(&tr, ytr_c, &te, yte_c, classes, &svm)?;
    println!("accuracy={acc:.6}");
    run.file("metrics.csv", metrics_csv([("accuracy", tr.code_length(), acc)]));
    run.commit()
}

pub fn eval_retrieve(a: &RetrieveArgs) -> Result<()> {
    let mut run = Run::new("eval-retrieve", &a.out);
    for (n, p) in [
        ("db_codes", &a.db_codes),
        ("db_labels", &a.db_labels),
        ("query_codes", &a.query_codes),
        ("query_labels", &a.query_labels),
    ] {
        run.input(n, p);
    }
    run.note("config.exclude_self", a.exclude_self);
    let db = load_code_file(&a.db_codes)?;
    let db_labels = labels_from(&a.db_labels, a.classes)?;
    let q = load_code_file(&a.query_codes)?;
    let q_labels = labels_from(&a.query_labels, a.classes)?;
    if q.len() != q_labels.len() {
        return Err(Error::Data(format!("{} query codes but {} labels", q.len(), q_labels.len())).into());
    }
    let index = HammingIndex::new(db, db_labels)?;
    let source = if a.exclude_self { QuerySource::Database } else { QuerySource::Separate };
    let report = evaluate_retrieval(&index, &q, &q_labels, source, &a.precision_at)?;
    let l = q.code_length();
    let mut rows = vec![
        ("map".to_string(), report.map.map),
        ("queries_evaluated".to_string(), report.map.evaluated as f64),
        ("queries_without_relevant".to_string(), report.map.without_relevant as f64),
    ];
    rows.extend(report.precision.iter().map(|&(k, p)| (format!("precision@{k}"), p)));
    println!("map={:.6}", report.map.map);
    run.file("metrics.csv", metrics_csv(rows.iter().map(|(m, v)| (m.as_str(), l, *v))));
    if let Some(top) = a.dump_rankings {
        let rankings = rank_all(&index, &q, &q_labels, source)?;
        let mut buf = Vec::new();
        write_rankings_tsv(&rankings, Some(top), &mut buf)?;
        run.file("rankings.tsv", buf);
    }
    run.commit()
}

pub fn eval_annotate(a: &AnnotateArgs) -> Result<()> {
    let mut run = Run::new("eval-annotate", &a.out);
    run.input("labels", &a.labels);
    run.note("config.k", a.k);
    let (predicted, truth, code_length) = match (&a.checkpoint, &a.images, &a.predictions) {
        (Some(ckpt), Some(images), _) => {
            run.input("checkpoint", ckpt);
            run.input("images", images);
            let (model, _) = load_model(ckpt)?;
            let truth = labels_from(&a.labels, model.config().classes)?;
            let x = images_for(&model, images)?;
            let logits = model.embed(&x, EMBED_CHUNK)?.logits;
            (annotate_top_k(&logits, a.k)?, truth, model.config().code_length)
        }
        (_, _, Some(pred)) => {
            run.input("predictions", pred);
            let truth = labels_from(&a.labels, 0)?;
            let p = labels_from(pred, truth.classes())?;
            (( 0..p.len()).map(|i| p.positives(i)).collect(), truth, 0)
        }
        _ => bail!(Error::Usage("pass --checkpoint with --images, or --predictions".into())),
    };
    if predicted.len() != truth.len() {
        return Err(Error::Data(format!("{} predictions for {} labelled samples", predicted.len(), truth.len())).into());
    }
    let gt: Vec<Vec<usize>> = (0..truth.len()).map(|i| truth.positives(i)).collect();
    let m = overall_metrics(&predicted, &gt)?;
    println!("o_p={:.6} o_r={:.6} o_f1={:.6}", m.precision, m.recall, m.f1);
    run.file(
        "metrics.csv",
        metrics_csv([
            ("o_p", code_length, m.precision),
            ("o_r", code_length, m.recall),
            ("o_f1", code_length, m.f1),
            ("n_cp", code_length, m.correct as f64),
            ("n_p", code_length, m.predicted as f64),
            ("n_g", code_length, m.ground_truth as f64),
        ]),
    );
    run.commit()
}

pub fn analyze(checkpoint: &Path, images: &Path, bins: usize, out: &Path) -> Result<()> {
    let mut run = Run::new("analyze-activations", out);
    run.input("checkpoint", checkpoint);
    run.input("images", images);
    run.note("config.bins", bins);
    let (model, _) = load_model(checkpoint)?;
    run.config(&model.config().to_key_values());
    let x = images_for(&model, images)?;
    let emb = model.embed(&x, EMBED_CHUNK)?;
    let stats = activation_stats(emb.z.data())?;
    println!("{}", stats_summary(&stats));
    let samples: Vec<f64> = emb.t.data().iter().map(|&v| f64::from(v)).collect();
    let density = density_transform_check(&samples, bins)?;
    let mut fractions = String::from("metric,value\n");
    for (m, v) in [
        ("frac_low", stats.frac_low()),
        ("frac_mid", stats.frac_mid()),
        ("frac_high", stats.frac_high()),
        ("density_l1", density.l1),
    ] {
        writeln!(fractions, "{m},{v:.6}")?;
    }
    let mut table = String::from("z_center,empirical,analytic\n");
    for ((c, e), an) in density.centers.iter().zip(&density.empirical).zip(&density.analytic) {
        writeln!(table, "{c:.6},{e:.6},{an:.6}")?;
    }
    run.file("histogram.csv", stats.histogram_csv());
    run.file("fractions.csv", fractions);
    run.file("density.csv", table);
    run.commit()
}

pub fn lambda_sweep(args: &ConfigArgs, lambdas: &[f64], out: &Path) -> Result<()> {
    let settings = Settings::resolve(args)?;
    let mut run = Run::new("lambda-sweep", out);
    run.config(&settings.to_key_values());
    run.note("seed", settings.model.seed);
    let list: Vec<String> = lambdas.iter().map(ToString::to_string).collect();
    run.note("config.lambdas", list.join(","));
    run.input("train_images", &settings.data.train_images);
    run.input("test_images", &settings.data.test_images);
    let (train_set, val_set) = load_split(&settings)?;
    let d = &settings.data;
    let test = load_idx_dataset(&d.test_images, &d.test_labels, settings.model.classes, Split::Test)
        .with_context(|| format!("loading test data {}", d.test_images.display()))?;
    let eval = CodeEvaluation {
        test: &test,
        svm: SvmConfig::default(),
    };
    let rows = trainer::lambda_sweep(&settings.model, &settings.train, lambdas, &train_set, &val_set, &eval)?;
    for r in &rows {
        run.file(&format!("train_log_lambda_{}.csv", r.lambda), r.log.to_csv());
    }
    print!("{}", sweep_csv(&rows));
    run.file("sweep.csv", sweep_csv(&rows));
    run.commit()
}

pub fn make_synth(a: &SynthArgs) -> Result<()> {
    let mut run = Run::new("make-synth", &a.out);
    run.input("images", &a.images);
    run.input("labels", &a.labels);
    run.note("seed", a.seed);
    run.note("config.count", a.count);
    let source = load_idx_dataset(&a.images, &a.labels, 10, Split::Train)?;
    let synth = synth_multilabel(a.count, &source, a.seed)?;
    let mut img = Vec::new();
    write_idx_images(&mut img, &IdxImages::from_tensor(&synth.images)?)?;
    let mut lab = Vec::new();
    write_label_matrix(&synth.labels, &mut lab)?;
    run.file("images-idx3-ubyte", img);
    run.file("labels.dbel", lab);
    run.commit()
}
