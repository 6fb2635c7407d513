//! Momentum SGD training, per-epoch logging, and the lambda sweep.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::binarizer::threshold_codes;
use crate::config::KeyValues;
use crate::datasets::{ImageDataset, LabelSet};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, Targets, Task};
use crate::network::{build_dbe_lenet, Mode, Model, ModelConfig, NamedTensor};
use crate::retrieval::{annotate_top_k, classify_on_codes, overall_metrics, SvmConfig};

/// Labels predicted per sample when scoring multilabel validation sets.
pub const ANNOTATION_K: usize = 3;
const EVAL_CHUNK: usize = 500;
const SMOOTHING_WINDOW: usize = 5;

/// Step learning rate: `initial * decay^(milestones passed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    /// Zero-based epochs at which the rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    /// Decays by 10x at 60% and 85% of `epochs`.
    pub fn standard(initial: f64, epochs: usize) -> Self {
        let at = |f: f64| (f * epochs as f64).round() as usize;
        Self {
            initial,
            decay: 0.1,
            milestones: vec![at(0.6), at(0.85)],
        }
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_epochs(20)
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "lr_decay",
    "lr_milestones",
    "momentum",
    "weight_decay",
    "train_seed",
    "lambda",
    "nu",
    "rho",
    "task",
];

impl TrainConfig {
    /// Defaults with the decay milestones placed for `epochs`.
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 128,
            lr: LrSchedule::standard(0.05, epochs),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossConfig::default(),
            task: Task::Multiclass,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if [self.lr.initial, self.lr.decay].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("need 0 <= momentum < 1 and weight_decay >= 0".into()));
        }
        self.loss.validate()
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("learning_rate", self.lr.initial);
        kv.set("lr_decay", self.lr.decay);
        let ms: Vec<String> = self.lr.milestones.iter().map(ToString::to_string).collect();
        kv.set("lr_milestones", ms.join(","));
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("train_seed", self.seed);
        kv.set("lambda", self.loss.lambda);
        kv.set("nu", self.loss.nu);
        kv.set("rho", self.loss.rho);
        kv.set("task", self.task);
        kv
    }

    /// Reads [`TRAIN_KEYS`]; milestones default to the standard placement
    /// for the configured epoch count.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let epochs = kv.parsed("epochs")?.unwrap_or(20);
        let d = Self::with_epochs(epochs);
        let milestones = match kv.get("lr_milestones") {
            None => d.lr.milestones.clone(),
            Some("") => Vec::new(),
            Some(s) => s
                .split(',')
                .map(|m| {
                    m.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad lr_milestones entry {m:?}")))
                })
                .collect::<Result<_>>()?,
        };
        let cfg = Self {
            epochs,
            batch_size: kv.parsed("batch_size")?.unwrap_or(d.batch_size),
            lr: LrSchedule {
                initial: kv.parsed("learning_rate")?.unwrap_or(d.lr.initial),
                decay: kv.parsed("lr_decay")?.unwrap_or(d.lr.decay),
                milestones,
            },
            momentum: kv.parsed("momentum")?.unwrap_or(d.momentum),
            weight_decay: kv.parsed("weight_decay")?.unwrap_or(d.weight_decay),
            seed: kv.parsed("train_seed")?.unwrap_or(d.seed),
            loss: LossConfig {
                lambda: kv.parsed("lambda")?.unwrap_or(d.loss.lambda),
                nu: kv.parsed("nu")?.unwrap_or(d.loss.nu),
                rho: kv.parsed("rho")?.unwrap_or(d.loss.rho),
            },
            task: kv.parsed("task")?.unwrap_or(d.task),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(params: &[NamedTensor<f32>]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }
}

/// `v = momentum v + g + wd p; p = p - lr v`, elementwise.
pub fn sgd_step(
    params: &mut [NamedTensor<f32>],
    grads: &[Vec<f32>],
    state: &mut SgdState,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    update_params(params, grads, state, lr, momentum, |_| weight_decay)
}

/// Whether weight decay applies to the named parameter: batch-norm scales
/// and shifts and all biases are exempt.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

fn update_params(
    params: &mut [NamedTensor<f32>],
    grads: &[Vec<f32>],
    state: &mut SgdState,
    lr: f32,
    momentum: f32,
    weight_decay: impl Fn(&str) -> f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if g.len() != p.tensor.len() || v.len() != p.tensor.len() {
            return Err(Error::Dimension(format!("gradient for {} has the wrong size", p.name)));
        }
        let wd = weight_decay(&p.name);
        for ((w, &gi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi + wd * *w;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy (multiclass) or overall F1 at K = 3 (multilabel).
    pub val_score: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Record with the highest validation score (earliest on ties).
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .fold(None, |b: Option<&EpochRecord>, r| match b {
                Some(b) if b.val_score >= r.val_score => Some(b),
                _ => Some(r),
            })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// `epoch,loss,val_acc,seconds`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_acc,seconds\n");
        for r in &self.records {
            writeln!(s, "{},{:.6},{:.6},{:.3}", r.epoch, r.loss, r.val_score, r.seconds).expect("string write");
        }
        s
    }
}

/// Trailing means over full windows of `window` values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

fn task_of(labels: &LabelSet) -> Task {
    match labels {
        LabelSet::Multiclass { .. } => Task::Multiclass,
        LabelSet::Multilabel { .. } => Task::Multilabel,
    }
}

/// Validation score of `model` on `data`: argmax accuracy for multiclass
/// labels, overall F1 of the top three logits for multilabel ones.
pub fn validation_score(model: &Model<f32>, data: &ImageDataset) -> Result<f64> {
    let out = model.embed(&data.images, EVAL_CHUNK)?;
    match &data.labels {
        LabelSet::Multiclass { labels, .. } => {
            let pred = annotate_top_k(&out.logits, 1)?;
            let hits = pred.iter().zip(labels).filter(|(p, &y)| p[0] == y).count();
            Ok(hits as f64 / labels.len().max(1) as f64)
        }
        labels @ LabelSet::Multilabel { .. } => {
            let pred = annotate_top_k(&out.logits, ANNOTATION_K.min(labels.classes()))?;
            let truth: Vec<Vec<usize>> = (0..labels.len()).map(|i| labels.positives(i)).collect();
            Ok(overall_metrics(&pred, &truth)?.f1)
        }
    }
}

fn check_data(model: &Model<f32>, data: &ImageDataset, task: Task) -> Result<()> {
    let cfg = model.config();
    if data.image_shape() != cfg.input_shape {
        return Err(Error::Dimension(format!(
            "{:?} images do not match model input {:?}",
            data.image_shape(),
            cfg.input_shape
        )));
    }
    if data.labels.classes() != cfg.classes {
        return Err(Error::Data(format!(
            "labels have {} classes, model {}",
            data.labels.classes(),
            cfg.classes
        )));
    }
    if task_of(&data.labels) != task {
        return Err(Error::Usage(format!("{task} training given the other kind of labels")));
    }
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    Ok(())
}

/// Trains with momentum SGD and returns the snapshot with the best
/// validation score, plus the full log.
pub fn train(
    mut model: Model<f32>,
    train_set: &ImageDataset,
    val_set: &ImageDataset,
    cfg: &TrainConfig,
) -> Result<(Model<f32>, TrainLog)> {
    cfg.validate()?;
    check_data(&model, train_set, cfg.task)?;
    check_data(&model, val_set, cfg.task)?;
    let n = train_set.len();
    if n < 2 {
        return Err(Error::Data("training needs at least two samples".into()));
    }
    let membership = train_set.labels.membership();
    let classes = train_set.labels.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut state = SgdState::new(model.params());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let lr = cfg.lr.rate(epoch) as f32;
        let (mut loss_sum, mut batches) = (0.0f64, 0usize);
        // A trailing batch of one cannot be batch-normalized and is skipped.
        for (b, idx) in order.chunks(cfg.batch_size).enumerate().filter(|(_, c)| c.len() >= 2) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.leaf(train_set.images.select_rows(idx));
            let emb = model.forward(&mut tape, &bound, x, Mode::Train)?;
            let classes_batch: Vec<usize>;
            let member_batch: Vec<bool>;
            let targets = match (&train_set.labels, cfg.task) {
                (LabelSet::Multiclass { labels, .. }, Task::Multiclass) => {
                    classes_batch = idx.iter().map(|&i| labels[i]).collect();
                    Targets::Classes(&classes_batch)
                }
                _ => {
                    member_batch = idx
                        .iter()
                        .flat_map(|&i| membership[i * classes..(i + 1) * classes].iter().copied())
                        .collect();
                    Targets::Membership(&member_batch)
                }
            };
            let terms = total_loss(&mut tape, emb.z, emb.logits, targets, &cfg.loss, cfg.task)?;
            let loss = tape.value(terms.total).data()[0];
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {loss} at epoch {} batch {b} (first sample {})",
                    epoch + 1,
                    idx[0]
                )));
            }
            tape.backward(terms.total)?;
            let grads = bound.grads(&tape);
            let wd = cfg.weight_decay as f32;
            update_params(model.params_mut(), &grads, &mut state, lr, cfg.momentum as f32, |name| {
                if is_decayed(name) {
                    wd
                } else {
                    0.0
                }
            })?;
            model.apply_batch_stats(&emb.batch_stats);
            loss_sum += f64::from(loss);
            batches += 1;
        }
        let val_score = validation_score(&model, val_set)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / batches.max(1) as f64,
            val_score,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} val {:.4} lr {lr:e} ({:.1}s)",
            record.epoch,
            record.loss,
            record.val_score,
            record.seconds
        );
        log.records.push(record);
        warn_on_rising_loss(&log);
        if best.as_ref().is_none_or(|(s, _)| val_score > *s) {
            best = Some((val_score, model.clone()));
        }
    }
    let (_, best_model) = best.expect("at least one epoch");
    Ok((best_model, log))
}

fn warn_on_rising_loss(log: &TrainLog) {
    let smooth = moving_average(&log.losses(), SMOOTHING_WINDOW);
    if let [.., prev, last] = smooth[..] {
        if last > prev * 1.1 {
            log::warn!(
                "smoothed training loss rose from {prev:.4} to {last:.4} by epoch {}",
                log.records.len()
            );
        }
    }
}

/// Test data and classifier settings used to score a trained model.
#[derive(Debug, Clone, Copy)]
pub struct CodeEvaluation<'a> {
    pub test: &'a ImageDataset,
    pub svm: SvmConfig,
}

/// Accuracy of a linear classifier fitted on thresholded training codes and
/// applied to thresholded test codes.
pub fn code_accuracy(model: &Model<f32>, train_set: &ImageDataset, eval: &CodeEvaluation<'_>) -> Result<f64> {
    let (Some(ytr), Some(yte)) = (train_set.labels.as_classes(), eval.test.labels.as_classes()) else {
        return Err(Error::Usage("code accuracy needs multiclass labels".into()));
    };
    let tr = threshold_codes(&model.embed(&train_set.images, EVAL_CHUNK)?.z)?;
    let te = threshold_codes(&model.embed(&eval.test.images, EVAL_CHUNK)?.z)?;
    classify_on_codes(&tr, ytr, &te, yte, train_set.labels.classes(), &eval.svm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub accuracy: f64,
    pub log: TrainLog,
}

/// Trains one freshly initialized model per `lambda` with identical seeds and
/// schedule and scores each on the test codes.
pub fn lambda_sweep(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    lambdas: &[f64],
    train_set: &ImageDataset,
    val_set: &ImageDataset,
    eval: &CodeEvaluation<'_>,
) -> Result<Vec<SweepRow>> {
    if let Some(l) = lambdas.iter().find(|l| l.is_nan() || **l < 0.0) {
        return Err(Error::Config(format!("lambda {l} must be non-negative")));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = base.clone();
            cfg.loss.lambda = lambda;
            let model = build_dbe_lenet(model_cfg)?;
            let (model, log) = train(model, train_set, val_set, &cfg)?;
            let accuracy = code_accuracy(&model, train_set, eval)?;
            log::info!("lambda {lambda:e}: code accuracy {accuracy:.4}");
            Ok(SweepRow { lambda, accuracy, log })
        })
        .collect()
}

/// `lambda,accuracy` table.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,accuracy\n");
    for r in rows {
        writeln!(s, "{},{:.6}", r.lambda, r.accuracy).expect("string write");
    }
    s
}

/// Parameter values flattened in order, for comparisons.
pub fn flatten_params(model: &Model<f32>) -> Vec<f32> {
    model.params().iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn named(v: f32) -> Vec<NamedTensor<f32>> {
        vec![NamedTensor {
            name: "w".into(),
            tensor: Tensor::scalar(v),
        }]
    }

    #[test]
    fn plain_sgd() {
        let mut p = named(1.0);
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &[vec![0.5]], &mut s, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p[0].tensor.data()[0], 1.0 - 0.1 * 0.5);
        sgd_step(&mut p, &[vec![0.0]], &mut s, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p[0].tensor.data()[0], 0.95);
    }

    #[test]
    fn two_momentum_steps() {
        let (p0, g1, g2, lr, m, wd) = (1.0f64, 0.3, -0.2, 0.1, 0.9, 0.01);
        let v1 = g1 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = m * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        let mut p = named(p0 as f32);
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &[vec![g1 as f32]], &mut s, lr as f32, m as f32, wd as f32).unwrap();
        sgd_step(&mut p, &[vec![g2 as f32]], &mut s, lr as f32, m as f32, wd as f32).unwrap();
        assert!((f64::from(p[0].tensor.data()[0]) - p2).abs() < 1e-6);
        assert!((f64::from(s.velocity()[0][0]) - v2).abs() < 1e-6);
    }

    #[test]
    fn schedule() {
        let s = LrSchedule::standard(0.05, 20);
        assert_eq!(s.milestones, vec![12, 17]);
        assert_eq!(s.rate(11), 0.05);
        assert!((s.rate(12) - 0.005).abs() < 1e-12);
        assert!((s.rate(19) - 0.0005).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip() {
        let mut c = TrainConfig::with_epochs(7);
        c.loss.lambda = 0.01;
        c.task = Task::Multilabel;
        let kv = c.to_key_values();
        kv.check_keys(TRAIN_KEYS).unwrap();
        assert_eq!(TrainConfig::from_key_values(&kv).unwrap(), c);
        let mut bad = kv.clone();
        bad.set("batch_size", 1);
        assert!(matches!(TrainConfig::from_key_values(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 5).is_empty());
    }

    #[test]
    fn best_prefers_earliest_maximum() {
        let rec = |e, v| EpochRecord { epoch: e, loss: 1.0, val_score: v, seconds: 0.0 };
        let log = TrainLog { records: vec![rec(1, 0.5), rec(2, 0.7), rec(3, 0.7)] };
        assert_eq!(log.best().unwrap().epoch, 2);
    }
}
