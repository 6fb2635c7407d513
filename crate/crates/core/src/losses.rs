//! Training objectives: softmax cross entropy, the relaxed quantization
//! penalty, positive-weighted sigmoid cross entropy, and their combinations.

use crate::autodiff::{Op, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which supervised objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// One class per sample, softmax cross entropy.
    Multiclass,
    /// Label sets, joint softmax + weighted sigmoid cross entropy.
    Multilabel,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiclass" => Ok(Task::Multiclass),
            "multilabel" => Ok(Task::Multilabel),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (expected multiclass or multilabel)"
            ))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Multiclass => "multiclass",
            Task::Multilabel => "multilabel",
        })
    }
}

/// Loss coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the quantization penalty; 0 disables it.
    pub lambda: f64,
    /// Weight of the sigmoid term in the joint loss.
    pub nu: f64,
    /// Weight of positive labels inside the sigmoid term.
    pub rho: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            nu: 2.0,
            rho: 5.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.nu.is_nan() || self.lambda < 0.0 || self.nu < 0.0 {
            return Err(Error::Config(format!(
                "lambda and nu must be non-negative, got {} and {}",
                self.lambda, self.nu
            )));
        }
        if self.rho.is_nan() || self.rho < 1.0 {
            return Err(Error::Config(format!("rho must be at least 1, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Supervision for one batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    /// Row-major `batch x classes` membership flags.
    Membership(&'a [bool]),
}

fn logit_dims<S: Scalar>(tape: &Tape<S>, logits: Var) -> Result<(usize, usize)> {
    match *tape.value(logits).shape() {
        [b, c] => Ok((b, c)),
        ref s => dim_err(format!("logits must be batch x classes, got {s:?}")),
    }
}

/// Cross entropy of row-wise softmax against per-row target distributions.
fn softmax_against<S: Scalar>(tape: &mut Tape<S>, logits: Var, target: Vec<S>) -> Var {
    let lv = tape.value(logits);
    let (batch, classes) = (lv.rows(), lv.row_len());
    let mut probs = vec![S::zero(); lv.len()];
    let mut total = 0.0f64;
    for (r, row) in lv.data().chunks(classes).enumerate() {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = m + row.iter().map(|&s| (s - m).exp()).sum::<S>().ln();
        for (j, &s) in row.iter().enumerate() {
            let logp = s - lse;
            probs[r * classes + j] = logp.exp();
            let t = target[r * classes + j];
            if t != S::zero() {
                total -= (t * logp).as_f64();
            }
        }
    }
    let loss = S::lit(total / batch as f64);
    let needs = tape.needs(logits);
    tape.push(
        Tensor::scalar(loss),
        Op::SoftmaxCe {
            logits,
            target,
            probs,
        },
        needs,
    )
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    let (batch, classes) = logit_dims(tape, logits)?;
    if labels.len() != batch {
        return dim_err(format!("{} labels for a batch of {batch}", labels.len()));
    }
    let mut target = vec![S::zero(); batch * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Data(format!(
                "label {y} of sample {r} is outside [0, {classes})"
            )));
        }
        target[r * classes + y] = S::one();
    }
    Ok(softmax_against(tape, logits, target))
}

/// Mean over the batch of `sum_l (|2 z_l - 1| - 1)^2`.
///
/// On `[0, 1]` this is exactly four times the squared distance between `z`
/// and its 0.5-thresholded code.
pub fn quantization_penalty<S: Scalar>(tape: &mut Tape<S>, z: Var) -> Var {
    let zv = tape.value(z);
    let batch = zv.rows().max(1);
    let two = S::lit(2.0);
    let total: f64 = zv
        .data()
        .iter()
        .map(|&e| {
            let d = (two * e - S::one()).abs() - S::one();
            (d * d).as_f64()
        })
        .sum();
    let needs = tape.needs(z);
    tape.push(
        Tensor::scalar(S::lit(total / batch as f64)),
        Op::QuantPenalty { z },
        needs,
    )
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean over the batch of
/// `-sum_p [rho * y_p * log sigma(s_p) + (1 - y_p) * log(1 - sigma(s_p))]`.
pub fn weighted_binary_sigmoid_ce<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    membership: &[bool],
    rho: f64,
) -> Result<Var> {
    let (batch, classes) = logit_dims(tape, logits)?;
    if membership.len() != batch * classes {
        return Err(Error::Data(format!(
            "membership of length {} for {batch} samples of {classes} classes",
            membership.len()
        )));
    }
    let total: f64 = tape
        .value(logits)
        .data()
        .iter()
        .zip(membership)
        .map(|(&s, &pos)| {
            let s = s.as_f64();
            if pos {
                rho * softplus(-s)
            } else {
                softplus(s)
            }
        })
        .sum();
    let needs = tape.needs(logits);
    Ok(tape.push(
        Tensor::scalar(S::lit(total / batch as f64)),
        Op::SigmoidBce {
            logits,
            positive: membership.to_vec(),
            rho: S::lit(rho),
        },
        needs,
    ))
}

/// Softmax cross entropy spread evenly over each sample's positive labels,
/// plus `nu` times [`weighted_binary_sigmoid_ce`].
pub fn joint_cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    membership: &[bool],
    nu: f64,
    rho: f64,
) -> Result<Var> {
    let (batch, classes) = logit_dims(tape, logits)?;
    if membership.len() != batch * classes {
        return Err(Error::Data(format!(
            "membership of length {} for {batch} samples of {classes} classes",
            membership.len()
        )));
    }
    let mut target = vec![S::zero(); batch * classes];
    for (r, row) in membership.chunks(classes).enumerate() {
        let positives = row.iter().filter(|&&b| b).count();
        if positives == 0 {
            return Err(Error::Data(format!("sample {r} has no positive labels")));
        }
        let w = S::one() / S::lit(positives as f64);
        for (j, _) in row.iter().enumerate().filter(|(_, &b)| b) {
            target[r * classes + j] = w;
        }
    }
    let soft = softmax_against(tape, logits, target);
    let bce = weighted_binary_sigmoid_ce(tape, logits, membership, rho)?;
    let bce = tape.scale(bce, S::lit(nu));
    tape.add(soft, bce)
}

/// The pieces of one batch objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub task: Var,
    /// Present only when `lambda > 0`.
    pub penalty: Option<Var>,
}

/// Task loss plus `lambda` times the quantization penalty on `z`.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    logits: Var,
    targets: Targets<'_>,
    cfg: &LossConfig,
    task: Task,
) -> Result<LossTerms> {
    cfg.validate()?;
    let task_loss = match (task, targets) {
        (Task::Multiclass, Targets::Classes(y)) => softmax_cross_entropy(tape, logits, y)?,
        (Task::Multilabel, Targets::Membership(m)) => {
            joint_cross_entropy(tape, logits, m, cfg.nu, cfg.rho)?
        }
        (task, _) => {
            return Err(Error::Usage(format!(
                "{task} task given the other kind of labels"
            )))
        }
    };
    if cfg.lambda == 0.0 {
        return Ok(LossTerms {
            total: task_loss,
            task: task_loss,
            penalty: None,
        });
    }
    let pen = quantization_penalty(tape, z);
    let weighted = tape.scale(pen, S::lit(cfg.lambda));
    let total = tape.add(task_loss, weighted)?;
    Ok(LossTerms {
        total,
        task: task_loss,
        penalty: Some(pen),
    })
}
