use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::Var;

/// Variance offset used by every batch-norm call.
pub const BN_EPS: f64 = 1e-5;

/// Where batch normalization takes its statistics from.
#[derive(Debug, Clone, Copy)]
pub enum Normalize<'a, S> {
    /// Statistics of the current batch (training).
    Batch,
    /// Externally supplied running estimates (inference).
    Running { mean: &'a [S], var: &'a [S] },
}

/// Per-feature statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance.
    pub var: Vec<S>,
    /// Elements reduced per feature.
    pub count: usize,
}

pub(crate) struct BnSaved<S> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    /// (outer, features, inner): element (o, f, i) lives at `(o * features + f) * inner + i`.
    pub layout: (usize, usize, usize),
    pub batch_stats: bool,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, f] => Ok((n, f, 1)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => dim_err(format!(
            "batchnorm expects N x F or B x C x H x W input, got {shape:?}"
        )),
    }
}

type Forward<S> = (Tensor<S>, BnSaved<S>, Option<BatchStats<S>>);

pub(crate) fn forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mode: Normalize<'_, S>,
) -> Result<Forward<S>> {
    let (outer, feats, inner) = layout(x.shape())?;
    if gamma.len() != feats || beta.len() != feats {
        return dim_err(format!(
            "batchnorm over {feats} features given gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let count = outer * inner;
    let eps = S::lit(BN_EPS);
    let data = x.data();
    let idx = |o: usize, f: usize, i: usize| (o * feats + f) * inner + i;

    let (mean, var, stats) = match mode {
        Normalize::Batch => {
            if outer < 2 {
                return Err(Error::Config(format!(
                    "batchnorm in training mode needs a batch of at least 2, got {outer}"
                )));
            }
            let n = S::lit(count as f64);
            let mut mean = vec![S::zero(); feats];
            let mut var = vec![S::zero(); feats];
            for f in 0..feats {
                let mut s = S::zero();
                for o in 0..outer {
                    for i in 0..inner {
                        s += data[idx(o, f, i)];
                    }
                }
                let m = s / n;
                let mut v = S::zero();
                for o in 0..outer {
                    for i in 0..inner {
                        let d = data[idx(o, f, i)] - m;
                        v += d * d;
                    }
                }
                mean[f] = m;
                var[f] = v / n;
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count,
            };
            (mean, var, Some(stats))
        }
        Normalize::Running { mean, var } => {
            if mean.len() != feats || var.len() != feats {
                return dim_err(format!(
                    "running statistics of length {}/{} for {feats} features",
                    mean.len(),
                    var.len()
                ));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };

    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); data.len()];
    let mut out = vec![S::zero(); data.len()];
    let (g, b) = (gamma.data(), beta.data());
    for o in 0..outer {
        for f in 0..feats {
            for i in 0..inner {
                let j = idx(o, f, i);
                let h = (data[j] - mean[f]) * inv_std[f];
                xhat[j] = h;
                out[j] = g[f] * h + b[f];
            }
        }
    }
    let saved = BnSaved {
        x: Var(0),
        gamma: Var(0),
        beta: Var(0),
        xhat,
        inv_std,
        layout: (outer, feats, inner),
        batch_stats: stats.is_some(),
    };
    Ok((Tensor::new(x.shape().to_vec(), out)?, saved, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn backward<S: Scalar>(
    saved: &BnSaved<S>,
    gamma: &Tensor<S>,
    g: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (outer, feats, inner) = saved.layout;
    let idx = |o: usize, f: usize, i: usize| (o * feats + f) * inner + i;
    let gm = gamma.data();
    let n = S::lit((outer * inner) as f64);
    let mut dx = vec![S::zero(); g.len()];
    let mut dgamma = vec![S::zero(); feats];
    let mut dbeta = vec![S::zero(); feats];
    for f in 0..feats {
        let mut sum_g = S::zero();
        let mut sum_gx = S::zero();
        for o in 0..outer {
            for i in 0..inner {
                let j = idx(o, f, i);
                sum_g += g[j];
                sum_gx += g[j] * saved.xhat[j];
            }
        }
        dgamma[f] = sum_gx;
        dbeta[f] = sum_g;
        let inv = saved.inv_std[f];
        if saved.batch_stats {
            // dx = gamma * inv_std / n * (n * g - sum(g) - xhat * sum(g * xhat))
            let k = gm[f] * inv / n;
            for o in 0..outer {
                for i in 0..inner {
                    let j = idx(o, f, i);
                    dx[j] = k * (n * g[j] - sum_g - saved.xhat[j] * sum_gx);
                }
            }
        } else {
            let k = gm[f] * inv;
            for o in 0..outer {
                for i in 0..inner {
                    let j = idx(o, f, i);
                    dx[j] = k * g[j];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_fn([32, 16], |_| rng.random_range(-3.0..7.0));
        let mut tape = Tape::<f32>::new();
        let xi = tape.leaf(x);
        let g = tape.leaf(Tensor::full([16], 1.0));
        let b = tape.leaf(Tensor::zeros([16]));
        let (y, stats) = tape.batchnorm(xi, g, b, Normalize::Batch).unwrap();
        assert_eq!(stats.unwrap().count, 32);
        let y = tape.value(y);
        for f in 0..16 {
            let col: Vec<f64> = (0..32).map(|r| y.data()[r * 16 + f] as f64).collect();
            let m = col.iter().sum::<f64>() / 32.0;
            let v = col.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut tape = Tape::<f32>::new();
        let xi = tape.leaf(Tensor::from_fn([2, 3, 2, 2], |i| i as f32));
        let g = tape.leaf(Tensor::zeros([3]));
        let b = tape.leaf(Tensor::new([3], vec![0.25, -1.0, 3.0]).unwrap());
        let (y, _) = tape.batchnorm(xi, g, b, Normalize::Batch).unwrap();
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            assert_eq!(v, [0.25, -1.0, 3.0][(i / 4) % 3]);
        }
    }

    #[test]
    fn single_sample_batch_rejected() {
        let mut tape = Tape::<f32>::new();
        let xi = tape.leaf(Tensor::zeros([1, 4]));
        let g = tape.leaf(Tensor::full([4], 1.0));
        let b = tape.leaf(Tensor::zeros([4]));
        assert!(matches!(
            tape.batchnorm(xi, g, b, Normalize::Batch),
            Err(Error::Config(_))
        ));
        let (m, v) = (vec![0.0; 4], vec![1.0; 4]);
        assert!(tape
            .batchnorm(xi, g, b, Normalize::Running { mean: &m, var: &v })
            .is_ok());
    }

    #[test]
    fn running_mode_uses_given_statistics() {
        let mut tape = Tape::<f64>::new();
        let xi = tape.leaf(Tensor::new([1, 2], vec![3.0, -1.0]).unwrap());
        let g = tape.leaf(Tensor::full([2], 2.0));
        let b = tape.leaf(Tensor::full([2], 0.5));
        let (m, v) = (vec![1.0, 1.0], vec![4.0 - BN_EPS, 1.0 - BN_EPS]);
        let (y, stats) = tape
            .batchnorm(xi, g, b, Normalize::Running { mean: &m, var: &v })
            .unwrap();
        assert!(stats.is_none());
        let y = tape.value(y).data();
        assert!((y[0] - 2.5).abs() < 1e-12);
        assert!((y[1] - -3.5).abs() < 1e-12);
    }
}
