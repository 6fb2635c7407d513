use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binarizer::BinaryCodeSet;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Hinge-loss training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    /// L2 strength.
    pub reg: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            reg: 1e-4,
            epochs: 50,
            seed: 0,
        }
    }
}

/// One-vs-rest linear model with a constant-1 bias feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    classes: usize,
    dim: usize,
    /// `classes x (dim + 1)`, bias last.
    weights: Vec<f64>,
}

impl LinearClassifier {
    /// Fits each class against the rest with Pegasos steps `1 / (reg t)`
    /// over a seeded sample order shared by all classes.
    pub fn fit(features: &Tensor<f32>, labels: &[usize], classes: usize, cfg: &SvmConfig) -> Result<Self> {
        let (n, dim) = matrix_dims(features)?;
        if n != labels.len() {
            return Err(Error::Data(format!("{n} feature rows but {} labels", labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} outside [0, {classes})")));
        }
        if labels.iter().all(|&y| Some(&y) == labels.first()) {
            return Err(Error::Data("training set holds a single class".into()));
        }
        if cfg.reg <= 0.0 || cfg.epochs == 0 {
            return Err(Error::Config("classifier needs reg > 0 and epochs >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let schedule: Vec<usize> = (0..cfg.epochs)
            .flat_map(|_| {
                order.shuffle(&mut rng);
                order.clone()
            })
            .collect();
        let x = features.data();
        let rows: Vec<Vec<f64>> = par::map_range(classes, |c| {
            // w = scale * v keeps the shrink step O(1).
            let mut v = vec![0.0f64; dim + 1];
            let mut scale = 1.0f64;
            for (step, &i) in schedule.iter().enumerate() {
                let t = (step + 1) as f64;
                let xi = &x[i * dim..(i + 1) * dim];
                let y = if labels[i] == c { 1.0 } else { -1.0 };
                let margin = y * scale * (dot(&v[..dim], xi) + v[dim]);
                if step > 0 {
                    scale *= 1.0 - 1.0 / t;
                }
                if margin < 1.0 {
                    let g = y / (cfg.reg * t * scale);
                    v[..dim].iter_mut().zip(xi).for_each(|(w, &f)| *w += g * f64::from(f));
                    v[dim] += g;
                }
            }
            v.iter().map(|w| w * scale).collect()
        });
        Ok(Self {
            classes,
            dim,
            weights: rows.concat(),
        })
    }

    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim + 1)
            .map(|w| dot(&w[..self.dim], x) + w[self.dim])
            .collect()
    }

    /// Highest-scoring class per row; ties go to the lower index.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<usize>> {
        let (n, dim) = matrix_dims(features)?;
        if dim != self.dim {
            return Err(Error::Dimension(format!("features have {dim} columns, model {}", self.dim)));
        }
        Ok(par::map_range(n, |i| {
            let s = self.scores(features.row(i));
            (0..self.classes).fold(0, |best, c| if s[c] > s[best] { c } else { best })
        }))
    }

    pub fn accuracy(&self, features: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        if pred.len() != labels.len() || pred.is_empty() {
            return Err(Error::Data(format!("{} rows but {} labels", pred.len(), labels.len())));
        }
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn dot(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(a, &b)| a * f64::from(b)).sum()
}

fn matrix_dims(t: &Tensor<f32>) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(Error::Dimension(format!("features must be N x D, got {s:?}"))),
    }
}

/// Test accuracy of a linear classifier trained on continuous features.
pub fn classify_features(
    train: &Tensor<f32>,
    train_labels: &[usize],
    test: &Tensor<f32>,
    test_labels: &[usize],
    classes: usize,
    cfg: &SvmConfig,
) -> Result<f64> {
    LinearClassifier::fit(train, train_labels, classes, cfg)?.accuracy(test, test_labels)
}

/// Test accuracy of a linear classifier trained on `{0, 1}` unpacked codes.
pub fn classify_on_codes(
    train: &BinaryCodeSet,
    train_labels: &[usize],
    test: &BinaryCodeSet,
    test_labels: &[usize],
    classes: usize,
    cfg: &SvmConfig,
) -> Result<f64> {
    if train.code_length() != test.code_length() {
        return Err(Error::Usage(format!(
            "train codes have {} bits, test codes {}",
            train.code_length(),
            test.code_length()
        )));
    }
    classify_features(&train.to_tensor(), train_labels, &test.to_tensor(), test_labels, classes, cfg)
}
