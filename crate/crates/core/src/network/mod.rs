//! The DBE-LeNet model: a two-block convolutional backbone, a dense layer,
//! the binary embedding layer, and a linear classifier over its output.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Normalize, Tape, Var};
use crate::config::KeyValues;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Code lengths the model can be built with.
pub const CODE_LENGTHS: [usize; 6] = [16, 24, 32, 48, 64, 128];

/// Exponential-moving-average weight kept on the old running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Keys understood by [`ModelConfig::from_key_values`].
pub const MODEL_KEYS: &[&str] = &[
    "code_length",
    "conv1_channels",
    "conv2_channels",
    "dense_width",
    "input_channels",
    "input_height",
    "input_width",
    "classes",
    "seed",
];

/// `tanh(max(0, t))`, the scalar form of the embedding nonlinearity.
pub fn dbe_activation_scalar(t: f64) -> f64 {
    t.max(0.0).tanh()
}

/// Train mode uses batch statistics; infer mode uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub code_length: usize,
    pub conv_channels: [usize; 2],
    pub dense_width: usize,
    /// Channels, height, width of one input image.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            code_length: 64,
            conv_channels: [16, 32],
            dense_width: 1000,
            input_shape: [1, 28, 28],
            classes: 10,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !CODE_LENGTHS.contains(&self.code_length) {
            return Err(Error::Config(format!(
                "code length {} is not one of {CODE_LENGTHS:?}",
                self.code_length
            )));
        }
        if self.conv_channels.contains(&0) || self.dense_width == 0 || self.classes == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "input shape {:?} must have positive channels and spatial sizes divisible by 4",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Width of the flattened backbone output feeding the dense layer.
    pub fn flat_features(&self) -> usize {
        let [_, h, w] = self.input_shape;
        self.conv_channels[1] * (h / 4) * (w / 4)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("code_length", self.code_length);
        kv.set("conv1_channels", self.conv_channels[0]);
        kv.set("conv2_channels", self.conv_channels[1]);
        kv.set("dense_width", self.dense_width);
        kv.set("input_channels", self.input_shape[0]);
        kv.set("input_height", self.input_shape[1]);
        kv.set("input_width", self.input_shape[2]);
        kv.set("classes", self.classes);
        kv.set("seed", self.seed);
        kv
    }

    /// Reads the keys written by [`ModelConfig::to_key_values`], defaulting absent ones.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let get = |k: &str, dv: usize| -> Result<usize> { Ok(kv.parsed(k)?.unwrap_or(dv)) };
        let cfg = Self {
            code_length: get("code_length", d.code_length)?,
            conv_channels: [
                get("conv1_channels", d.conv_channels[0])?,
                get("conv2_channels", d.conv_channels[1])?,
            ],
            dense_width: get("dense_width", d.dense_width)?,
            input_shape: [
                get("input_channels", d.input_shape[0])?,
                get("input_height", d.input_shape[1])?,
                get("input_width", d.input_shape[2])?,
            ],
            classes: get("classes", d.classes)?,
            seed: kv.parsed("seed")?.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A tensor with a stable name, used for checkpoints and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

/// Indices of one batch-norm layer's tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormIds {
    pub gamma: usize,
    pub beta: usize,
    /// Index into the model's buffers.
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv { weight: usize, bias: usize },
    BatchNorm(BatchNormIds),
    Relu,
    MaxPool2x2,
    Flatten,
    Dense { weight: usize, bias: usize },
}

/// `Z = tanh(relu(BN(X W + b)))` over `code_length` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DbeLayer {
    pub weight: usize,
    pub bias: usize,
    pub bn: BatchNormIds,
    pub in_features: usize,
    pub code_length: usize,
}

/// Classifier over the embedding: `logits = Z W^T + b`, `W` is `classes x L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classifier {
    pub weight: usize,
    pub bias: usize,
}

/// A feed-forward stack ending in exactly one [`DbeLayer`] and its classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar = f32> {
    config: ModelConfig,
    params: Vec<NamedTensor<S>>,
    buffers: Vec<NamedTensor<S>>,
    backbone: Vec<Layer>,
    dbe: DbeLayer,
    classifier: Classifier,
}

/// Parameter leaves of one model on one tape, in parameter order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients accumulated on the tape, one buffer per parameter.
    pub fn grads<S: Scalar>(&self, tape: &Tape<S>) -> Vec<Vec<S>> {
        self.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// Variables produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Embedding<S> {
    /// Embedding activation, `batch x L`, values in `[0, 1)`.
    pub z: Var,
    /// Classifier scores, `batch x classes`.
    pub logits: Var,
    /// Normalized projection before relu and tanh, `batch x L`.
    pub t: Var,
    /// Batch statistics per batch-norm layer (train mode only), in layer order.
    pub batch_stats: Vec<(BatchNormIds, BatchStats<S>)>,
}

/// Materialized infer-mode outputs.
#[derive(Debug, Clone)]
pub struct EmbedOutput<S> {
    pub z: Tensor<S>,
    pub logits: Tensor<S>,
    pub t: Tensor<S>,
}

struct Builder<S> {
    rng: ChaCha8Rng,
    params: Vec<NamedTensor<S>>,
    buffers: Vec<NamedTensor<S>>,
}

impl<S: Scalar> Builder<S> {
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> usize {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| S::lit(rng.random_range(-bound..bound)));
        self.add(name, t)
    }

    fn add(&mut self, name: &str, tensor: Tensor<S>) -> usize {
        self.params.push(NamedTensor {
            name: name.to_string(),
            tensor,
        });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: &str, tensor: Tensor<S>) -> usize {
        self.buffers.push(NamedTensor {
            name: name.to_string(),
            tensor,
        });
        self.buffers.len() - 1
    }

    fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> usize {
        self.uniform(name, shape, (6.0 / fan_in as f64).sqrt())
    }

    fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> usize {
        self.uniform(name, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    fn zeros(&mut self, name: &str, n: usize) -> usize {
        self.add(name, Tensor::zeros([n]))
    }

    fn batchnorm(&mut self, prefix: &str, n: usize) -> BatchNormIds {
        BatchNormIds {
            gamma: self.add(&format!("{prefix}.gamma"), Tensor::full([n], S::one())),
            beta: self.zeros(&format!("{prefix}.beta"), n),
            running_mean: self.buffer(&format!("{prefix}.running_mean"), Tensor::zeros([n])),
            running_var: self.buffer(&format!("{prefix}.running_var"), Tensor::full([n], S::one())),
        }
    }
}

/// Builds the two-block LeNet backbone with the embedding layer and classifier.
///
/// Layout: conv3x3 -> BN -> relu -> pool, twice; flatten; dense -> relu;
/// embedding layer; classifier.
pub fn build_dbe_lenet<S: Scalar>(cfg: &ModelConfig) -> Result<Model<S>> {
    cfg.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        params: Vec::new(),
        buffers: Vec::new(),
    };
    let [in_ch, _, _] = cfg.input_shape;
    let [c1, c2] = cfg.conv_channels;
    let mut backbone = Vec::new();
    for (i, (cin, cout)) in [(in_ch, c1), (c1, c2)].into_iter().enumerate() {
        let n = i + 1;
        let weight = b.he(&format!("conv{n}.weight"), &[cout, cin, 3, 3], cin * 9);
        let bias = b.zeros(&format!("conv{n}.bias"), cout);
        backbone.push(Layer::Conv { weight, bias });
        backbone.push(Layer::BatchNorm(b.batchnorm(&format!("bn{n}"), cout)));
        backbone.push(Layer::Relu);
        backbone.push(Layer::MaxPool2x2);
    }
    backbone.push(Layer::Flatten);
    let flat = cfg.flat_features();
    let weight = b.he("fc.weight", &[flat, cfg.dense_width], flat);
    let bias = b.zeros("fc.bias", cfg.dense_width);
    backbone.push(Layer::Dense { weight, bias });
    backbone.push(Layer::Relu);

    let (d, l) = (cfg.dense_width, cfg.code_length);
    let dbe = DbeLayer {
        weight: b.glorot("dbe.weight", &[d, l], d, l),
        bias: b.zeros("dbe.bias", l),
        bn: b.batchnorm("dbe.bn", l),
        in_features: d,
        code_length: l,
    };
    let classifier = Classifier {
        weight: b.glorot("classifier.weight", &[cfg.classes, l], l, cfg.classes),
        bias: b.zeros("classifier.bias", cfg.classes),
    };
    Ok(Model {
        config: cfg.clone(),
        params: b.params,
        buffers: b.buffers,
        backbone,
        dbe,
        classifier,
    })
}

impl<S: Scalar> Model<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<S>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<S>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor<S>] {
        &mut self.buffers
    }

    pub fn backbone(&self) -> &[Layer] {
        &self.backbone
    }

    pub fn dbe(&self) -> &DbeLayer {
        &self.dbe
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Same model in another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let conv = |v: &[NamedTensor<S>]| {
            v.iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect()
        };
        Model {
            config: self.config.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            backbone: self.backbone.clone(),
            dbe: self.dbe,
            classifier: self.classifier,
        }
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.tensor.clone())).collect(),
        }
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape<S>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| {
                    let mut t = p.tensor.clone();
                    t.set_requires_grad(false);
                    tape.leaf(t)
                })
                .collect(),
        }
    }

    fn check_images(&self, images: &Tensor<S>) -> Result<()> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            return dim_err(format!(
                "images of shape {shape:?} do not match model input {:?}",
                self.config.input_shape
            ));
        }
        Ok(())
    }

    fn normalize(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        x: Var,
        ids: BatchNormIds,
        mode: Mode,
        stats: &mut Vec<(BatchNormIds, BatchStats<S>)>,
    ) -> Result<Var> {
        let norm = match mode {
            Mode::Train => Normalize::Batch,
            Mode::Infer => Normalize::Running {
                mean: self.buffers[ids.running_mean].tensor.data(),
                var: self.buffers[ids.running_var].tensor.data(),
            },
        };
        let (y, s) = tape.batchnorm(x, bound.vars[ids.gamma], bound.vars[ids.beta], norm)?;
        if let Some(s) = s {
            stats.push((ids, s));
        }
        Ok(y)
    }

    /// Runs the network on `images` (`batch x C x H x W`).
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        images: Var,
        mode: Mode,
    ) -> Result<Embedding<S>> {
        self.check_images(tape.value(images))?;
        let mut stats = Vec::new();
        let mut x = images;
        for layer in &self.backbone {
            x = match *layer {
                Layer::Conv { weight, bias } => {
                    tape.conv2d(x, bound.vars[weight], bound.vars[bias], 1, 1)?
                }
                Layer::BatchNorm(ids) => self.normalize(tape, bound, x, ids, mode, &mut stats)?,
                Layer::Relu => tape.relu(x),
                Layer::MaxPool2x2 => tape.maxpool2x2(x)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::Dense { weight, bias } => {
                    let y = tape.matmul(x, bound.vars[weight])?;
                    tape.add_row(y, bound.vars[bias])?
                }
            };
        }
        let proj = tape.matmul(x, bound.vars[self.dbe.weight])?;
        let proj = tape.add_row(proj, bound.vars[self.dbe.bias])?;
        let t = self.normalize(tape, bound, proj, self.dbe.bn, mode, &mut stats)?;
        let r = tape.relu(t);
        let z = tape.tanh(r);
        let logits = tape.matmul_bt(z, bound.vars[self.classifier.weight])?;
        let logits = tape.add_row(logits, bound.vars[self.classifier.bias])?;
        Ok(Embedding {
            z,
            logits,
            t,
            batch_stats: stats,
        })
    }

    /// Folds training-batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(BatchNormIds, BatchStats<S>)]) {
        let m = S::lit(BN_MOMENTUM);
        let keep = S::one() - m;
        for (ids, s) in stats {
            let unbias = if s.count > 1 {
                S::lit(s.count as f64 / (s.count - 1) as f64)
            } else {
                S::one()
            };
            let rm = self.buffers[ids.running_mean].tensor.data_mut();
            rm.iter_mut()
                .zip(&s.mean)
                .for_each(|(r, &b)| *r = m * *r + keep * b);
            let rv = self.buffers[ids.running_var].tensor.data_mut();
            rv.iter_mut()
                .zip(&s.var)
                .for_each(|(r, &b)| *r = m * *r + keep * b * unbias);
        }
    }

    /// Infer-mode embedding of a whole image tensor, processed in chunks.
    pub fn embed(&self, images: &Tensor<S>, chunk: usize) -> Result<EmbedOutput<S>> {
        self.check_images(images)?;
        let n = images.rows();
        let (l, c) = (self.config.code_length, self.config.classes);
        let (mut z, mut logits, mut t) = (
            Vec::with_capacity(n * l),
            Vec::with_capacity(n * c),
            Vec::with_capacity(n * l),
        );
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let bound = self.bind_frozen(&mut tape);
            let x = tape.leaf(images.select_rows(&idx));
            let e = self.forward(&mut tape, &bound, x, Mode::Infer)?;
            z.extend_from_slice(tape.value(e.z).data());
            logits.extend_from_slice(tape.value(e.logits).data());
            t.extend_from_slice(tape.value(e.t).data());
            start = end;
        }
        Ok(EmbedOutput {
            z: Tensor::new([n, l], z)?,
            logits: Tensor::new([n, c], logits)?,
            t: Tensor::new([n, l], t)?,
        })
    }
}
