//! Resolution of `key = value` settings: flag over file over default.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use dbe_core::config::KeyValues;
use dbe_core::network::{ModelConfig, MODEL_KEYS};
use dbe_core::trainer::{TrainConfig, TRAIN_KEYS};

pub const DATA_KEYS: &[&str] = &[
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "val_size",
    "split_seed",
    "train_limit",
];

pub fn all_keys() -> Vec<&'static str> {
    MODEL_KEYS.iter().chain(TRAIN_KEYS).chain(DATA_KEYS).copied().collect()
}

macro_rules! overrides {
    ($($field:ident: $ty:ty),* $(,)?) => {
        /// Per-key command-line overrides.
        #[derive(Debug, Clone, Default, Args)]
        pub struct Overrides {
            $(#[arg(long, help_heading = "Settings")] pub $field: Option<$ty>,)*
        }

        impl Overrides {
            pub fn to_key_values(&self) -> KeyValues {
                let mut kv = KeyValues::new();
                $(if let Some(v) = &self.$field {
                    kv.set(stringify!($field), v.to_string());
                })*
                kv
            }
        }
    };
}

overrides! {
    code_length: usize,
    conv1_channels: usize,
    conv2_channels: usize,
    dense_width: usize,
    input_channels: usize,
    input_height: usize,
    input_width: usize,
    classes: usize,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    lr_decay: f64,
    lr_milestones: String,
    momentum: f64,
    weight_decay: f64,
    train_seed: u64,
    lambda: f64,
    nu: f64,
    rho: f64,
    task: String,
    train_images: String,
    train_labels: String,
    test_images: String,
    test_labels: String,
    val_size: usize,
    split_seed: u64,
    train_limit: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Plain-text `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Where training and evaluation images come from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub val_size: usize,
    pub split_seed: u64,
    /// Use only the first `n` training samples; 0 keeps all.
    pub train_limit: usize,
}

impl DataConfig {
    fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let path = |k: &str, d: &str| PathBuf::from(kv.get(k).unwrap_or(d));
        Ok(Self {
            train_images: path("train_images", "data/mnist/train-images-idx3-ubyte"),
            train_labels: path("train_labels", "data/mnist/train-labels-idx1-ubyte"),
            test_images: path("test_images", "data/mnist/t10k-images-idx3-ubyte"),
            test_labels: path("test_labels", "data/mnist/t10k-labels-idx1-ubyte"),
            val_size: kv.parsed("val_size")?.unwrap_or(5000),
            split_seed: kv.parsed("split_seed")?.unwrap_or(0),
            train_limit: kv.parsed("train_limit")?.unwrap_or(0),
        })
    }

    fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let p = |p: &Path| p.display().to_string();
        kv.set("train_images", p(&self.train_images));
        kv.set("train_labels", p(&self.train_labels));
        kv.set("test_images", p(&self.test_images));
        kv.set("test_labels", p(&self.test_labels));
        kv.set("val_size", self.val_size);
        kv.set("split_seed", self.split_seed);
        kv.set("train_limit", self.train_limit);
        kv
    }
}

/// Fully resolved settings for a training-style command.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Settings {
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let mut kv = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                KeyValues::parse(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => KeyValues::new(),
        };
        kv.check_keys(&all_keys())?;
        kv.merge(&args.overrides.to_key_values());
        Ok(Self {
            model: ModelConfig::from_key_values(&kv)?,
            train: TrainConfig::from_key_values(&kv)?,
            data: DataConfig::from_key_values(&kv)?,
        })
    }

    /// Every setting, defaults included.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.model.to_key_values();
        kv.merge(&self.train.to_key_values());
        kv.merge(&self.data.to_key_values());
        kv
    }
}
