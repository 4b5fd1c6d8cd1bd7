//! Run configuration: every hyperparameter, as flat `key = value` text with
//! dotted keys.
//!
//! ```text
//! # comment
//! model.mode = sacn
//! train.lr = 0.001
//! ```
//!
//! Unknown keys are rejected. [`RunConfig::to_text`] writes every key in a
//! fixed order, so the text form is a complete, diffable record of a run.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attention::SoftmaxAxis;
use crate::capsules::PrimaryCapsConfig;
use crate::error::{Error, Result};
use crate::losses::{MarginConfig, ReconSelection, DEFAULT_XI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Sacn,
    Baseline,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sacn => "sacn",
            Mode::Baseline => "baseline",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sacn" => Ok(Mode::Sacn),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(Error::Config(format!("model.mode must be `sacn` or `baseline`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("train.precision must be `f32` or `f64`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("train.optimizer must be `adam` or `sgd`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataKind {
    #[default]
    SyntheticSimple,
    SyntheticComplex,
    /// IDX image/label files; see [`DataConfig`].
    Idx,
    /// Directory written by `data synth-gen` or `data extract-patches`.
    Dir,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::SyntheticSimple => "synthetic-simple",
            DataKind::SyntheticComplex => "synthetic-complex",
            DataKind::Idx => "idx",
            DataKind::Dir => "dir",
        })
    }
}

impl FromStr for DataKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-simple" => Ok(DataKind::SyntheticSimple),
            "synthetic-complex" => Ok(DataKind::SyntheticComplex),
            "idx" => Ok(DataKind::Idx),
            "dir" => Ok(DataKind::Dir),
            _ => Err(Error::Config(format!(
                "data.kind must be synthetic-simple, synthetic-complex, idx or dir, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub feature_channels: usize,
    pub feature_kernel: usize,
    pub primary: PrimaryCapsConfig,
    pub class_dim: usize,
    pub routing_iters: usize,
    pub decoder_hidden: [usize; 2],
    pub init_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub softmax_axis: SoftmaxAxis,
    pub spectral_norm: bool,
    pub power_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub margin: MarginConfig,
    pub xi: f64,
    pub recon_selection: ReconSelection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub precision: Precision,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Stop after this many steps in total; 0 means no cap.
    pub max_steps: usize,
    /// Stop when validation loss has not improved for this many epochs; 0 disables.
    pub early_stop_patience: usize,
    pub metrics_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Number of generated images for the synthetic kinds.
    pub n: usize,
    pub dir: PathBuf,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Leading samples of the IDX training files used for training; 0 = all
    /// but the validation samples.
    pub train_limit: usize,
    /// Samples following the training subset used for validation.
    pub val_limit: usize,
    /// Leading samples of the IDX test files; 0 = all.
    pub test_limit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub attention: AttentionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig {
                mode: Mode::Sacn,
                in_channels: 1,
                height: 16,
                width: 16,
                num_classes: 2,
                feature_channels: 64,
                feature_kernel: 5,
                primary: PrimaryCapsConfig {
                    n_types: 8,
                    capsule_dim: 8,
                    kernel: 6,
                    stride: 2,
                },
                class_dim: 16,
                routing_iters: 1,
                decoder_hidden: [512, 1024],
                init_variance: 0.15,
            },
            attention: AttentionConfig {
                softmax_axis: SoftmaxAxis::I,
                spectral_norm: true,
                power_iters: 1,
            },
            loss: LossConfig {
                margin: MarginConfig::default(),
                xi: DEFAULT_XI,
                recon_selection: ReconSelection::Longest,
            },
            train: TrainConfig {
                precision: Precision::F32,
                optimizer: OptimizerKind::Adam,
                batch_size: 64,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                epochs: 30,
                max_steps: 0,
                early_stop_patience: 0,
                metrics_every: 10,
            },
            data: DataConfig {
                kind: DataKind::SyntheticSimple,
                n: 400,
                dir: PathBuf::new(),
                train_images: PathBuf::new(),
                train_labels: PathBuf::new(),
                test_images: PathBuf::new(),
                test_labels: PathBuf::new(),
                train_limit: 0,
                val_limit: 0,
                test_limit: 0,
            },
        }
    }
}

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: &[&str] = &[
    "medical",
    "medical-512",
    "mnist",
    "mnist-small",
    "cifar10",
    "svhn",
    "synthetic-simple",
    "synthetic-complex",
    "mini",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
}

fn parse_enum<V: FromStr<Err = Error>>(value: &str) -> Result<V> {
    value.parse()
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        match name {
            "medical" => {}
            "medical-512" => c.model.feature_channels = 512,
            "mnist" | "mnist-small" | "cifar10" | "svhn" => {
                c.model.num_classes = 10;
                c.train.lr = 2e-4;
                c.train.epochs = 60;
                c.model.init_variance = 0.01;
                c.data.kind = DataKind::Idx;
                match name {
                    "mnist" | "mnist-small" => {
                        c.model.height = 28;
                        c.model.width = 28;
                    }
                    _ => {
                        c.model.in_channels = 3;
                        c.model.height = 32;
                        c.model.width = 32;
                    }
                }
                if name == "svhn" {
                    c.train.batch_size = 32;
                }
                if name == "mnist-small" {
                    c.model.feature_channels = 32;
                    c.model.decoder_hidden = [256, 512];
                    c.train.lr = 1e-3;
                    c.train.epochs = 10;
                    c.train.batch_size = 32;
                    c.data.train_limit = 5000;
                    c.data.test_limit = 1000;
                }
            }
            "synthetic-simple" | "synthetic-complex" => {
                c.data.kind = if name == "synthetic-simple" {
                    DataKind::SyntheticSimple
                } else {
                    DataKind::SyntheticComplex
                };
                c.data.n = 400;
                c.model.feature_channels = 16;
                c.model.primary = PrimaryCapsConfig {
                    n_types: 4,
                    capsule_dim: 8,
                    kernel: 6,
                    stride: 2,
                };
                c.model.class_dim = 8;
                c.model.decoder_hidden = [64, 128];
                c.model.init_variance = 0.01;
                c.train.batch_size = 16;
                c.train.epochs = 10;
            }
            "mini" => {
                c.model.height = 8;
                c.model.width = 8;
                c.model.feature_channels = 8;
                c.model.primary = PrimaryCapsConfig {
                    n_types: 2,
                    capsule_dim: 4,
                    kernel: 2,
                    stride: 2,
                };
                c.model.class_dim = 4;
                c.model.decoder_hidden = [16, 16];
                c.train.precision = Precision::F64;
                c.train.batch_size = 4;
                c.data.n = 40;
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset `{name}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Every key and its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let a = &self.attention;
        let l = &self.loss;
        let t = &self.train;
        let d = &self.data;
        vec![
            ("seed", self.seed.to_string()),
            ("model.mode", m.mode.to_string()),
            ("model.in_channels", m.in_channels.to_string()),
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.feature_channels", m.feature_channels.to_string()),
            ("model.feature_kernel", m.feature_kernel.to_string()),
            ("model.primary_types", m.primary.n_types.to_string()),
            ("model.primary_dim", m.primary.capsule_dim.to_string()),
            ("model.primary_kernel", m.primary.kernel.to_string()),
            ("model.primary_stride", m.primary.stride.to_string()),
            ("model.class_dim", m.class_dim.to_string()),
            ("model.routing_iters", m.routing_iters.to_string()),
            ("model.decoder_hidden1", m.decoder_hidden[0].to_string()),
            ("model.decoder_hidden2", m.decoder_hidden[1].to_string()),
            ("model.init_variance", m.init_variance.to_string()),
            ("attention.softmax_axis", a.softmax_axis.to_string()),
            ("attention.spectral_norm", a.spectral_norm.to_string()),
            ("attention.power_iters", a.power_iters.to_string()),
            ("loss.m_plus", l.margin.m_plus.to_string()),
            ("loss.m_minus", l.margin.m_minus.to_string()),
            ("loss.lambda", l.margin.lambda.to_string()),
            ("loss.xi", l.xi.to_string()),
            ("loss.recon_selection", l.recon_selection.to_string()),
            ("train.precision", t.precision.to_string()),
            ("train.optimizer", t.optimizer.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.max_steps", t.max_steps.to_string()),
            ("train.early_stop_patience", t.early_stop_patience.to_string()),
            ("train.metrics_every", t.metrics_every.to_string()),
            ("data.kind", d.kind.to_string()),
            ("data.n", d.n.to_string()),
            ("data.dir", d.dir.display().to_string()),
            ("data.train_images", d.train_images.display().to_string()),
            ("data.train_labels", d.train_labels.display().to_string()),
            ("data.test_images", d.test_images.display().to_string()),
            ("data.test_labels", d.test_labels.display().to_string()),
            ("data.train_limit", d.train_limit.to_string()),
            ("data.val_limit", d.val_limit.to_string()),
            ("data.test_limit", d.test_limit.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.mode" => m.mode = parse_enum(v)?,
            "model.in_channels" => m.in_channels = parse(key, v)?,
            "model.height" => m.height = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "model.feature_channels" => m.feature_channels = parse(key, v)?,
            "model.feature_kernel" => m.feature_kernel = parse(key, v)?,
            "model.primary_types" => m.primary.n_types = parse(key, v)?,
            "model.primary_dim" => m.primary.capsule_dim = parse(key, v)?,
            "model.primary_kernel" => m.primary.kernel = parse(key, v)?,
            "model.primary_stride" => m.primary.stride = parse(key, v)?,
            "model.class_dim" => m.class_dim = parse(key, v)?,
            "model.routing_iters" => m.routing_iters = parse(key, v)?,
            "model.decoder_hidden1" => m.decoder_hidden[0] = parse(key, v)?,
            "model.decoder_hidden2" => m.decoder_hidden[1] = parse(key, v)?,
            "model.init_variance" => m.init_variance = parse(key, v)?,
            "attention.softmax_axis" => self.attention.softmax_axis = parse_enum(v)?,
            "attention.spectral_norm" => self.attention.spectral_norm = parse(key, v)?,
            "attention.power_iters" => self.attention.power_iters = parse(key, v)?,
            "loss.m_plus" => self.loss.margin.m_plus = parse(key, v)?,
            "loss.m_minus" => self.loss.margin.m_minus = parse(key, v)?,
            "loss.lambda" => self.loss.margin.lambda = parse(key, v)?,
            "loss.xi" => self.loss.xi = parse(key, v)?,
            "loss.recon_selection" => self.loss.recon_selection = parse_enum(v)?,
            "train.precision" => self.train.precision = parse_enum(v)?,
            "train.optimizer" => self.train.optimizer = parse_enum(v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.max_steps" => self.train.max_steps = parse(key, v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse(key, v)?,
            "train.metrics_every" => self.train.metrics_every = parse(key, v)?,
            "data.kind" => self.data.kind = parse_enum(v)?,
            "data.n" => self.data.n = parse(key, v)?,
            "data.dir" => self.data.dir = PathBuf::from(v),
            "data.train_images" => self.data.train_images = PathBuf::from(v),
            "data.train_labels" => self.data.train_labels = PathBuf::from(v),
            "data.test_images" => self.data.test_images = PathBuf::from(v),
            "data.test_labels" => self.data.test_labels = PathBuf::from(v),
            "data.train_limit" => self.data.train_limit = parse(key, v)?,
            "data.val_limit" => self.data.val_limit = parse(key, v)?,
            "data.test_limit" => self.data.test_limit = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!("override `{assignment}` is not of the form key=value"))
        })?;
        self.set(k.trim(), v)
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn input_size(&self) -> usize {
        self.model.in_channels * self.model.height * self.model.width
    }

    /// Static checks that do not need the model built.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.in_channels", m.in_channels),
            ("model.height", m.height),
            ("model.width", m.width),
            ("model.feature_channels", m.feature_channels),
            ("model.feature_kernel", m.feature_kernel),
            ("model.primary_types", m.primary.n_types),
            ("model.primary_dim", m.primary.capsule_dim),
            ("model.primary_kernel", m.primary.kernel),
            ("model.primary_stride", m.primary.stride),
            ("model.class_dim", m.class_dim),
            ("model.routing_iters", m.routing_iters),
            ("model.decoder_hidden1", m.decoder_hidden[0]),
            ("model.decoder_hidden2", m.decoder_hidden[1]),
            ("attention.power_iters", self.attention.power_iters),
            ("train.batch_size", self.train.batch_size),
            ("train.metrics_every", self.train.metrics_every),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if m.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be at least 2".into()));
        }
        if !(m.init_variance > 0.0) {
            return Err(Error::Config("model.init_variance must be positive".into()));
        }
        self.loss.margin.validate()?;
        if !(self.loss.xi >= 0.0) {
            return Err(Error::Config("loss.xi must be non-negative".into()));
        }
        let t = &self.train;
        if !(t.lr >= 0.0) {
            return Err(Error::Config("train.lr must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps positive".into()));
        }
        Ok(())
    }
}
