//! Experiment configuration: flat `key = value` text with dotted keys.
//!
//! ```text
//! # AD against the plain recurrent baseline on the counting task
//! task = oam
//! norm.method = none, ad
//! train.lr = 0.05
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::cell::{NormMethod, Placement};
use crate::network::NetworkConfig;
use crate::tasks::{GridVideoSpec, FOLDS};
use crate::tensor::Precision;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{key}: {message}")]
    Value { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Oa,
    Oam,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Oa => "oa",
            TaskKind::Oam => "oam",
        }
    }

    pub fn spec(self) -> GridVideoSpec {
        match self {
            TaskKind::Oa => GridVideoSpec::oa(),
            TaskKind::Oam => GridVideoSpec::oam(),
        }
    }
}

/// Network topology family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Conv → pool → ConvGRU → pool → ConvGRU → global average, narrow and on small crops.
    Desk,
    /// Memoryless per-frame CNN averaged over sampled frames.
    Frame,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Frame => "frame",
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub task: TaskKind,
    /// Seed of the synthetic dataset, independent of the run seed.
    pub data_seed: u64,
    pub folds: Vec<usize>,
    pub preset: Preset,
    pub width_scale: f64,
    pub init_sigma: f64,
    pub update_bias: f64,
    pub sampled_frames: usize,
    /// One run per listed method, sharing the dataset.
    pub methods: Vec<NormMethod>,
    pub placement: Placement,
    pub train: TrainConfig,
    /// Units tracked by activation histograms; 0 disables them.
    pub diag_neurons: usize,
    /// Recurrent layer observed by histograms; 0 picks the top one.
    pub diag_layer: usize,
    /// Save a checkpoint every this many epochs; 0 saves only the last.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out: PathBuf::from("runs"),
            task: TaskKind::Oam,
            data_seed: 7,
            folds: vec![1],
            preset: Preset::Desk,
            width_scale: 0.25,
            init_sigma: 0.2,
            update_bias: -2.0,
            sampled_frames: 25,
            methods: vec![NormMethod::AD],
            placement: Placement::Hidden,
            train: TrainConfig {
                learning_rate: 0.05,
                epochs: 40,
                seed: 1,
                ..TrainConfig::default()
            },
            diag_neurons: 8,
            diag_layer: 0,
            checkpoint_every: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "out",
    "task",
    "data.seed",
    "task.folds",
    "net.preset",
    "net.width_scale",
    "net.init_sigma",
    "net.update_bias",
    "net.sampled_frames",
    "norm.method",
    "norm.placement",
    "train.lr",
    "train.momentum",
    "train.batch_size",
    "train.weight_decay",
    "train.clip",
    "train.epochs",
    "train.precision",
    "train.crop",
    "diag.neurons",
    "diag.layer",
    "checkpoint.every",
];

fn value_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| value_err(key, format!("cannot parse `{v}`")))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = num(key, v)?;
                t.seed = self.seed;
            }
            "out" => self.out = PathBuf::from(v),
            "task" => {
                self.task = match v {
                    "oa" => TaskKind::Oa,
                    "oam" => TaskKind::Oam,
                    _ => return Err(value_err(key, format!("expected oa or oam, got `{v}`"))),
                }
            }
            "data.seed" => self.data_seed = num(key, v)?,
            "task.folds" => self.folds = list(v).map(|f| num(key, f)).collect::<Result<_, _>>()?,
            "net.preset" => {
                self.preset = match v {
                    "desk" => Preset::Desk,
                    "frame" => Preset::Frame,
                    _ => return Err(value_err(key, format!("expected desk or frame, got `{v}`"))),
                }
            }
            "net.width_scale" => self.width_scale = num(key, v)?,
            "net.init_sigma" => self.init_sigma = num(key, v)?,
            "net.update_bias" => self.update_bias = num(key, v)?,
            "net.sampled_frames" => self.sampled_frames = num(key, v)?,
            "norm.method" => {
                self.methods = list(v)
                    .map(|m| NormMethod::parse(m).ok_or_else(|| value_err(key, format!("unknown method `{m}`"))))
                    .collect::<Result<_, _>>()?
            }
            "norm.placement" => {
                self.placement = Placement::parse(v).ok_or_else(|| value_err(key, format!("unknown placement `{v}`")))?
            }
            "train.lr" => t.learning_rate = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.clip" => t.clip_threshold = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.precision" => {
                t.precision = Precision::parse(v).ok_or_else(|| value_err(key, format!("expected f32 or f64, got `{v}`")))?
            }
            "train.crop" => t.crop = num(key, v)?,
            "diag.neurons" => self.diag_neurons = num(key, v)?,
            "diag.layer" => self.diag_layer = num(key, v)?,
            "checkpoint.every" => self.checkpoint_every = num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| value_err(assignment, "expected key=value"))?;
        self.set(k.trim(), v.trim())?;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.methods.is_empty() {
            return Err(value_err("norm.method", "at least one method is required"));
        }
        if self.folds.is_empty() || self.folds.iter().any(|f| !(1..=FOLDS).contains(f)) {
            return Err(value_err("task.folds", format!("folds must lie in 1..={FOLDS}")));
        }
        if !(self.width_scale > 0.0) || !(self.init_sigma > 0.0) || !self.update_bias.is_finite() {
            return Err(value_err("net", "width scale and init sigma must be positive, bias finite"));
        }
        if self.sampled_frames == 0 {
            return Err(value_err("net.sampled_frames", "must be positive"));
        }
        if self.train.epochs == 0 {
            return Err(value_err("train.epochs", "must be positive"));
        }
        self.train.validate().map_err(|e| value_err("train", e.to_string()))?;
        if self.train.crop > self.task.spec().grid {
            return Err(value_err("train.crop", "larger than the frame grid"));
        }
        Ok(())
    }

    /// Canonical text form; [`ExperimentConfig::parse`] inverts it exactly.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let methods: Vec<&str> = self.methods.iter().map(|m| m.name()).collect();
        let folds: Vec<String> = self.folds.iter().map(|f| f.to_string()).collect();
        let values = [
            self.seed.to_string(),
            self.out.display().to_string(),
            self.task.name().to_string(),
            self.data_seed.to_string(),
            folds.join(", "),
            self.preset.name().to_string(),
            self.width_scale.to_string(),
            self.init_sigma.to_string(),
            self.update_bias.to_string(),
            self.sampled_frames.to_string(),
            methods.join(", "),
            self.placement.name().to_string(),
            t.learning_rate.to_string(),
            t.momentum.to_string(),
            t.batch_size.to_string(),
            t.weight_decay.to_string(),
            t.clip_threshold.to_string(),
            t.epochs.to_string(),
            t.precision.name().to_string(),
            t.crop.to_string(),
            self.diag_neurons.to_string(),
            self.diag_layer.to_string(),
            self.checkpoint_every.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Network for one of the configured methods on `heads`.
    pub fn network(&self, method: NormMethod, heads: Vec<usize>) -> NetworkConfig {
        let mut net = match self.preset {
            Preset::Desk => NetworkConfig::desk(heads),
            Preset::Frame => NetworkConfig::desk_frame_baseline(heads),
        };
        let crop = self.train.crop;
        net.input = (1, crop, crop);
        net.method = method;
        net.placement = self.placement;
        net.update_bias = self.update_bias;
        net.init_sigma = self.init_sigma;
        net.width_scale = self.width_scale;
        net.sampled_frames = self.sampled_frames;
        net
    }

    /// Training settings; the run seed overrides the one stored in `train`.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_lists() {
        let cfg = ExperimentConfig::parse("# grid\nnorm.method = none, ad , bn_ad # three runs\ntrain.lr=0.01\n\n").unwrap();
        assert_eq!(cfg.methods, vec![NormMethod::NONE, NormMethod::AD, NormMethod::BN_AD]);
        assert_eq!(cfg.train.learning_rate, 0.01);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(
            ExperimentConfig::parse("train.bogus = 1"),
            Err(ConfigError::UnknownKey("train.bogus".into()))
        );
        match ExperimentConfig::parse("train.lr = fast") {
            Err(ConfigError::Value { key, .. }) => assert_eq!(key, "train.lr"),
            other => panic!("{other:?}"),
        }
        assert_eq!(ExperimentConfig::parse("just words"), Err(ConfigError::Syntax { line: 1 }));
        assert!(ExperimentConfig::parse("task.folds = 4").is_err());
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
