//! Run configuration in a `key = value` text format.
//!
//! Lines starting with `#` and blank lines are ignored. A `preset` key, if
//! present, is applied before the other keys regardless of its position.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::attention::OffsetMode;
use crate::harness::data::GenConfig;
use crate::matching::LossWeights;
use crate::model::{DecoderKind, ModelConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Parameter initialisation and shuffling seed.
    pub seed: u64,
    pub data_seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Load scenes from a generated dataset directory instead of generating
    /// them in memory; the first `train_scenes` are used for training.
    pub data_dir: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    /// Epochs at which both learning rates are multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub flip: bool,
    /// Held-out evaluation period in epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Stop once held-out mAP reaches this value.
    pub target_map: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 1,
            train_scenes: 200,
            val_scenes: 50,
            data_dir: None,
            epochs: 200,
            batch_size: 16,
            lr: 2.5e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            milestones: vec![50, 90, 120],
            lr_decay: 0.5,
            grad_clip: 0.1,
            flip: true,
            eval_every: 10,
            target_map: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::iwin_s(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            height: self.model.image_size.0,
            width: self.model.image_size.1,
            num_object_classes: self.model.num_object_classes,
            num_interaction_classes: self.model.num_interaction_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gen_config().validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.train_scenes == 0 {
            return Err(Error::Config("batch size and training scene count must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr_backbone >= 0.0 && t.weight_decay >= 0.0 && t.grad_clip >= 0.0) {
            return Err(Error::Config("learning rates, decay and clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }
}

fn list<T: FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().ok())
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        fn num<T: FromStr>(v: &str, bad: impl Fn() -> Error) -> Result<T> {
            v.parse().map_err(|_| bad())
        }
        let m = &mut self.model;
        let t = &mut self.train;
        let l = &mut self.loss;
        match key {
            "preset" => {
                *m = match value {
                    "iwin_s" => ModelConfig::iwin_s(),
                    "iwin_b" => ModelConfig::iwin_b(),
                    _ => return Err(bad()),
                }
            }
            "image_size" => {
                let v: Vec<usize> = list(value).ok_or_else(bad)?;
                m.image_size = match v[..] {
                    [s] => (s, s),
                    [h, w] => (h, w),
                    _ => return Err(bad()),
                };
            }
            "blocks" => m.blocks = list::<usize>(value).and_then(|v| v.try_into().ok()).ok_or_else(bad)?,
            "d_c" => m.d_c = num(value, bad)?,
            "num_queries" => m.num_queries = num(value, bad)?,
            "query_dim" => m.query_dim = num(value, bad)?,
            "decoder" => {
                m.decoder = match value.split_once(':') {
                    None if value == "mlp" => DecoderKind::Mlp,
                    Some(("stacked", d)) => DecoderKind::Stacked { depth: num(d, bad)? },
                    _ => return Err(bad()),
                }
            }
            "decoder_ffn" => m.decoder_ffn = num(value, bad)?,
            "scales1" | "scales2" | "scales3" => {
                let i = key.as_bytes()[6] as usize - b'1' as usize;
                m.scale_sets[i] = list(value).ok_or_else(bad)?;
            }
            "num_object_classes" => m.num_object_classes = num(value, bad)?,
            "num_interaction_classes" => m.num_interaction_classes = num(value, bad)?,
            "offsets" => {
                m.offsets = match value {
                    "learned" => OffsetMode::Learned,
                    "regular" => OffsetMode::Regular,
                    _ => return Err(bad()),
                }
            }
            "seed" => t.seed = num(value, bad)?,
            "data_seed" => t.data_seed = num(value, bad)?,
            "train_scenes" => t.train_scenes = num(value, bad)?,
            "val_scenes" => t.val_scenes = num(value, bad)?,
            "data_dir" => t.data_dir = (value != "none").then(|| PathBuf::from(value)),
            "epochs" => t.epochs = num(value, bad)?,
            "batch_size" => t.batch_size = num(value, bad)?,
            "lr" => t.lr = num(value, bad)?,
            "lr_backbone" => t.lr_backbone = num(value, bad)?,
            "weight_decay" => t.weight_decay = num(value, bad)?,
            "milestones" => t.milestones = list(value).ok_or_else(bad)?,
            "lr_decay" => t.lr_decay = num(value, bad)?,
            "grad_clip" => t.grad_clip = num(value, bad)?,
            "flip" => t.flip = num(value, bad)?,
            "eval_every" => t.eval_every = num(value, bad)?,
            "target_map" => t.target_map = if value == "none" { None } else { Some(num(value, bad)?) },
            "beta1" => l.beta1 = num(value, bad)?,
            "alpha" => l.alpha = list::<f64>(value).and_then(|v| v.try_into().ok()).ok_or_else(bad)?,
            "beta2" => l.beta2 = num(value, bad)?,
            "lambda_giou" => l.lambda_giou = num(value, bad)?,
            "lambda_l1" => l.lambda_l1 = num(value, bad)?,
            "background_weight" => l.background_weight = num(value, bad)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        let mut cfg = RunConfig::default();
        pairs.sort_by_key(|(k, _)| *k != "preset");
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (m, t, l) = (&self.model, &self.train, &self.loss);
        writeln!(f, "image_size = {},{}", m.image_size.0, m.image_size.1)?;
        writeln!(f, "blocks = {}", join(&m.blocks))?;
        writeln!(f, "d_c = {}", m.d_c)?;
        writeln!(f, "num_queries = {}", m.num_queries)?;
        writeln!(f, "query_dim = {}", m.query_dim)?;
        match m.decoder {
            DecoderKind::Stacked { depth } => writeln!(f, "decoder = stacked:{depth}")?,
            DecoderKind::Mlp => writeln!(f, "decoder = mlp")?,
        }
        writeln!(f, "decoder_ffn = {}", m.decoder_ffn)?;
        for (i, s) in m.scale_sets.iter().enumerate() {
            writeln!(f, "scales{} = {}", i + 1, join(s))?;
        }
        writeln!(f, "num_object_classes = {}", m.num_object_classes)?;
        writeln!(f, "num_interaction_classes = {}", m.num_interaction_classes)?;
        let offsets = match m.offsets {
            OffsetMode::Learned => "learned",
            OffsetMode::Regular => "regular",
        };
        writeln!(f, "offsets = {offsets}")?;
        writeln!(f, "seed = {}", t.seed)?;
        writeln!(f, "data_seed = {}", t.data_seed)?;
        writeln!(f, "train_scenes = {}", t.train_scenes)?;
        writeln!(f, "val_scenes = {}", t.val_scenes)?;
        match &t.data_dir {
            Some(d) => writeln!(f, "data_dir = {}", d.display())?,
            None => writeln!(f, "data_dir = none")?,
        }
        writeln!(f, "epochs = {}", t.epochs)?;
        writeln!(f, "batch_size = {}", t.batch_size)?;
        writeln!(f, "lr = {:e}", t.lr)?;
        writeln!(f, "lr_backbone = {:e}", t.lr_backbone)?;
        writeln!(f, "weight_decay = {:e}", t.weight_decay)?;
        writeln!(f, "milestones = {}", join(&t.milestones))?;
        writeln!(f, "lr_decay = {}", t.lr_decay)?;
        writeln!(f, "grad_clip = {}", t.grad_clip)?;
        writeln!(f, "flip = {}", t.flip)?;
        writeln!(f, "eval_every = {}", t.eval_every)?;
        match t.target_map {
            Some(v) => writeln!(f, "target_map = {v}")?,
            None => writeln!(f, "target_map = none")?,
        }
        writeln!(f, "beta1 = {}", l.beta1)?;
        writeln!(f, "alpha = {}", join(&l.alpha))?;
        writeln!(f, "beta2 = {}", l.beta2)?;
        writeln!(f, "lambda_giou = {}", l.lambda_giou)?;
        writeln!(f, "lambda_l1 = {}", l.lambda_l1)?;
        write!(f, "background_weight = {}", l.background_weight)
    }
}
