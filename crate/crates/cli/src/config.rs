//! Run configuration: a plain-text `key=value` file mirrored one-to-one by
//! command-line flags. Unknown keys are errors, and every command writes the
//! effective configuration next to its outputs.

use std::fmt::Write as _;
use std::path::Path;

use fewseg_core::episodes::MiouMode;
use fewseg_core::matching::{MatchingVariant, NormVariant};
use fewseg_core::model::{Optimizer, TrainConfig};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub stages: usize,
    pub channels: Vec<usize>,
    pub corr_temperature: f64,
    pub distill_temperature: f64,
    pub t2_scaling: bool,
    pub lambda_distill: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    pub batch_size: usize,
    pub kshot: usize,
    pub optimizer: Optimizer,
    pub matching: MatchingVariant,
    pub normalization: NormVariant,
    pub use_distill: bool,
    pub use_prior: bool,
    pub decoder_norm: bool,
    pub support_mask_ablation: bool,
    pub miou: MiouMode,
    pub classes: usize,
    pub folds: usize,
    pub fold: usize,
    pub max_distractors: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            image_size: t.image_hw.0,
            stages: t.stages,
            channels: t.channels.clone(),
            corr_temperature: t.corr_temperature,
            distill_temperature: t.distill_temperature,
            t2_scaling: t.t2_scaling,
            lambda_distill: t.lambda_distill,
            lr: t.lr,
            grad_clip: t.grad_clip,
            epochs: t.epochs,
            episodes_per_epoch: t.episodes_per_epoch,
            eval_episodes: t.eval_episodes,
            batch_size: t.batch_size,
            kshot: t.kshot,
            optimizer: t.optimizer,
            matching: t.matching,
            normalization: t.normalization,
            use_distill: t.use_distill,
            use_prior: t.use_prior,
            decoder_norm: t.decoder_norm,
            support_mask_ablation: t.support_mask_ablation,
            miou: t.miou_mode,
            classes: t.num_classes,
            folds: t.num_folds,
            fold: t.fold,
            max_distractors: t.max_distractors,
            min_radius: t.min_radius,
            max_radius: t.max_radius,
            noise: t.noise,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "image_size",
    "stages",
    "channels",
    "corr_temperature",
    "distill_temperature",
    "t2_scaling",
    "lambda_distill",
    "lr",
    "grad_clip",
    "epochs",
    "episodes_per_epoch",
    "eval_episodes",
    "batch_size",
    "kshot",
    "optimizer",
    "matching",
    "normalization",
    "use_distill",
    "use_prior",
    "decoder_norm",
    "support_mask_ablation",
    "miou",
    "classes",
    "folds",
    "fold",
    "max_distractors",
    "min_radius",
    "max_radius",
    "noise",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(ConfigError(format!("key {key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "stages" => self.stages = parse(key, value)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|v| parse::<usize>(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "corr_temperature" => self.corr_temperature = parse(key, value)?,
            "distill_temperature" => self.distill_temperature = parse(key, value)?,
            "t2_scaling" => self.t2_scaling = parse_bool(key, value)?,
            "lambda_distill" => self.lambda_distill = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "kshot" => self.kshot = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    _ => return Err(ConfigError(format!("key optimizer: unknown {value:?}"))),
                }
            }
            "matching" => {
                self.matching = match value {
                    "correlation" => MatchingVariant::Correlation,
                    "cross_attention" => MatchingVariant::CrossAttention,
                    _ => return Err(ConfigError(format!("key matching: unknown {value:?}"))),
                }
            }
            "normalization" => {
                self.normalization = match value {
                    "inverse_softmax" => NormVariant::InverseSoftmax,
                    "softmax" => NormVariant::Softmax,
                    "none" => NormVariant::None,
                    _ => {
                        return Err(ConfigError(format!("key normalization: unknown {value:?}")))
                    }
                }
            }
            "use_distill" => self.use_distill = parse_bool(key, value)?,
            "use_prior" => self.use_prior = parse_bool(key, value)?,
            "decoder_norm" => self.decoder_norm = parse_bool(key, value)?,
            "support_mask_ablation" => self.support_mask_ablation = parse_bool(key, value)?,
            "miou" => {
                self.miou = match value {
                    "pooled" => MiouMode::Pooled,
                    "per_episode" => MiouMode::PerEpisode,
                    _ => return Err(ConfigError(format!("key miou: unknown {value:?}"))),
                }
            }
            "classes" => self.classes = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "fold" => self.fold = parse(key, value)?,
            "max_distractors" => self.max_distractors = parse(key, value)?,
            "min_radius" => self.min_radius = parse(key, value)?,
            "max_radius" => self.max_radius = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            _ => return Err(ConfigError(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "stages" => self.stages.to_string(),
            "channels" => self
                .channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "corr_temperature" => self.corr_temperature.to_string(),
            "distill_temperature" => self.distill_temperature.to_string(),
            "t2_scaling" => self.t2_scaling.to_string(),
            "lambda_distill" => self.lambda_distill.to_string(),
            "lr" => self.lr.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "epochs" => self.epochs.to_string(),
            "episodes_per_epoch" => self.episodes_per_epoch.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "kshot" => self.kshot.to_string(),
            "optimizer" => match self.optimizer {
                Optimizer::Sgd => "sgd".into(),
                Optimizer::Adam => "adam".into(),
            },
            "matching" => match self.matching {
                MatchingVariant::Correlation => "correlation".into(),
                MatchingVariant::CrossAttention => "cross_attention".into(),
            },
            "normalization" => match self.normalization {
                NormVariant::InverseSoftmax => "inverse_softmax".into(),
                NormVariant::Softmax => "softmax".into(),
                NormVariant::None => "none".into(),
            },
            "use_distill" => self.use_distill.to_string(),
            "use_prior" => self.use_prior.to_string(),
            "decoder_norm" => self.decoder_norm.to_string(),
            "support_mask_ablation" => self.support_mask_ablation.to_string(),
            "miou" => match self.miou {
                MiouMode::Pooled => "pooled".into(),
                MiouMode::PerEpisode => "per_episode".into(),
            },
            "classes" => self.classes.to_string(),
            "folds" => self.folds.to_string(),
            "fold" => self.fold.to_string(),
            "max_distractors" => self.max_distractors.to_string(),
            "min_radius" => self.min_radius.to_string(),
            "max_radius" => self.max_radius.to_string(),
            "noise" => self.noise.to_string(),
            _ => unreachable!("KEYS lists every key"),
        }
    }

    /// Full reproducibility record, one key per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.value_of(key));
        }
        out
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            stages: self.stages,
            channels: self.channels.clone(),
            image_hw: (self.image_size, self.image_size),
            corr_temperature: self.corr_temperature,
            distill_temperature: self.distill_temperature,
            t2_scaling: self.t2_scaling,
            lambda_distill: self.lambda_distill,
            lr: self.lr,
            grad_clip: self.grad_clip,
            epochs: self.epochs,
            episodes_per_epoch: self.episodes_per_epoch,
            eval_episodes: self.eval_episodes,
            batch_size: self.batch_size,
            kshot: self.kshot,
            seed: self.seed,
            optimizer: self.optimizer,
            matching: self.matching,
            normalization: self.normalization,
            use_distill: self.use_distill,
            use_prior: self.use_prior,
            decoder_norm: self.decoder_norm,
            support_mask_ablation: self.support_mask_ablation,
            miou_mode: self.miou,
            num_classes: self.classes,
            num_folds: self.folds,
            fold: self.fold,
            max_distractors: self.max_distractors,
            min_radius: self.min_radius,
            max_radius: self.max_radius,
            noise: self.noise,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_an_error() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply("not_a_key", "1").is_err());
        assert!(cfg.apply("lr", "0.01").is_ok());
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn serialize_roundtrips_through_apply() {
        let mut cfg = RunConfig::default();
        cfg.apply("channels", "8,12,16").unwrap();
        cfg.apply("matching", "cross_attention").unwrap();
        cfg.apply("use_distill", "false").unwrap();
        let text = cfg.serialize();
        let mut back = RunConfig::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.apply(k, v).unwrap();
        }
        assert_eq!(cfg, back);
    }
}
