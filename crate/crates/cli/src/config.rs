//! Run configuration: a flat TOML file overlaid with command-line flags.
//!
//! Every config key has a flag of the same name (`snake_case` key,
//! `--kebab-case` flag). Flag values win; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use seqseg::data::ShapesSpec;
use seqseg::decoder::{DecoderConfig, SkipMode};
use seqseg::encoder::EncoderConfig;
use seqseg::trainer::{LossStages, TrainConfig};
use seqseg::ModelConfig;

use crate::CliError;

/// Loads `file` (if any), overlays the set fields of `flags` and
/// deserializes the result.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, flags: &impl Serialize) -> Result<T, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| {
                CliError::config(format!("{}: {}", path.display(), e.message().trim()))
            })?
        }
        None => toml::Table::new(),
    };
    let overrides = toml::Table::try_from(flags).map_err(|e| CliError::config(e.to_string()))?;
    table.extend(overrides);
    table.try_into().map_err(|e: toml::de::Error| CliError::config(e.message().trim().to_string()))
}

pub fn require(value: &Option<PathBuf>, key: &str) -> Result<PathBuf, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::config(format!("missing required setting `{key}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub num_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub max_overlap: f64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let s = ShapesSpec::default();
        GenDataConfig {
            out_dir: None,
            seed: s.seed,
            num_images: 2400,
            val_images: 200,
            test_images: 200,
            height: s.height,
            width: s.width,
            num_classes: s.num_classes,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_size: s.min_size,
            max_size: s.max_size,
            max_overlap: s.max_overlap,
        }
    }
}

impl GenDataConfig {
    pub fn spec(&self) -> ShapesSpec {
        ShapesSpec {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size: self.min_size,
            max_size: self.max_size,
            max_overlap: self.max_overlap,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Square size every record is resized to before training.
    pub image_size: Option<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub augment: bool,
    pub encoder_blocks: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    /// Defaults to `encoder_blocks`.
    pub decoder_layers: Option<usize>,
    pub hidden: usize,
    pub skip_mode: SkipMode,
    pub num_classes: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub stage_mask: usize,
    pub stage_stop: usize,
    pub stage_class: usize,
    pub stage_box: usize,
    pub curriculum_start: usize,
    pub patience: usize,
    pub plateau_eps: f64,
    pub checkpoint_every: usize,
    pub stop_threshold: f64,
    pub max_steps: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let (e, d) = (&t.model.encoder, &t.model.decoder);
        TrainRunConfig {
            data_dir: None,
            out_dir: None,
            resume: None,
            image_size: None,
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            augment: t.augment,
            encoder_blocks: e.num_blocks,
            base_channels: e.base_channels,
            channel_growth: e.channel_growth,
            decoder_layers: None,
            hidden: d.hidden,
            skip_mode: d.skip_mode,
            num_classes: d.num_classes,
            alpha: t.alpha,
            lambda: t.lambda,
            gamma: t.gamma,
            stage_mask: t.stages.mask,
            stage_stop: t.stages.stop,
            stage_class: t.stages.class,
            stage_box: t.stages.bbox,
            curriculum_start: t.curriculum_start,
            patience: t.patience,
            plateau_eps: t.plateau_eps,
            checkpoint_every: t.checkpoint_every,
            stop_threshold: t.stop_threshold,
            max_steps: t.max_steps,
        }
    }
}

impl TrainRunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    num_blocks: self.encoder_blocks,
                    base_channels: self.base_channels,
                    channel_growth: self.channel_growth,
                },
                decoder: DecoderConfig {
                    num_layers: self.decoder_layers.unwrap_or(self.encoder_blocks),
                    hidden: self.hidden,
                    skip_mode: self.skip_mode,
                    num_classes: self.num_classes,
                },
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            augment: self.augment,
            seed: self.seed,
            alpha: self.alpha,
            lambda: self.lambda,
            gamma: self.gamma,
            stages: LossStages {
                mask: self.stage_mask,
                stop: self.stage_stop,
                class: self.stage_class,
                bbox: self.stage_box,
            },
            curriculum_start: self.curriculum_start,
            patience: self.patience,
            plateau_eps: self.plateau_eps,
            checkpoint_every: self.checkpoint_every,
            stop_threshold: self.stop_threshold,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub split: String,
    pub image_size: Option<usize>,
    pub iou_thresholds: Vec<f64>,
    pub stop_threshold: f64,
    pub max_steps: usize,
    /// Score the ground truth itself instead of model predictions.
    pub oracle_predictions: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            data_dir: None,
            out_dir: None,
            split: "test".into(),
            image_size: None,
            iou_thresholds: vec![0.5, 0.75],
            stop_threshold: 0.5,
            max_steps: 10,
            oracle_predictions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub stop_threshold: f64,
    pub max_steps: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            checkpoint: None,
            image: None,
            out_dir: None,
            stop_threshold: 0.5,
            max_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub split: String,
    pub image_size: Option<usize>,
    pub stop_threshold: f64,
    pub max_steps: usize,
    pub pair_threshold: f64,
    pub pair_min_count: usize,
    /// Images rendered as numbered overlays.
    pub num_overlays: usize,
    /// Seed of the untrained reference encoder; defaults to the training seed.
    pub seed: Option<u64>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            checkpoint: None,
            data_dir: None,
            out_dir: None,
            split: "test".into(),
            image_size: None,
            stop_threshold: 0.5,
            max_steps: 10,
            pair_threshold: 0.15,
            pair_min_count: 20,
            num_overlays: 8,
            seed: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Default)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        epochs: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none")]
        skip_mode: Option<String>,
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn flags_override_file() {
        let f = write("epochs = 3\nseed = 9\nskip_mode = \"sum\"\n");
        let cfg: TrainRunConfig = resolve(
            Some(f.path()),
            &Flags {
                epochs: Some(5),
                ..Flags::default()
            },
        )
        .unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.skip_mode), (5, 9, SkipMode::Sum));
        assert_eq!(cfg.batch_size, TrainRunConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write("epochs = 3\nlearning_rat = 0.1\n");
        let err = resolve::<TrainRunConfig>(Some(f.path()), &Flags::default()).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("learning_rat"), "{}", err.message);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let flags = Flags {
            skip_mode: Some("diagonal".into()),
            ..Flags::default()
        };
        assert_eq!(resolve::<TrainRunConfig>(None, &flags).unwrap_err().code, 2);
        let f = write("epochs = [");
        assert_eq!(resolve::<TrainRunConfig>(Some(f.path()), &Flags::default()).unwrap_err().code, 2);
    }

    #[test]
    fn defaults_match_library() {
        let cfg: TrainRunConfig = resolve(None, &Flags::default()).unwrap();
        assert_eq!(cfg.train_config(), TrainConfig::default());
        let g: GenDataConfig = resolve(None, &Flags::default()).unwrap();
        assert_eq!(g.spec(), ShapesSpec::default());
    }
}
