//! Experiment configuration. TOML is the canonical format.

use std::path::{Path, PathBuf};

use fedens_core::aggregator::{StopCriterion, Weighting};
use fedens_core::metrics::EvalConfig;
use fedens_core::model::ModelSpec;
use fedens_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{}: {source}", file.display())]
    Read {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", file.display())]
    Parse { file: PathBuf, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Clients simulated in this process.
    #[default]
    Sim,
    /// Each client on its own loopback TCP connection.
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Cabin,
    Trailer,
}

impl Preset {
    pub fn classes(self) -> usize {
        match self {
            Preset::Cabin => 2,
            Preset::Trailer => 3,
        }
    }
}

/// How the seen test set is obtained for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Holdout {
    /// 80/10/10 split of the generated pool.
    Split,
    /// The whole pool trains; a separate seen-combo test set is generated.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        preset: Preset,
        /// Size of the generated training pool.
        images: usize,
        /// Size of each generated test set.
        test_images: usize,
        holdout: Holdout,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        blur_probability: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        brightness: Option<f32>,
    },
    Yolo {
        images: PathBuf,
        labels: PathBuf,
        class_names: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSettings {
    pub rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_metric: Option<f64>,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Seeds for `compare`; empty means `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    #[serde(default)]
    pub channel: Channel,
    pub clients: usize,
    #[serde(default)]
    pub weighting: Weighting,
    pub centralized_epochs: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    pub model: ModelSpec,
    pub data: DataSource,
    pub train: TrainSettings,
    pub stop: StopSettings,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, file: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            file: file.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            file: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::from_toml(&text, path)?;
        Ok((cfg, sha256_hex(text.as_bytes())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            local_epochs: self.train.local_epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed,
        }
    }

    pub fn stop_criterion(&self) -> StopCriterion {
        StopCriterion {
            target_metric: self.stop.target_metric,
            max_rounds: self.stop.rounds,
        }
    }

    /// Image side length; only meaningful for a validated config.
    pub fn image_side(&self) -> usize {
        match self.model {
            ModelSpec::GridDetector { image_size, .. } => image_size,
            _ => 0,
        }
    }

    pub fn class_count(&self) -> usize {
        match &self.data {
            DataSource::Synthetic { preset, .. } => preset.classes(),
            DataSource::Yolo { class_names, .. } => class_names.len(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.clients == 0 {
            return Err(invalid("clients", "must be >= 1"));
        }
        if self.centralized_epochs == 0 {
            return Err(invalid("centralized_epochs", "must be >= 1"));
        }
        if self.timeout_secs == 0 {
            return Err(invalid("timeout_secs", "must be >= 1"));
        }
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        let ModelSpec::GridDetector { image_size, classes, .. } = self.model else {
            return Err(invalid("model.kind", "experiments need a grid_detector model"));
        };
        if classes != self.class_count() {
            return Err(invalid(
                "model.classes",
                format!("{classes} classes but the data source has {}", self.class_count()),
            ));
        }
        match &self.data {
            DataSource::Synthetic {
                images,
                test_images,
                holdout,
                blur_probability,
                brightness,
                ..
            } => {
                if image_size < 16 {
                    return Err(invalid("model.image_size", "synthetic scenes need at least 16 pixels"));
                }
                let min = if *holdout == Holdout::Split { 10 } else { 1 };
                if *images < min {
                    return Err(invalid("data.images", format!("must be >= {min}")));
                }
                if *test_images == 0 {
                    return Err(invalid("data.test_images", "must be >= 1"));
                }
                if blur_probability.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
                    return Err(invalid("data.blur_probability", "must lie in [0, 1]"));
                }
                if brightness.is_some_and(|b| !(b > 0.0 && b <= 1.0)) {
                    return Err(invalid("data.brightness", "must lie in (0, 1]"));
                }
            }
            DataSource::Yolo {
                images,
                labels,
                class_names,
            } => {
                if !images.is_dir() {
                    return Err(invalid("data.images", format!("{} is not a directory", images.display())));
                }
                if !labels.is_dir() {
                    return Err(invalid("data.labels", format!("{} is not a directory", labels.display())));
                }
                if class_names.is_empty() {
                    return Err(invalid("data.class_names", "must not be empty"));
                }
            }
        }
        if self.train.local_epochs == 0 {
            return Err(invalid("train.local_epochs", "must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be >= 1"));
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return Err(invalid("train.learning_rate", "must be finite and > 0"));
        }
        if self.stop.rounds == 0 {
            return Err(invalid("stop.rounds", "must be >= 1"));
        }
        if self.stop.target_metric.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
            return Err(invalid("stop.target_metric", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eval.conf_thresh) {
            return Err(invalid("eval.conf_thresh", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_thresh) {
            return Err(invalid("eval.iou_thresh", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.eval.nms_iou) {
            return Err(invalid("eval.nms_iou", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Built-in experiment: `cabin` (2 classes, 5 rounds × 15 epochs) or
    /// `trailer` (3 classes, 900 images split 80/10/10, 4 rounds × 10).
    pub fn preset(preset: Preset) -> Self {
        let model = ModelSpec::GridDetector {
            image_size: 32,
            grid: 4,
            classes: preset.classes(),
            hidden: 128,
        };
        let train = TrainSettings {
            local_epochs: 15,
            batch_size: 4,
            learning_rate: 0.03,
        };
        match preset {
            Preset::Cabin => Self {
                name: "cabin".into(),
                seed: 1,
                seeds: vec![1, 2, 3],
                out: "runs/cabin".into(),
                channel: Channel::Sim,
                clients: 3,
                weighting: Weighting::SampleCount,
                centralized_epochs: 75,
                timeout_secs: default_timeout(),
                model,
                data: DataSource::Synthetic {
                    preset,
                    images: 800,
                    test_images: 200,
                    holdout: Holdout::Separate,
                    blur_probability: None,
                    brightness: None,
                },
                train,
                stop: StopSettings {
                    rounds: 5,
                    target_metric: None,
                },
                eval: EvalConfig::default(),
            },
            Preset::Trailer => Self {
                name: "trailer".into(),
                out: "runs/trailer".into(),
                centralized_epochs: 100,
                model,
                data: DataSource::Synthetic {
                    preset,
                    images: 900,
                    test_images: 90,
                    holdout: Holdout::Split,
                    blur_probability: None,
                    brightness: None,
                },
                train: TrainSettings { local_epochs: 10, ..train },
                stop: StopSettings {
                    rounds: 4,
                    target_metric: None,
                },
                ..Self::preset(Preset::Cabin)
            },
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
