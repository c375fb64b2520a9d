use std::fs;
use std::path::{Path, PathBuf};

use cbamnet::data::{AugmentationSpec, SplitSpec};
use cbamnet::evaluation::DEFAULT_THRESHOLD;
use cbamnet::model::{build_model, BackboneConfig, FreezeMask, ModelAssembly, DEFAULT_REDUCTION};
use cbamnet::training::TrainConfig;
use cbamnet::Error;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Everything a run needs apart from command-line overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub models: Vec<ModelSpec>,
    pub train: TrainSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    /// Root with `Monkeypox/` and `Others/` subdirectories.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Used when no data directory is given.
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Master seed for initialization, splitting and shuffling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub label: String,
    pub backbone: BackboneConfig,
    #[serde(default = "default_reduction")]
    pub reduction_ratio: usize,
    #[serde(default)]
    pub freeze: FreezePolicy,
}

fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezePolicy {
    /// Every backbone block except the last two.
    #[default]
    Default,
    None,
}

/// Optimizer settings; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "train_defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "train_defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "train_defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "train_defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "train_defaults::epsilon")]
    pub epsilon: f64,
}

mod train_defaults {
    use cbamnet::training::TrainConfig;

    pub fn learning_rate() -> f64 {
        TrainConfig::new(0, 0).learning_rate
    }
    pub fn batch_size() -> usize {
        TrainConfig::new(0, 0).batch_size
    }
    pub fn beta1() -> f64 {
        TrainConfig::new(0, 0).beta1
    }
    pub fn beta2() -> f64 {
        TrainConfig::new(0, 0).beta2
    }
    pub fn epsilon() -> f64 {
        TrainConfig::new(0, 0).epsilon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitSpec::default();
        SplitSection {
            train_fraction: d.train_fraction,
            test_fraction: d.test_fraction,
            val_fraction: d.val_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub height: usize,
    pub width: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Failure::config(e.inner().to_string())
            } else {
                Failure::config(format!("{path}: {}", e.inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), Failure> {
        let invalid = |msg: String| Failure::config(msg);
        if self.models.is_empty() {
            return Err(invalid("models must list at least one model".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.label.trim().is_empty() {
                return Err(invalid(format!("models[{i}].label must not be empty")));
            }
            if self.models[..i].iter().any(|o| o.label == m.label) {
                return Err(invalid(format!("models[{i}].label {:?} is used twice", m.label)));
            }
            m.build(0)
                .map_err(|e| invalid(format!("models[{i}] ({}): {}", m.label, bare(&e))))?;
        }
        self.train_config(0)
            .validate()
            .map_err(|e| invalid(format!("train.{}", bare(&e))))?;
        self.split_spec(0).validate().map_err(|e| invalid(bare(&e)))?;
        self.augmentation
            .validate()
            .map_err(|e| invalid(format!("augmentation: {}", bare(&e))))?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(invalid(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if let Some(s) = &self.synth {
            if s.n == 0 || s.n % 2 != 0 {
                return Err(invalid(format!("synth.n must be positive and even, got {}", s.n)));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed,
        }
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train_fraction: self.split.train_fraction,
            test_fraction: self.split.test_fraction,
            val_fraction: self.split.val_fraction,
            seed,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> cbamnet::Result<ModelAssembly> {
        let mut model = build_model(&self.backbone, self.reduction_ratio, seed)?;
        if self.freeze == FreezePolicy::None {
            model.set_freeze_mask(FreezeMask::none())?;
        }
        Ok(model)
    }

    /// Input height and width.
    pub fn input_size(&self) -> (usize, usize) {
        let [_, h, w] = self.backbone.input_shape;
        (h, w)
    }
}

/// The message of a configuration error without its generic prefix.
fn bare(e: &Error) -> String {
    match e {
        Error::InvalidConfig(msg) => msg.clone(),
        other => other.to_string(),
    }
}
