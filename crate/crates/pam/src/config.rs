//! Run configuration: TOML file, environment overrides and a content hash.

use std::fs;
use std::path::{Path, PathBuf};

use pam_core::backbone::BackboneVariant;
use pam_core::metrics::EvalMode;
use pam_core::router::Strategy;
use pam_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::data::{CifarFormat, Normalization};
use crate::error::{io_err, Error, Result};
use crate::weights::sha256_hex;

pub const DATA_ROOT_ENV: &str = "PAM_DATA_ROOT";
pub const OUTPUT_ROOT_ENV: &str = "PAM_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub output_root: PathBuf,
    /// One full run per seed; each seed also permutes the class order.
    pub seeds: Vec<u64>,
    /// Also train the sequential-finetune baseline on the same stream.
    pub baseline: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { name: "run".into(), output_root: PathBuf::from("runs"), seeds: vec![0], baseline: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    pub format: CifarFormat,
    /// Cap on training images per class (0 keeps all).
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub normalization: Normalization,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::from("data/cifar10"),
            format: CifarFormat::Cifar10,
            train_per_class: 0,
            test_per_class: 0,
            normalization: Normalization::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub base_classes: usize,
    pub increment: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { base_classes: 0, increment: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    /// Pretrained backbone (safetensors, torchvision tensor names).
    pub weights: PathBuf,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { variant: BackboneVariant::Tiny.id().into(), weights: PathBuf::from("weights/rn-tiny.safetensors") }
    }
}

impl ModelSection {
    pub fn variant(&self) -> Result<BackboneVariant> {
        Ok(BackboneVariant::parse(&self.variant)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub strategy: Strategy,
    /// Weight of the most confident module; below 1 enables ensembling.
    pub ensemble_weight: f32,
    /// Images per task-pure routing batch.
    pub test_batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { strategy: Strategy::Confidence, ensemble_weight: 1.0, test_batch_size: 48 }
    }
}

impl EvalSection {
    pub fn mode(&self) -> EvalMode {
        if self.ensemble_weight < 1.0 {
            EvalMode::Ensemble { top_weight: self.ensemble_weight }
        } else {
            EvalMode::Route { strategy: self.strategy }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Reads a config file and applies the environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.data.root = PathBuf::from(v);
        }
        if let Some(v) = get(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.run.output_root = PathBuf::from(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.variant()?;
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run.name '{}' must be a plain directory name", self.run.name)));
        }
        if self.split.increment == 0 {
            return Err(Error::Config("split.increment must be at least 1".into()));
        }
        if self.eval.test_batch_size == 0 {
            return Err(Error::Config("eval.test_batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.ensemble_weight) {
            return Err(Error::Config("eval.ensemble_weight must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The configuration of a single-seed run.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.run.seeds = vec![seed];
        c.train.seed = seed;
        c
    }

    /// Hash of everything that influences training (evaluation settings excluded).
    pub fn training_hash(&self) -> String {
        let mut c = self.clone();
        c.eval = EvalSection::default();
        c.run.output_root = PathBuf::new();
        c.run.name = String::new();
        c.run.baseline = false;
        sha256_hex(serde_json::to_string(&c).expect("config serialises").as_bytes())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_method() {
        let c = RunConfig::default();
        assert_eq!(c.train.epochs, 25);
        assert_eq!(c.train.batch_size, 48);
        assert_eq!(c.train.prune_magnitude, 0.96);
        assert_eq!(c.eval.test_batch_size, 48);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.train.reuse_beta = Some(0.73);
        c.eval.strategy = Strategy::DistanceMap;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml("[train]\nepochs = 5\n[split]\nincrement = 5\n").unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.split.increment, 5);
        assert_eq!(c.train.prune_epoch, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nepoch = 5\n"), Err(Error::Config(_))));
    }

    #[test]
    fn env_overrides_roots() {
        let mut c = RunConfig::default();
        c.apply_env(|k| match k {
            DATA_ROOT_ENV => Some("/d".into()),
            OUTPUT_ROOT_ENV => Some("/o".into()),
            _ => None,
        });
        assert_eq!(c.data.root, PathBuf::from("/d"));
        assert_eq!(c.run.output_root, PathBuf::from("/o"));
    }

    #[test]
    fn eval_settings_do_not_change_training_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.strategy = Strategy::DistancePooled;
        assert_eq!(a.training_hash(), b.training_hash());
        assert_ne!(a.hash(), b.hash());
        b.train.prune_magnitude = 0.98;
        assert_ne!(a.training_hash(), b.training_hash());
    }
}
