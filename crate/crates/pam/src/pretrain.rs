//! Surrogate pretraining for machines without published backbone weights.
//!
//! Trains a backbone on a synthetic namespace disjoint from the evaluation corpus
//! and writes it in the same format as an ingested checkpoint.

use std::path::Path;

use pam_core::backbone::{Backbone, BackboneVariant};
use pam_core::baseline::SequentialFinetune;
use pam_core::trainer::{TaskData, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_tensor, Normalization};
use crate::error::{Error, Result};
use crate::synth::{generate, SynthSpec};
use crate::weights::{save_backbone, WeightsManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub variant: BackboneVariant,
    pub classes: usize,
    pub per_class: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Synthetic namespace; the evaluation corpus uses namespace 0.
    pub namespace: u32,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            variant: BackboneVariant::Tiny,
            classes: 20,
            per_class: 300,
            epochs: 10,
            learning_rate: 2e-3,
            seed: 0,
            namespace: 1,
        }
    }
}

impl PretrainSpec {
    pub fn source(&self) -> String {
        format!(
            "synthetic surrogate: namespace {}, {} classes x {} images, {} epochs, lr {}, seed {}",
            self.namespace, self.classes, self.per_class, self.epochs, self.learning_rate, self.seed
        )
    }
}

/// Trains the surrogate backbone and returns it with the per-epoch losses.
pub fn pretrain(spec: &PretrainSpec) -> Result<(Backbone, Vec<f32>)> {
    if spec.namespace == 0 {
        return Err(Error::Config("namespace 0 is the evaluation corpus; pick another".into()));
    }
    let synth = SynthSpec {
        classes: spec.classes,
        train_per_class: spec.per_class,
        test_per_class: 0,
        seed: spec.seed,
        namespace: spec.namespace,
    };
    let (train, _) = generate(&synth);
    let arch = spec.variant.arch();
    let indices: Vec<usize> = (0..train.len()).collect();
    let images = to_tensor(&train, &indices, &Normalization::default(), arch.input[1])?;
    let task = TaskData::new(images, train.labels.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut model = SequentialFinetune::new(Backbone::new(&mut rng, arch));
    let config = TrainConfig {
        epochs: spec.epochs,
        learning_rate: spec.learning_rate,
        seed: spec.seed,
        ..TrainConfig::default()
    };
    let losses = model.train_task(&task, &config)?;
    Ok((model.backbone, losses))
}

pub fn pretrain_to(path: &Path, spec: &PretrainSpec) -> Result<WeightsManifest> {
    let (backbone, losses) = pretrain(spec)?;
    log::info!("pretraining losses per epoch: {losses:?}");
    save_backbone(path, &backbone, spec.variant, &spec.source())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::load_backbone;

    #[test]
    fn surrogate_round_trips_through_ingestion() {
        let spec = PretrainSpec { classes: 2, per_class: 4, epochs: 1, ..PretrainSpec::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let manifest = pretrain_to(&path, &spec).unwrap();
        assert_eq!(manifest.source, spec.source());
        let (loaded, m) = load_backbone(&path, spec.variant).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(loaded, pretrain(&spec).unwrap().0);
    }

    #[test]
    fn evaluation_namespace_is_refused() {
        let spec = PretrainSpec { namespace: 0, ..PretrainSpec::default() };
        assert!(matches!(pretrain(&spec), Err(Error::Config(_))));
    }
}
