//! Sequential finetuning: one backbone and a growing classifier, everything trainable.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::error::{bail, Result};
use crate::model::UnifiedClassifier;
use crate::nn::{cross_entropy, global_avg_pool, global_avg_pool_backward};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{argmax, Tensor};
use crate::trainer::{augment_batch, task_seed, TaskData, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SequentialFinetune {
    pub backbone: Backbone,
    pub classifier: UnifiedClassifier,
    tasks: usize,
}

impl SequentialFinetune {
    pub fn new(backbone: Backbone) -> Self {
        let dim = backbone.arch.embedding_dim();
        SequentialFinetune { backbone, classifier: UnifiedClassifier::new(dim), tasks: 0 }
    }

    /// Trains on one task; returns the mean loss of each epoch.
    pub fn train_task(&mut self, task: &TaskData, config: &TrainConfig) -> Result<Vec<f32>> {
        config.validate()?;
        if task.is_empty() {
            bail!(Input, "task {} has no samples", self.tasks);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(config.seed, self.tasks, 2));
        self.classifier.expand(&mut rng, &task.classes(), self.tasks)?;
        let targets: Vec<usize> = task.labels.iter().map(|l| self.classifier.row_of(*l).expect("row added above")).collect();
        let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..task.len()).collect();
        let pad = task.images.shape()[2] / 8;
        let mut losses = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0f64;
            for chunk in order.chunks(config.batch_size) {
                let mut images = task.images.select(chunk);
                if config.augment {
                    images = augment_batch(&mut rng, &images, pad);
                }
                let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                let out = self.backbone.forward_train(&images)?;
                let emb = global_avg_pool(&out);
                let logits = self.classifier.logits(&emb)?;
                let (loss, grad) = cross_entropy(&logits, &t);
                for p in self.backbone.params_mut() {
                    p.zero_grad();
                }
                self.classifier.weight.zero_grad();
                self.classifier.bias.zero_grad();
                let grad_emb = self.classifier.backward(&emb, &grad);
                self.backbone.backward(&global_avg_pool_backward(&grad_emb, out.shape()))?;
                let mut params = self.backbone.params_mut();
                params.push(&mut self.classifier.weight);
                params.push(&mut self.classifier.bias);
                adam.step(&mut params);
                sum += loss as f64 * chunk.len() as f64;
            }
            losses.push((sum / task.len() as f64) as f32);
        }
        self.backbone.clear_cache();
        self.tasks += 1;
        Ok(losses)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<u32>> {
        let emb = global_avg_pool(&self.backbone.forward(batch)?);
        let logits = self.classifier.logits(&emb)?;
        Ok((0..logits.rows()).map(|r| self.classifier.labels()[argmax(logits.row(r))]).collect())
    }
}
