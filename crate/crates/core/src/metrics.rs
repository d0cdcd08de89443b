//! Stage evaluation and accuracy aggregates.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::router::{
    ensemble_predict, predict, predict_within_task, EnsembleWeights, ModuleSelectionMatrix, RoutingRecord, Strategy,
};
use crate::tensor::Tensor;
use crate::trainer::SessionState;

/// A task-pure test batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub task: usize,
    pub images: Tensor,
    pub labels: Vec<u32>,
}

/// Cuts one task's test samples into task-pure batches of at most `batch_size`.
pub fn task_batches(task: usize, images: &Tensor, labels: &[u32], batch_size: usize) -> Result<Vec<EvalBatch>> {
    if batch_size == 0 {
        bail!(Config, "test batch size must be at least 1");
    }
    if images.batch() != labels.len() {
        bail!(Input, "{} images but {} labels", images.batch(), labels.len());
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < labels.len() {
        let end = (start + batch_size).min(labels.len());
        out.push(EvalBatch { task, images: images.slice_batch(start, end), labels: labels[start..end].to_vec() });
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EvalMode {
    /// Class-incremental: route, then argmax over every seen class.
    Route { strategy: Strategy },
    Ensemble { top_weight: f32 },
    /// Task-incremental: the true task's module, argmax over that task's classes.
    WithinTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub task: usize,
    pub label: u32,
    pub predicted: u32,
    pub module: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvaluation {
    /// Percentage in [0, 100].
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_task_accuracy: Vec<f64>,
    pub confusion: ModuleSelectionMatrix,
    pub samples: Vec<SamplePrediction>,
    pub routing: Vec<RoutingRecord>,
}

/// Scores every batch against the classes seen so far.
pub fn evaluate_stage(state: &SessionState, batches: &[EvalBatch], mode: EvalMode) -> Result<StageEvaluation> {
    let seen = state.classifier.labels();
    let tasks = state.tasks.len();
    let mut confusion = ModuleSelectionMatrix::new(tasks, state.modules.len());
    let mut samples = Vec::new();
    let mut routing = Vec::new();
    let mut task_hits = vec![(0usize, 0usize); tasks];
    for batch in batches {
        if let Some(l) = batch.labels.iter().find(|l| !seen.contains(l)) {
            bail!(Protocol, "test label {l} belongs to a class that has not been trained");
        }
        if batch.task >= tasks {
            bail!(Protocol, "test batch from untrained task {}", batch.task);
        }
        let (predicted, module) = match mode {
            EvalMode::WithinTask => (predict_within_task(state, &batch.images, batch.task)?, None),
            EvalMode::Route { strategy } => {
                let p = predict(state, &batch.images, strategy, Some(batch.task))?;
                routing.push(RoutingRecord {
                    true_task: batch.task,
                    selected_module: p.module,
                    strategy,
                    scores: p.routing.scores,
                });
                (p.labels, Some(p.module))
            }
            EvalMode::Ensemble { top_weight } => {
                let p = ensemble_predict(state, &batch.images, EnsembleWeights::new(top_weight)?)?;
                (p.labels, Some(p.module))
            }
        };
        if let Some(m) = module {
            confusion.record(batch.task, m);
        }
        for (&label, &pred) in batch.labels.iter().zip(&predicted) {
            let hit = &mut task_hits[batch.task];
            hit.1 += 1;
            if label == pred {
                hit.0 += 1;
            }
            samples.push(SamplePrediction { task: batch.task, label, predicted: pred, module });
        }
    }
    let correct = samples.iter().filter(|s| s.label == s.predicted).count();
    let total = samples.len();
    if total == 0 {
        bail!(Input, "empty test set");
    }
    Ok(StageEvaluation {
        accuracy: percent(correct, total),
        correct,
        total,
        per_task_accuracy: task_hits.iter().map(|&(c, t)| if t == 0 { 0.0 } else { percent(c, t) }).collect(),
        confusion,
        samples,
        routing,
    })
}

pub fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// Mean of the per-stage accuracies.
pub fn average_accuracy(stages: &[f64]) -> Result<f64> {
    if stages.is_empty() {
        bail!(Input, "no stage accuracies to average");
    }
    Ok(stages.iter().sum::<f64>() / stages.len() as f64)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    let mean = average_accuracy(values)?;
    if values.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    Ok((mean, libm::sqrt(var)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages() {
        assert_eq!(average_accuracy(&[100.0, 50.0]).unwrap(), 75.0);
        assert_eq!(average_accuracy(&[42.5]).unwrap(), 42.5);
        assert!(matches!(average_accuracy(&[]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!(m, 5.0);
        assert!((s - libm::sqrt(32.0 / 7.0)).abs() < 1e-12);
    }

    #[test]
    fn batching_covers_everything() {
        let images = Tensor::zeros([5, 1, 2, 2]);
        let b = task_batches(0, &images, &[1, 1, 1, 1, 1], 2).unwrap();
        assert_eq!(b.iter().map(|x| x.labels.len()).collect::<Vec<_>>(), [2, 2, 1]);
    }
}
