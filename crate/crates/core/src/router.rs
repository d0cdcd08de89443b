//! Task-identifier-free inference: per-module probabilities, confidence and centroid-distance
//! module selection, oracle (task-aware) mode and weighted ensembling.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::module_logits;
use crate::nn::softmax_rows;
use crate::tensor::{argmax, Matrix, Tensor};
use crate::trainer::{compute_task_centroid, l1_distance, l2_distance, SessionState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Highest batch-averaged max-softmax over the module's own labels.
    Confidence,
    /// Nearest stored centroid under L1.
    DistancePooled,
    /// Nearest stored centroid under L2.
    DistanceMap,
    /// Module of a caller-supplied task id.
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Confidence, Strategy::DistancePooled, Strategy::DistanceMap, Strategy::Oracle];

    pub fn id(self) -> &'static str {
        match self {
            Strategy::Confidence => "confidence",
            Strategy::DistancePooled => "distance-pooled",
            Strategy::DistanceMap => "distance-map",
            Strategy::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match Strategy::ALL.iter().find(|v| v.id() == s) {
            Some(v) => Ok(*v),
            None => bail!(Config, "unknown routing strategy '{s}'"),
        }
    }
}

/// Per-module scores and the chosen module. Scores are confidences for the confidence
/// strategy and centroid distances for the distance strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVector {
    pub scores: Vec<f32>,
    pub selected: usize,
    pub strategy: Strategy,
}

/// Class probabilities of every module over the full label space, sharing one extractor pass.
pub fn module_probabilities(state: &SessionState, batch: &Tensor) -> Result<Vec<Matrix>> {
    if state.modules.is_empty() {
        bail!(State, "no adaptation modules have been trained yet");
    }
    let features = state.extractor.extract(batch)?;
    state
        .modules
        .iter()
        .map(|m| Ok(softmax_rows(&module_logits(m, &state.classifier, &features)?)))
        .collect()
}

/// `conf(b) = mean_i max_{y ∈ Y_b} p_b(y | x_i)`; the largest wins, ties to the lowest index.
pub fn select_confident(probabilities: &[Matrix], label_spaces: &[Vec<usize>]) -> Result<ConfidenceVector> {
    if probabilities.is_empty() {
        bail!(State, "no module probabilities to route over");
    }
    if probabilities.len() != label_spaces.len() {
        bail!(Input, "{} probability matrices but {} label spaces", probabilities.len(), label_spaces.len());
    }
    let n = probabilities[0].rows();
    if n == 0 {
        bail!(Input, "cannot route an empty batch");
    }
    let mut scores = Vec::with_capacity(probabilities.len());
    for (p, labels) in probabilities.iter().zip(label_spaces) {
        if p.rows() != n {
            bail!(Input, "probability matrices disagree on batch size");
        }
        let mut sum = 0.0f64;
        for r in 0..n {
            let row = p.row(r);
            let best = labels.iter().map(|&y| row[y]).fold(0.0f32, f32::max);
            sum += best as f64;
        }
        scores.push((sum / n as f64) as f32);
    }
    let selected = argmax(&scores);
    Ok(ConfidenceVector { scores, selected, strategy: Strategy::Confidence })
}

/// Index of the nearest centroid, ties to the lowest index.
pub fn nearest_centroid(centroids: &[Vec<f32>], query: &[f32], strategy: Strategy) -> Result<ConfidenceVector> {
    if centroids.is_empty() {
        bail!(State, "no stored centroids");
    }
    let dist: fn(&[f32], &[f32]) -> f32 = match strategy {
        Strategy::DistancePooled => l1_distance,
        Strategy::DistanceMap => l2_distance,
        other => bail!(Config, "'{}' is not a distance strategy", other.id()),
    };
    let scores: Vec<f32> = centroids.iter().map(|c| dist(c, query)).collect();
    let mut selected = 0;
    for (i, &d) in scores.iter().enumerate() {
        if d < scores[selected] {
            selected = i;
        }
    }
    Ok(ConfidenceVector { scores, selected, strategy })
}

/// Routes by the distance between the batch centroid and each stored task centroid.
///
/// Returns the nearest task; its module is `state.tasks[task].module`.
pub fn select_by_distance(state: &SessionState, batch: &Tensor, strategy: Strategy) -> Result<ConfidenceVector> {
    if batch.batch() == 0 {
        bail!(Input, "cannot route an empty batch");
    }
    let c = compute_task_centroid(&state.extractor, batch)?;
    nearest_centroid(&state.centroids, &c, strategy)
}

/// Class predictions for a batch together with the routing diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<u32>,
    pub module: usize,
    pub routing: ConfidenceVector,
}

fn labels_from(state: &SessionState, probs: &Matrix) -> Vec<u32> {
    (0..probs.rows()).map(|r| state.classifier.labels()[argmax(probs.row(r))]).collect()
}

/// Routes the batch to one module and takes the argmax over the full label space.
pub fn predict(state: &SessionState, batch: &Tensor, strategy: Strategy, oracle_task: Option<usize>) -> Result<Prediction> {
    if state.modules.is_empty() {
        bail!(State, "no adaptation modules have been trained yet");
    }
    if batch.batch() == 0 {
        bail!(Input, "cannot route an empty batch");
    }
    match strategy {
        Strategy::Confidence => {
            let probs = module_probabilities(state, batch)?;
            let routing = select_confident(&probs, &state.module_label_spaces())?;
            let module = routing.selected;
            Ok(Prediction { labels: labels_from(state, &probs[module]), module, routing })
        }
        Strategy::DistancePooled | Strategy::DistanceMap => {
            let features = state.extractor.extract(batch)?;
            let c = pooled_mean(&features);
            let mut routing = nearest_centroid(&state.centroids, &c, strategy)?;
            let module = state.tasks[routing.selected].module;
            routing.selected = module;
            let probs = softmax_rows(&module_logits(&state.modules[module], &state.classifier, &features)?);
            Ok(Prediction { labels: labels_from(state, &probs), module, routing })
        }
        Strategy::Oracle => {
            let Some(task) = oracle_task else {
                bail!(Config, "oracle routing needs a task id");
            };
            let Some(record) = state.tasks.get(task) else {
                bail!(Config, "oracle task {task} is unknown ({} tasks trained)", state.tasks.len());
            };
            let module = record.module;
            let features = state.extractor.extract(batch)?;
            let probs = softmax_rows(&module_logits(&state.modules[module], &state.classifier, &features)?);
            let mut scores = vec![0.0; state.modules.len()];
            scores[module] = 1.0;
            let routing = ConfidenceVector { scores, selected: module, strategy };
            Ok(Prediction { labels: labels_from(state, &probs), module, routing })
        }
    }
}

/// Task-aware prediction: the task's own module, argmax over that task's labels only.
pub fn predict_within_task(state: &SessionState, batch: &Tensor, task: usize) -> Result<Vec<u32>> {
    let Some(record) = state.tasks.get(task) else {
        bail!(Config, "task {task} is unknown ({} tasks trained)", state.tasks.len());
    };
    let rows = state.task_rows(task);
    let features = state.extractor.extract(batch)?;
    let logits = module_logits(&state.modules[record.module], &state.classifier, &features)?;
    Ok((0..logits.rows())
        .map(|r| {
            let restricted: Vec<f32> = rows.iter().map(|&c| logits.row(r)[c]).collect();
            state.classifier.labels()[rows[argmax(&restricted)]]
        })
        .collect())
}

fn pooled_mean(features: &Tensor) -> Vec<f32> {
    let pooled = crate::nn::global_avg_pool(features);
    let mut sum = vec![0.0f64; pooled.cols()];
    for r in 0..pooled.rows() {
        for (s, &v) in sum.iter_mut().zip(pooled.row(r)) {
            *s += v as f64;
        }
    }
    sum.into_iter().map(|s| (s / pooled.rows() as f64) as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub top_weight: f32,
}

impl EnsembleWeights {
    pub fn new(top_weight: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&top_weight) {
            bail!(Config, "ensemble top weight must lie in [0, 1], got {top_weight}");
        }
        Ok(EnsembleWeights { top_weight })
    }

    pub fn rest_weight(&self) -> f32 {
        1.0 - self.top_weight
    }
}

/// `w·p_best + (1−w)/(B−1)·Σ_{b≠best} p_b`, with `best` chosen by confidence.
pub fn ensemble_predict(state: &SessionState, batch: &Tensor, weights: EnsembleWeights) -> Result<Prediction> {
    let probs = module_probabilities(state, batch)?;
    let routing = select_confident(&probs, &state.module_label_spaces())?;
    let best = routing.selected;
    let b = probs.len();
    if b == 1 || weights.top_weight == 1.0 {
        return Ok(Prediction { labels: labels_from(state, &probs[best]), module: best, routing });
    }
    let rest = weights.rest_weight() / (b - 1) as f32;
    let mut mix = Matrix::zeros(probs[0].rows(), probs[0].cols());
    for (m, p) in probs.iter().enumerate() {
        let w = if m == best { weights.top_weight } else { rest };
        for (o, &v) in mix.data_mut().iter_mut().zip(p.data()) {
            *o += w * v;
        }
    }
    Ok(Prediction { labels: labels_from(state, &mix), module: best, routing })
}

/// `counts[t][m]`: task-`t` batches routed to module `m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSelectionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ModuleSelectionMatrix {
    pub fn new(tasks: usize, modules: usize) -> Self {
        ModuleSelectionMatrix { counts: vec![vec![0; modules]; tasks] }
    }

    pub fn record(&mut self, task: usize, module: usize) {
        self.counts[task][module] += 1;
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Share of batches that went to the module trained on their task.
    pub fn correct_fraction(&self, task_module: &[usize]) -> f64 {
        let total: usize = self.row_sums().iter().sum();
        if total == 0 {
            return 0.0;
        }
        let hit: usize = self.counts.iter().zip(task_module).map(|(row, &m)| row[m]).sum();
        hit as f64 / total as f64
    }
}

/// One routing decision for a task-pure batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub true_task: usize,
    pub selected_module: usize,
    pub strategy: Strategy,
    pub scores: Vec<f32>,
}

/// Routes every task-pure batch and tallies the selections.
pub fn selection_confusion(
    state: &SessionState,
    batches: &[(usize, Tensor)],
    strategy: Strategy,
) -> Result<(ModuleSelectionMatrix, Vec<RoutingRecord>)> {
    let mut matrix = ModuleSelectionMatrix::new(state.tasks.len(), state.modules.len());
    let mut records = Vec::with_capacity(batches.len());
    for (task, batch) in batches {
        if *task >= state.tasks.len() {
            bail!(Protocol, "batch from task {task}, which has not been trained");
        }
        let p = predict(state, batch, strategy, Some(*task))?;
        matrix.record(*task, p.module);
        records.push(RoutingRecord { true_task: *task, selected_module: p.module, strategy, scores: p.routing.scores });
    }
    Ok((matrix, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f32]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn averaged_max_softmax_example() {
        let p0 = m(2, 2, &[0.9, 0.1, 0.8, 0.2]);
        let p1 = m(2, 2, &[0.4, 0.6, 0.4, 0.6]);
        let c = select_confident(&[p0, p1], &[vec![0, 1], vec![0, 1]]).unwrap();
        assert!((c.scores[0] - 0.85).abs() < 1e-6);
        assert!((c.scores[1] - 0.6).abs() < 1e-6);
        assert_eq!(c.selected, 0);
    }

    #[test]
    fn identical_modules_tie_to_first() {
        let p = m(1, 2, &[0.3, 0.7]);
        let c = select_confident(&[p.clone(), p], &[vec![0, 1], vec![0, 1]]).unwrap();
        assert_eq!(c.selected, 0);
    }

    #[test]
    fn empty_batch_is_input_error() {
        let p = Matrix::zeros(0, 2);
        assert!(matches!(select_confident(&[p], &[vec![0]]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn l1_nearest_centroid() {
        let c = nearest_centroid(&[vec![0.0, 0.0], vec![10.0, 10.0]], &[1.0, 1.0], Strategy::DistancePooled).unwrap();
        assert_eq!(c.selected, 0);
        assert_eq!(c.scores, vec![2.0, 18.0]);
    }

    #[test]
    fn exact_centroid_match_wins() {
        let cs = vec![vec![1.0, 2.0], vec![3.0, 3.0], vec![0.0, 5.0], vec![4.0, 4.0]];
        for s in [Strategy::DistancePooled, Strategy::DistanceMap] {
            assert_eq!(nearest_centroid(&cs, &[4.0, 4.0], s).unwrap().selected, 3);
        }
    }

    #[test]
    fn ensemble_weights_range() {
        assert!(EnsembleWeights::new(1.1).is_err());
        assert!(EnsembleWeights::new(-0.1).is_err());
        assert_eq!(EnsembleWeights::new(0.9).unwrap().rest_weight(), 1.0 - 0.9);
    }

    #[test]
    fn strategy_ids_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.id()).unwrap(), s);
        }
        assert!(Strategy::parse("nearest").is_err());
    }
}
