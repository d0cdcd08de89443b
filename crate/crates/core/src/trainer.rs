//! Per-task training sessions: module instantiation or reuse, cross-entropy training,
//! one-shot pruning at the scheduled epoch, freezing, compaction and task centroids.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{bail, Result};
use crate::model::{
    count_parameters, instantiate_module, split_backbone, train_backward, train_forward, AdaptationModule,
    CountingMode, InitStrategy, ParamReport, SharedExtractor, UnifiedClassifier,
};
use crate::nn::{cross_entropy, softmax_row};
use crate::optim::{Adam, AdamConfig};
use crate::pruning::{apply_plan, build_pruning_plan, compact};
use crate::tensor::{argmax, Matrix, Tensor};

/// Images of one task with their dataset class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub images: Tensor,
    pub labels: Vec<u32>,
}

impl TaskData {
    pub fn new(images: Tensor, labels: Vec<u32>) -> Result<Self> {
        if images.batch() != labels.len() {
            bail!(Input, "{} images but {} labels", images.batch(), labels.len());
        }
        Ok(TaskData { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<u32> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// 1-based epoch after which the module is pruned; larger than `epochs` disables pruning.
    pub prune_epoch: usize,
    pub prune_magnitude: f32,
    pub init_strategy: InitStrategy,
    /// Module-reuse threshold scale; `None` always allocates a new module.
    pub reuse_beta: Option<f32>,
    pub distill_temperature: f32,
    pub distill_weight: f32,
    /// Random crop (zero padding) and horizontal flip on training batches.
    pub augment: bool,
    /// Classifier rows the cross-entropy softmax spans.
    pub loss_scope: LossScope,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossScope {
    /// Only the rows of the task being trained.
    #[default]
    Task,
    /// Every row seen so far, frozen ones included.
    Cumulative,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            learning_rate: 1e-3,
            batch_size: 48,
            prune_epoch: 1,
            prune_magnitude: 0.96,
            init_strategy: InitStrategy::Pretrained,
            reuse_beta: None,
            distill_temperature: 2.0,
            distill_weight: 1.0,
            augment: true,
            loss_scope: LossScope::Task,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "epochs must be at least 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if self.prune_epoch == 0 {
            bail!(Config, "prune_epoch is 1-based and must be at least 1");
        }
        if !(0.0..1.0).contains(&self.prune_magnitude) {
            bail!(Config, "prune_magnitude must lie in [0, 1), got {}", self.prune_magnitude);
        }
        if !(self.learning_rate > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        if !(self.distill_temperature > 0.0) {
            bail!(Config, "distillation temperature must be positive");
        }
        if !(self.distill_weight >= 0.0) {
            bail!(Config, "distillation weight must be non-negative");
        }
        if let Some(beta) = self.reuse_beta {
            if !(beta >= 0.0) {
                bail!(Config, "reuse beta must be non-negative");
            }
        }
        Ok(())
    }

    pub fn prunes(&self) -> bool {
        self.prune_epoch <= self.epochs
    }
}

/// Outcome of the centroid-similarity test for a new task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseDecision {
    pub reused: bool,
    /// Index of the most similar earlier task.
    pub target_task: Option<usize>,
    pub d_min: f32,
    pub mean_distance: f32,
    pub threshold: f32,
}

/// Manhattan distance between two centroids.
pub fn l1_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| libm::fabs((x - y) as f64)).sum::<f64>() as f32
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f32 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| ((x - y) as f64) * ((x - y) as f64)).sum::<f64>()) as f32
}

/// Reuse iff `min_i ‖c_new − c_i‖₁ < β · mean_i ‖c_new − c_i‖₁`.
pub fn decide_reuse(centroids: &[Vec<f32>], c_new: &[f32], beta: f32) -> Result<ReuseDecision> {
    if !(beta >= 0.0) {
        bail!(Config, "reuse beta must be non-negative");
    }
    if centroids.is_empty() {
        return Ok(ReuseDecision { reused: false, target_task: None, d_min: 0.0, mean_distance: 0.0, threshold: 0.0 });
    }
    let distances: Vec<f32> = centroids.iter().map(|c| l1_distance(c, c_new)).collect();
    let mut target = 0;
    for (i, &d) in distances.iter().enumerate() {
        if d < distances[target] {
            target = i;
        }
    }
    let d_min = distances[target];
    let mean_distance = (distances.iter().map(|&d| d as f64).sum::<f64>() / distances.len() as f64) as f32;
    let threshold = beta * mean_distance;
    let reused = d_min < threshold;
    Ok(ReuseDecision { reused, target_task: Some(target), d_min, mean_distance, threshold })
}

/// Mean pooled extractor feature over a task's images.
pub fn compute_task_centroid(extractor: &SharedExtractor, images: &Tensor) -> Result<Vec<f32>> {
    let n = images.batch();
    if n == 0 {
        bail!(Input, "cannot compute the centroid of an empty task");
    }
    let dim = extractor.output_shape()[0];
    let mut sum = vec![0.0f64; dim];
    let chunk = 64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let pooled = extractor.pooled(&images.slice_batch(start, end))?;
        for r in 0..pooled.rows() {
            for (s, &v) in sum.iter_mut().zip(pooled.row(r)) {
                *s += v as f64;
            }
        }
        start = end;
    }
    Ok(sum.into_iter().map(|s| (s / n as f64) as f32).collect())
}

/// Mean over rows of `KL(softmax(teacher/T) ‖ softmax(student/T))`, with its gradient w.r.t. the student logits.
pub fn distillation_loss(student: &Matrix, teacher: &Matrix, temperature: f32) -> Result<(f32, Matrix)> {
    if student.rows() != teacher.rows() || student.cols() != teacher.cols() {
        bail!(
            Input,
            "student logits {}x{} vs teacher logits {}x{}",
            student.rows(),
            student.cols(),
            teacher.rows(),
            teacher.cols()
        );
    }
    if !(temperature > 0.0) {
        bail!(Config, "distillation temperature must be positive");
    }
    let (n, k) = (student.rows(), student.cols());
    let mut grad = Matrix::zeros(n, k);
    let mut loss = 0.0f64;
    let mut p = vec![0.0f32; k];
    let mut q = vec![0.0f32; k];
    for r in 0..n {
        let s: Vec<f32> = student.row(r).iter().map(|z| z / temperature).collect();
        let t: Vec<f32> = teacher.row(r).iter().map(|z| z / temperature).collect();
        softmax_row(&s, &mut p);
        softmax_row(&t, &mut q);
        let log_p = crate::nn::log_softmax_row(&s);
        let log_q = crate::nn::log_softmax_row(&t);
        for j in 0..k {
            if q[j] > 0.0 {
                loss += (q[j] * (log_q[j] - log_p[j])) as f64;
            }
            grad.row_mut(r)[j] = (p[j] - q[j]) / (temperature * n as f32);
        }
    }
    Ok(((loss / n as f64) as f32, grad))
}

/// Random crop after zero padding by `pad`, then a coin-flip horizontal mirror.
pub fn augment_batch<R: Rng + ?Sized>(rng: &mut R, batch: &Tensor, pad: usize) -> Tensor {
    let [n, c, h, w] = batch.shape();
    let mut out = Tensor::zeros(batch.shape());
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.gen_bool(0.5);
        let src = batch.sample(i);
        let dst = out.sample_mut(i);
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Task metadata kept for routing and bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub labels: Vec<u32>,
    pub module: usize,
    pub reuse: Option<ReuseDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Session { task: usize, module: usize, reused: bool, classes: Vec<u32>, samples: usize },
    Step { task: usize, epoch: usize, step: usize, loss: f32 },
    Epoch { task: usize, epoch: usize, mean_loss: f32, train_accuracy: f32 },
    Pruned { task: usize, epoch: usize, magnitude: f32, live_params: usize, dense_params: usize },
    Frozen { task: usize, module: usize, params: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn epoch_losses(&self) -> Vec<f32> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { mean_loss, .. } => Some(*mean_loss),
                _ => None,
            })
            .collect()
    }

    pub fn epoch_accuracies(&self) -> Vec<f32> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { train_accuracy, .. } => Some(*train_accuracy),
                _ => None,
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.records.iter().all(|r| match r {
            LogRecord::Step { loss, .. } => loss.is_finite(),
            LogRecord::Epoch { mean_loss, .. } => mean_loss.is_finite(),
            _ => true,
        })
    }
}

/// Everything a continual learner carries between tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub extractor: SharedExtractor,
    pub template: AdaptationModule,
    pub modules: Vec<AdaptationModule>,
    pub classifier: UnifiedClassifier,
    pub centroids: Vec<Vec<f32>>,
    pub tasks: Vec<TaskRecord>,
}

pub(crate) fn task_seed(seed: u64, task: usize, salt: u64) -> u64 {
    let mut z = seed ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SessionState {
    pub fn new(backbone: Backbone) -> Result<Self> {
        let (extractor, template) = split_backbone(backbone)?;
        let classifier = UnifiedClassifier::new(template.out_channels());
        Ok(SessionState { extractor, template, modules: Vec::new(), classifier, centroids: Vec::new(), tasks: Vec::new() })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn module_count(&self) -> usize {
        self.modules.len()
    }

    pub fn seen_classes(&self) -> Vec<u32> {
        self.classifier.labels().to_vec()
    }

    /// Classifier rows belonging to tasks served by module `m`.
    pub fn module_rows(&self, m: usize) -> Vec<usize> {
        let owned: Vec<usize> = (0..self.tasks.len()).filter(|&t| self.tasks[t].module == m).collect();
        (0..self.classifier.rows()).filter(|&r| owned.contains(&self.classifier.row_task()[r])).collect()
    }

    pub fn task_rows(&self, task: usize) -> Vec<usize> {
        (0..self.classifier.rows()).filter(|&r| self.classifier.row_task()[r] == task).collect()
    }

    /// Label rows per module, in module order.
    pub fn module_label_spaces(&self) -> Vec<Vec<usize>> {
        (0..self.modules.len()).map(|m| self.module_rows(m)).collect()
    }

    pub fn param_report(&self, mode: CountingMode) -> Result<ParamReport> {
        count_parameters(&self.extractor, &self.modules, &self.classifier, mode)
    }

    fn most_similar_task(&self, c_new: &[f32]) -> Option<usize> {
        let mut best: Option<(usize, f32)> = None;
        for (i, c) in self.centroids.iter().enumerate() {
            let d = l1_distance(c, c_new);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Runs one full training session on `task` and appends its module, rows and centroid.
    pub fn train_task(&mut self, task: &TaskData, config: &TrainConfig) -> Result<TrainLog> {
        config.validate()?;
        if task.is_empty() {
            bail!(Input, "task {} has no samples", self.tasks.len());
        }
        let classes = task.classes();
        if let Some(c) = classes.iter().find(|c| self.classifier.labels().contains(c)) {
            bail!(Protocol, "class {c} was already introduced by an earlier task");
        }
        let task_index = self.tasks.len();
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(config.seed, task_index, 1));

        let c_new = compute_task_centroid(&self.extractor, &task.images)?;
        let reuse = match config.reuse_beta {
            Some(beta) => Some(decide_reuse(&self.centroids, &c_new, beta)?),
            None => None,
        };
        let reuse_module = reuse
            .as_ref()
            .filter(|d| d.reused)
            .and_then(|d| d.target_task)
            .map(|t| self.tasks[t].module);

        self.classifier.expand(&mut rng, &classes, task_index)?;

        let (mut module, teacher) = match reuse_module {
            Some(m) => {
                let teacher = self.modules[m].clone();
                let mut module = self.modules[m].clone();
                module.unfreeze();
                (module, Some((teacher, self.module_rows(m))))
            }
            None => {
                let donor = match config.init_strategy {
                    InitStrategy::Relevant => self.most_similar_task(&c_new).map(|t| &self.modules[self.tasks[t].module]),
                    InitStrategy::Pretrained => None,
                };
                let strategy = if donor.is_some() { config.init_strategy } else { InitStrategy::Pretrained };
                (instantiate_module(&self.template, strategy, donor, task_index)?, None)
            }
        };
        let module_index = reuse_module.unwrap_or(self.modules.len());

        let mut log = TrainLog::default();
        log.records.push(LogRecord::Session {
            task: task_index,
            module: module_index,
            reused: reuse_module.is_some(),
            classes: classes.clone(),
            samples: task.len(),
        });

        let targets: Vec<usize> = task
            .labels
            .iter()
            .map(|l| self.classifier.row_of(*l).expect("row added above"))
            .collect();
        let loss_rows: Vec<usize> = match config.loss_scope {
            LossScope::Task => self.classifier.row_task().iter().enumerate().filter(|(_, &t)| t == task_index).map(|(r, _)| r).collect(),
            LossScope::Cumulative => (0..self.classifier.rows()).collect(),
        };
        let local_target = |row: usize| loss_rows.iter().position(|&r| r == row).expect("target row in loss scope");
        let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..task.len()).collect();
        let pad = task.images.shape()[2] / 8;
        let mut step = 0;

        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
            for chunk in order.chunks(config.batch_size) {
                let mut images = task.images.select(chunk);
                if config.augment {
                    images = augment_batch(&mut rng, &images, pad);
                }
                let batch_targets: Vec<usize> = chunk.iter().map(|&i| local_target(targets[i])).collect();
                let features = self.extractor.extract(&images)?;

                let teacher_logits = match &teacher {
                    Some((t, rows)) => Some((restrict(&crate::model::module_logits(t, &self.classifier, &features)?, rows), rows)),
                    None => None,
                };

                let (logits, emb, out_shape) = train_forward(&mut module, &self.classifier, &features)?;
                let scoped = restrict(&logits, &loss_rows);
                let (mut loss, scoped_grad) = cross_entropy(&scoped, &batch_targets);
                let mut grad = Matrix::zeros(logits.rows(), logits.cols());
                for r in 0..grad.rows() {
                    for (j, &col) in loss_rows.iter().enumerate() {
                        grad.row_mut(r)[col] = scoped_grad.row(r)[j];
                    }
                }
                if let Some((t_logits, rows)) = &teacher_logits {
                    if config.distill_weight > 0.0 {
                        let s_logits = restrict(&logits, rows);
                        let (kd, kd_grad) = distillation_loss(&s_logits, t_logits, config.distill_temperature)?;
                        loss += config.distill_weight * kd;
                        for r in 0..grad.rows() {
                            for (j, &col) in rows.iter().enumerate() {
                                grad.row_mut(r)[col] += config.distill_weight * kd_grad.row(r)[j];
                            }
                        }
                    }
                }
                for r in 0..scoped.rows() {
                    if argmax(scoped.row(r)) == batch_targets[r] {
                        correct += 1;
                    }
                }
                seen += chunk.len();
                loss_sum += loss as f64 * chunk.len() as f64;

                zero_grads(&mut module, &mut self.classifier)?;
                train_backward(&mut module, &mut self.classifier, &emb, out_shape, &grad)?;
                {
                    let mut params = module.params_mut()?;
                    params.push(&mut self.classifier.weight);
                    params.push(&mut self.classifier.bias);
                    adam.step(&mut params);
                }
                module.enforce_mask();
                log.records.push(LogRecord::Step { task: task_index, epoch, step, loss });
                step += 1;
            }
            log.records.push(LogRecord::Epoch {
                task: task_index,
                epoch,
                mean_loss: (loss_sum / seen as f64) as f32,
                train_accuracy: correct as f32 / seen as f32,
            });
            if epoch == config.prune_epoch && !module.is_pruned() {
                let plan = build_pruning_plan(&module, config.prune_magnitude, epoch)?;
                apply_plan(&mut module, &plan)?;
                log.records.push(LogRecord::Pruned {
                    task: task_index,
                    epoch,
                    magnitude: config.prune_magnitude,
                    live_params: module.live_param_count(),
                    dense_params: module.dense_param_count(),
                });
            }
        }

        if module.is_pruned() && !module.is_compacted() {
            module = compact(&module)?;
        }
        module.freeze();
        self.classifier.freeze_task(task_index);
        log.records.push(LogRecord::Frozen { task: task_index, module: module_index, params: module.param_count() });
        if module_index == self.modules.len() {
            self.modules.push(module);
        } else {
            self.modules[module_index] = module;
        }
        self.centroids.push(c_new);
        self.tasks.push(TaskRecord { labels: classes, module: module_index, reuse });
        Ok(log)
    }
}

fn restrict(m: &Matrix, cols: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), cols.len());
    for r in 0..m.rows() {
        for (j, &c) in cols.iter().enumerate() {
            out.row_mut(r)[j] = m.row(r)[c];
        }
    }
    out
}

fn zero_grads(module: &mut AdaptationModule, classifier: &mut UnifiedClassifier) -> Result<()> {
    for p in module.params_mut()? {
        p.zero_grad();
    }
    classifier.weight.zero_grad();
    classifier.bias.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_zero_never_reuses() {
        let d = decide_reuse(&[vec![0.0, 0.0], vec![1.0, 1.0]], &[0.0, 0.0], 0.0).unwrap();
        assert!(!d.reused);
        assert_eq!(d.threshold, 0.0);
    }

    #[test]
    fn single_prior_arithmetic() {
        let d = decide_reuse(&[vec![0.0, 0.0]], &[1.0, 2.0], 2.0).unwrap();
        assert_eq!(d.d_min, 3.0);
        assert_eq!(d.mean_distance, 3.0);
        assert_eq!(d.threshold, 6.0);
        assert!(d.reused);
        assert_eq!(d.target_task, Some(0));
    }

    #[test]
    fn no_priors_means_new_module() {
        let d = decide_reuse(&[], &[1.0], 5.0).unwrap();
        assert!(!d.reused);
        assert_eq!(d.target_task, None);
    }

    #[test]
    fn reuse_ties_go_to_lowest_index() {
        let d = decide_reuse(&[vec![1.0], vec![-1.0], vec![10.0]], &[0.0], 1.0).unwrap();
        assert_eq!(d.target_task, Some(0));
        assert!(d.reused);
    }

    #[test]
    fn self_distillation_is_zero() {
        let m = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, -1.0]).unwrap();
        let (loss, grad) = distillation_loss(&m, &m, 2.0).unwrap();
        assert!(loss.abs() < 1e-7);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-7));
    }

    #[test]
    fn distillation_shape_mismatch_is_input_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(matches!(distillation_loss(&a, &b, 2.0), Err(crate::Error::Input(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { prune_magnitude: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { prune_epoch: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let late = TrainConfig { prune_epoch: 30, ..Default::default() };
        assert!(late.validate().is_ok());
        assert!(!late.prunes());
    }

    #[test]
    fn augmentation_without_shift_or_flip_is_identity() {
        // pad 0 leaves only the flip; flipping twice restores the input
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = augment_batch(&mut rng, &x, 0);
        assert!(y == x || y.data() == [3., 2., 1., 6., 5., 4.]);
    }
}
