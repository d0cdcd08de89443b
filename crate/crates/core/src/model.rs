//! Backbone split, per-task adaptation modules, the unified classifier and the composed forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ArchSpec, Backbone, Stage, Stem, TensorMut, TensorRef};
use crate::error::{bail, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, Param};
use crate::pruning::PruningPlan;
use crate::tensor::{Matrix, Tensor};

/// Frozen stem plus the first three residual stages.
///
/// Always runs normalisation with its stored statistics; there is no way to
/// obtain mutable access once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedExtractor {
    arch: ArchSpec,
    stem: Stem,
    stages: Vec<Stage>,
}

impl SharedExtractor {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    /// Feature-map shape for one input sample.
    pub fn output_shape(&self) -> [usize; 3] {
        let [_, h, w] = self.arch.input;
        let (mut h, mut w) = self.stem.conv.output_hw(h, w);
        if let Some(p) = &self.stem.pool {
            (h, w) = p.output_hw(h, w);
        }
        for s in &self.stages {
            for b in &s.blocks {
                let stride = b.convs.iter().map(|c| c.stride).max().unwrap_or(1);
                h = (h - 1) / stride + 1;
                w = (w - 1) / stride + 1;
            }
        }
        [self.stages[2].out_channels(), h, w]
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count() + self.stages.iter().map(Stage::param_count).sum::<usize>()
    }

    /// `Φ(x)` for every sample in the batch.
    pub fn extract(&self, batch: &Tensor) -> Result<Tensor> {
        let [_, c, h, w] = batch.shape();
        if [c, h, w] != self.arch.input {
            bail!(Input, "batch sample shape {:?} does not match extractor input {:?}", [c, h, w], self.arch.input);
        }
        let mut x = self.stem.forward(batch)?;
        for s in &self.stages {
            x = s.forward(&x)?;
        }
        Ok(x)
    }

    /// Globally pooled extractor features, one row per sample.
    pub fn pooled(&self, batch: &Tensor) -> Result<Matrix> {
        Ok(global_avg_pool(&self.extract(batch)?))
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.stem.tensors(&mut out);
        for s in &self.stages {
            s.tensors(&mut out);
        }
        out
    }
}

/// Splits a pre-trained backbone into the shared extractor and the last-stage template.
pub fn split_backbone(backbone: Backbone) -> Result<(SharedExtractor, AdaptationModule)> {
    let Backbone { arch, stem, mut stages } = backbone;
    if stages.len() != 4 {
        bail!(Structural, "backbone has {} stages, expected 4", stages.len());
    }
    let last = stages.pop().expect("four stages");
    let template = AdaptationModule::from_stage(0, last);
    Ok((SharedExtractor { arch, stem, stages }, template))
}

/// A per-task copy of the final residual stage, optionally masked and/or compacted.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationModule {
    pub task_id: usize,
    stage: Stage,
    plan: Option<PruningPlan>,
    frozen: bool,
    compacted: bool,
    dense_params: usize,
}

impl AdaptationModule {
    pub fn from_stage(task_id: usize, stage: Stage) -> Self {
        let dense_params = stage.param_count();
        AdaptationModule { task_id, stage, plan: None, frozen: false, compacted: false, dense_params }
    }

    pub fn stage(&self) -> &Stage {
        &self.stage
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Stage, &mut Option<PruningPlan>, &mut bool) {
        (&mut self.stage, &mut self.plan, &mut self.compacted)
    }

    pub fn plan(&self) -> Option<&PruningPlan> {
        self.plan.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_compacted(&self) -> bool {
        self.compacted
    }

    /// True once a pruning plan has been applied (masked or compacted form).
    pub fn is_pruned(&self) -> bool {
        self.plan.is_some()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.stage.clear_cache();
        for p in self.stage.params_mut() {
            p.release_grad();
        }
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn in_channels(&self) -> usize {
        self.stage.blocks[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.stage.out_channels()
    }

    /// Physical parameter count of the stored tensors.
    pub fn param_count(&self) -> usize {
        self.stage.param_count()
    }

    /// Parameters not removed by the mask.
    pub fn live_param_count(&self) -> usize {
        self.stage.blocks.iter().map(|b| b.live_param_count()).sum()
    }

    /// Parameter count of the unpruned template this module came from.
    pub fn dense_param_count(&self) -> usize {
        self.dense_params
    }

    pub(crate) fn set_dense_param_count(&mut self, n: usize) {
        self.dense_params = n;
    }

    /// Layer ids of the internal (prunable) convolutions, with their output widths.
    pub fn prunable_layers(&self) -> Vec<(String, usize)> {
        let name = self.stage.name();
        let mut out = Vec::new();
        for (b, block) in self.stage.blocks.iter().enumerate() {
            for i in 0..block.internal_layers() {
                out.push((format!("{name}.{b}.conv{}", i + 1), block.convs[i].out_channels));
            }
        }
        out
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        if features.channels() != self.in_channels() {
            bail!(Structural, "module expects {} channels, extractor produced {}", self.in_channels(), features.channels());
        }
        self.stage.forward(features)
    }

    /// Pooled embedding `S_b(Φ(x))`.
    pub fn embed(&self, features: &Tensor) -> Result<Matrix> {
        Ok(global_avg_pool(&self.forward(features)?))
    }

    pub fn forward_train(&mut self, features: &Tensor) -> Result<Tensor> {
        if self.frozen {
            bail!(State, "module {} is frozen", self.task_id);
        }
        if features.channels() != self.in_channels() {
            bail!(Structural, "module expects {} channels, extractor produced {}", self.in_channels(), features.channels());
        }
        self.stage.forward_train(features)
    }

    /// Backpropagates to the module parameters; the extractor receives no gradient.
    pub fn backward(&mut self, grad: &Tensor) -> Result<()> {
        if self.frozen {
            bail!(State, "module {} is frozen", self.task_id);
        }
        self.stage.backward(grad, false)?;
        self.suppress_masked_grads();
        Ok(())
    }

    pub fn params_mut(&mut self) -> Result<Vec<&mut Param>> {
        if self.frozen {
            bail!(State, "module {} is frozen", self.task_id);
        }
        Ok(self.stage.params_mut())
    }

    /// Zeroes every weight belonging to a dropped channel.
    pub fn enforce_mask(&mut self) {
        for block in &mut self.stage.blocks {
            for i in 0..block.internal_layers() {
                let Some(keep) = block.keep[i].clone() else { continue };
                let len = block.convs[i].filter_len();
                let kk = block.convs[i + 1].kernel * block.convs[i + 1].kernel;
                let next_in = block.convs[i + 1].in_channels;
                for (c, &k) in keep.iter().enumerate() {
                    if k {
                        continue;
                    }
                    block.convs[i].weight.value[c * len..(c + 1) * len].iter_mut().for_each(|w| *w = 0.0);
                    let bn = &mut block.norms[i];
                    bn.gamma.value[c] = 0.0;
                    bn.beta.value[c] = 0.0;
                    bn.running_mean[c] = 0.0;
                    bn.running_var[c] = 1.0;
                    let next_out = block.convs[i + 1].out_channels;
                    let next = &mut block.convs[i + 1].weight.value;
                    for o in 0..next_out {
                        let start = (o * next_in + c) * kk;
                        next[start..start + kk].iter_mut().for_each(|w| *w = 0.0);
                    }
                }
            }
        }
    }

    fn suppress_masked_grads(&mut self) {
        for block in &mut self.stage.blocks {
            for i in 0..block.internal_layers() {
                let Some(keep) = block.keep[i].clone() else { continue };
                let len = block.convs[i].filter_len();
                let kk = block.convs[i + 1].kernel * block.convs[i + 1].kernel;
                let next_in = block.convs[i + 1].in_channels;
                let next_out = block.convs[i + 1].out_channels;
                for (c, &k) in keep.iter().enumerate() {
                    if k {
                        continue;
                    }
                    block.convs[i].weight.grad_mut()[c * len..(c + 1) * len].iter_mut().for_each(|g| *g = 0.0);
                    block.norms[i].gamma.grad_mut()[c] = 0.0;
                    block.norms[i].beta.grad_mut()[c] = 0.0;
                    let next = block.convs[i + 1].weight.grad_mut();
                    for o in 0..next_out {
                        let start = (o * next_in + c) * kk;
                        next[start..start + kk].iter_mut().for_each(|g| *g = 0.0);
                    }
                }
            }
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.stage.tensors(&mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.stage.tensors_mut(&mut out);
        out
    }
}

/// How a new module is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// Copy of the pre-trained last stage.
    #[default]
    Pretrained,
    /// Copy of the most similar earlier task's trained module, mask included.
    Relevant,
}

/// Creates the module for task `task_id` from the template or a donor.
pub fn instantiate_module(
    template: &AdaptationModule,
    strategy: InitStrategy,
    donor: Option<&AdaptationModule>,
    task_id: usize,
) -> Result<AdaptationModule> {
    let mut module = match strategy {
        InitStrategy::Pretrained => template.clone(),
        InitStrategy::Relevant => {
            let Some(donor) = donor else {
                bail!(Config, "relevant initialisation needs a donor module");
            };
            if !donor.is_frozen() {
                bail!(Config, "donor module {} is still trainable", donor.task_id);
            }
            donor.clone()
        }
    };
    module.task_id = task_id;
    module.frozen = false;
    Ok(module)
}

/// Linear head over the cumulative label space; rows are append-only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedClassifier {
    dim: usize,
    pub weight: Param,
    pub bias: Param,
    labels: Vec<u32>,
    row_task: Vec<usize>,
    trainable: Vec<bool>,
}

impl UnifiedClassifier {
    pub fn new(dim: usize) -> Self {
        UnifiedClassifier {
            dim,
            weight: Param::new(Vec::new()),
            bias: Param::new(Vec::new()),
            labels: Vec::new(),
            row_task: Vec::new(),
            trainable: Vec::new(),
        }
    }

    /// Rebuilds a classifier from stored rows.
    pub fn from_parts(
        dim: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
        labels: Vec<u32>,
        row_task: Vec<usize>,
        trainable: Vec<bool>,
    ) -> Result<Self> {
        let rows = labels.len();
        if weight.len() != rows * dim || bias.len() != rows || row_task.len() != rows || trainable.len() != rows {
            bail!(Structural, "classifier parts disagree on row count {rows}");
        }
        Ok(UnifiedClassifier { dim, weight: Param::new(weight), bias: Param::new(bias), labels, row_task, trainable })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    /// Dataset class id of each row.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row_task(&self) -> &[usize] {
        &self.row_task
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn row_of(&self, label: u32) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn row(&self, r: usize) -> (&[f32], f32) {
        (&self.weight.value[r * self.dim..(r + 1) * self.dim], self.bias.value[r])
    }

    /// Appends one trainable row per new label, fan-in uniform weights and zero bias.
    pub fn expand<R: Rng + ?Sized>(&mut self, rng: &mut R, new_labels: &[u32], task_id: usize) -> Result<()> {
        if new_labels.is_empty() {
            bail!(Config, "classifier expansion needs at least one new class");
        }
        if let Some(dup) = new_labels.iter().find(|l| self.labels.contains(l)) {
            bail!(Protocol, "class {dup} already has a classifier row");
        }
        let bound = 1.0 / libm::sqrtf(self.dim as f32);
        for &label in new_labels {
            for _ in 0..self.dim {
                self.weight.value.push(rng.gen_range(-bound..bound));
            }
            self.bias.value.push(0.0);
            self.labels.push(label);
            self.row_task.push(task_id);
            self.trainable.push(true);
        }
        self.weight.release_grad();
        self.bias.release_grad();
        Ok(())
    }

    /// Marks every row owned by `task_id` immutable.
    pub fn freeze_task(&mut self, task_id: usize) {
        for (t, flag) in self.row_task.iter().zip(self.trainable.iter_mut()) {
            if *t == task_id {
                *flag = false;
            }
        }
        self.weight.release_grad();
        self.bias.release_grad();
    }

    pub fn logits(&self, embeddings: &Matrix) -> Result<Matrix> {
        if embeddings.cols() != self.dim {
            bail!(Structural, "classifier dim {} does not match embedding dim {}", self.dim, embeddings.cols());
        }
        let rows = self.rows();
        let mut out = Matrix::zeros(embeddings.rows(), rows);
        for i in 0..embeddings.rows() {
            let e = embeddings.row(i);
            let o = out.row_mut(i);
            for (r, slot) in o.iter_mut().enumerate() {
                let w = &self.weight.value[r * self.dim..(r + 1) * self.dim];
                *slot = w.iter().zip(e).map(|(a, b)| a * b).sum::<f32>() + self.bias.value[r];
            }
        }
        Ok(out)
    }

    /// Accumulates gradients into trainable rows and returns the embedding gradient.
    pub fn backward(&mut self, embeddings: &Matrix, grad_logits: &Matrix) -> Matrix {
        let (n, rows, dim) = (embeddings.rows(), self.rows(), self.dim);
        let mut grad_e = Matrix::zeros(n, dim);
        let weight = &self.weight.value;
        for i in 0..n {
            let g = grad_logits.row(i);
            let ge = grad_e.row_mut(i);
            for r in 0..rows {
                let w = &weight[r * dim..(r + 1) * dim];
                for (d, wv) in ge.iter_mut().zip(w) {
                    *d += g[r] * wv;
                }
            }
        }
        let trainable = self.trainable.clone();
        let gw = self.weight.grad_mut();
        for i in 0..n {
            let g = grad_logits.row(i);
            let e = embeddings.row(i);
            for r in (0..rows).filter(|&r| trainable[r]) {
                for (d, ev) in gw[r * dim..(r + 1) * dim].iter_mut().zip(e) {
                    *d += g[r] * ev;
                }
            }
        }
        let gb = self.bias.grad_mut();
        for i in 0..n {
            let g = grad_logits.row(i);
            for r in (0..rows).filter(|&r| trainable[r]) {
                gb[r] += g[r];
            }
        }
        grad_e
    }

    /// Parameters in trainable rows.
    pub fn trainable_param_count(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count() * (self.dim + 1)
    }

    pub fn param_count(&self) -> usize {
        self.rows() * (self.dim + 1)
    }
}

/// `W^T S_b(Φ(x))` over the whole cumulative label space.
pub fn forward_task(
    extractor: &SharedExtractor,
    module: &AdaptationModule,
    classifier: &UnifiedClassifier,
    batch: &Tensor,
) -> Result<Matrix> {
    let features = extractor.extract(batch)?;
    let emb = module.embed(&features)?;
    classifier.logits(&emb)
}

/// Logits from precomputed extractor features.
pub fn module_logits(module: &AdaptationModule, classifier: &UnifiedClassifier, features: &Tensor) -> Result<Matrix> {
    classifier.logits(&module.embed(features)?)
}

/// Training-mode forward of module + classifier, keeping the pooled embedding for backward.
pub(crate) fn train_forward(
    module: &mut AdaptationModule,
    classifier: &UnifiedClassifier,
    features: &Tensor,
) -> Result<(Matrix, Matrix, [usize; 4])> {
    let out = module.forward_train(features)?;
    let shape = out.shape();
    let emb = global_avg_pool(&out);
    let logits = classifier.logits(&emb)?;
    Ok((logits, emb, shape))
}

pub(crate) fn train_backward(
    module: &mut AdaptationModule,
    classifier: &mut UnifiedClassifier,
    emb: &Matrix,
    out_shape: [usize; 4],
    grad_logits: &Matrix,
) -> Result<()> {
    let grad_emb = classifier.backward(emb, grad_logits);
    let grad_out = global_avg_pool_backward(&grad_emb, out_shape);
    module.backward(&grad_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountingMode {
    /// Every module counted at its dense (unpruned) size.
    MaskedLogical,
    /// Modules counted by the parameters they physically keep after compaction.
    CompactedPhysical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable_per_task: usize,
    pub total: usize,
    pub extractor: usize,
    pub modules: usize,
    pub classifier: usize,
    pub mode: CountingMode,
}

/// Parameter accounting over a set of modules sharing one extractor and classifier.
///
/// `trainable_per_task` is the most recent module plus the classifier rows of its task.
pub fn count_parameters(
    extractor: &SharedExtractor,
    modules: &[AdaptationModule],
    classifier: &UnifiedClassifier,
    mode: CountingMode,
) -> Result<ParamReport> {
    let Some(last) = modules.last() else {
        bail!(State, "parameter report needs at least one module");
    };
    let module_size = |m: &AdaptationModule| match mode {
        CountingMode::MaskedLogical => m.dense_param_count(),
        CountingMode::CompactedPhysical => m.live_param_count(),
    };
    let extractor_n = extractor.param_count();
    let modules_n: usize = modules.iter().map(module_size).sum();
    let classifier_n = classifier.param_count();
    let last_rows = classifier.row_task().iter().filter(|&&t| t == last.task_id).count();
    Ok(ParamReport {
        trainable_per_task: module_size(last) + last_rows * (classifier.dim() + 1),
        total: extractor_n + modules_n + classifier_n,
        extractor: extractor_n,
        modules: modules_n,
        classifier: classifier_n,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (SharedExtractor, AdaptationModule) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        split_backbone(Backbone::new(&mut rng, BackboneVariant::Tiny.arch())).unwrap()
    }

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec([n, 3, 32, 32], data).unwrap()
    }

    #[test]
    fn extractor_output_shape_matches_actual_features() {
        let (ext, _) = tiny();
        let out = ext.extract(&random_batch(2, 1)).unwrap();
        let [c, h, w] = ext.output_shape();
        assert_eq!(out.shape(), [2, c, h, w]);
        assert_eq!(out.shape(), [2, 64, 4, 4]);
    }

    #[test]
    fn zero_image_gives_finite_features_and_is_deterministic() {
        let (ext, _) = tiny();
        let zero = Tensor::zeros([2, 3, 32, 32]);
        assert!(ext.extract(&zero).unwrap().is_finite());
        let b = random_batch(3, 2);
        assert_eq!(ext.extract(&b).unwrap(), ext.extract(&b).unwrap());
    }

    #[test]
    fn wrong_spatial_dims_is_input_error() {
        let (ext, _) = tiny();
        let err = ext.extract(&Tensor::zeros([1, 3, 28, 28])).unwrap_err();
        assert!(matches!(err, crate::Error::Input(_)));
    }

    #[test]
    fn instantiate_copies_template_or_donor() {
        let (_, template) = tiny();
        let m = instantiate_module(&template, InitStrategy::Pretrained, None, 3).unwrap();
        assert_eq!(m.stage(), template.stage());
        assert_eq!(m.task_id, 3);
        assert!(!m.is_frozen());

        let err = instantiate_module(&template, InitStrategy::Relevant, None, 1).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));

        let mut donor = m.clone();
        let plan = crate::pruning::build_pruning_plan(&donor, 0.5, 1).unwrap();
        crate::pruning::apply_plan(&mut donor, &plan).unwrap();
        donor.freeze();
        let r = instantiate_module(&template, InitStrategy::Relevant, Some(&donor), 4).unwrap();
        assert_eq!(r.stage(), donor.stage());
        assert_eq!(r.plan(), donor.plan());
        assert_eq!(r.task_id, 4);
    }

    #[test]
    fn classifier_expansion_is_append_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cls = UnifiedClassifier::new(8);
        cls.expand(&mut rng, &[0, 1, 2, 3, 4], 1).unwrap();
        assert_eq!(cls.rows(), 5);
        assert!(cls.trainable().iter().all(|&t| t));
        cls.expand(&mut rng, &[5, 6, 7, 8, 9], 2).unwrap();
        cls.freeze_task(1);
        cls.freeze_task(2);
        let before = cls.clone();
        cls.expand(&mut rng, &[10, 11, 12, 13, 14], 3).unwrap();
        assert_eq!(cls.rows(), 15);
        assert_eq!(&cls.weight.value[..10 * 8], &before.weight.value[..]);
        assert_eq!(&cls.trainable()[..10], before.trainable());
        assert!(cls.trainable()[10..].iter().all(|&t| t));
        assert!(cls.bias.value[10..].iter().all(|&b| b == 0.0));
        assert!(matches!(cls.expand(&mut rng, &[], 4), Err(crate::Error::Config(_))));
    }

    #[test]
    fn forward_task_shape_and_softmax_rows() {
        let (ext, template) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cls = UnifiedClassifier::new(template.out_channels());
        cls.expand(&mut rng, &(0..10).collect::<Vec<_>>(), 1).unwrap();
        let batch = random_batch(6, 5);
        let logits = forward_task(&ext, &template, &cls, &batch).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (6, 10));
        let p = crate::nn::softmax_rows(&logits);
        for r in 0..6 {
            assert!((p.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        cls.expand(&mut rng, &(10..15).collect::<Vec<_>>(), 2).unwrap();
        assert_eq!(forward_task(&ext, &template, &cls, &batch).unwrap().cols(), 15);
    }

    #[test]
    fn classifier_dim_mismatch_is_structural() {
        let (ext, template) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cls = UnifiedClassifier::new(7);
        cls.expand(&mut rng, &[0], 1).unwrap();
        let err = forward_task(&ext, &template, &cls, &random_batch(1, 1)).unwrap_err();
        assert!(matches!(err, crate::Error::Structural(_)));
    }
}
