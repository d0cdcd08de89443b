//! L1 channel saliency, per-layer pruning plans, masking and physical compaction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::AdaptationModule;
use crate::nn::Conv2d;

/// One non-negative importance score per output channel of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyScores {
    pub layer_id: String,
    pub scores: Vec<f32>,
}

impl SaliencyScores {
    /// Channel indices ordered from least to most salient; equal scores put the higher index first.
    pub fn pruning_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[a]
                .partial_cmp(&self.scores[b])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        });
        order
    }
}

/// `s_c = Σ |W_c^i|` over the full kernel of each output channel.
pub fn channel_saliency(layer_id: &str, weights: &[f32], shape: [usize; 4]) -> Result<SaliencyScores> {
    let [out, inp, kh, kw] = shape;
    let len = inp * kh * kw;
    if out == 0 || len == 0 || weights.is_empty() {
        bail!(Input, "layer '{layer_id}' has an empty weight block");
    }
    if weights.len() != out * len {
        bail!(Input, "layer '{layer_id}': {} weights for shape {:?}", weights.len(), shape);
    }
    let scores = weights
        .chunks_exact(len)
        .map(|w| w.iter().map(|v| libm::fabs(*v as f64)).sum::<f64>() as f32)
        .collect();
    Ok(SaliencyScores { layer_id: String::from(layer_id), scores })
}

pub fn conv_saliency(layer_id: &str, conv: &Conv2d) -> Result<SaliencyScores> {
    channel_saliency(layer_id, &conv.weight.value, conv.weight_shape())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub layer_id: String,
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn kept(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect()
    }

    pub fn dropped(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter_map(|(i, &k)| (!k).then_some(i)).collect()
    }
}

/// Keep/drop decisions for every prunable layer of a module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub magnitude: f32,
    pub created_at_epoch: usize,
    /// One mask per in-scope layer, in module order.
    pub layers: Vec<LayerMask>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PruningPlan {
    pub fn scope(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.layer_id.as_str()).collect()
    }

    pub fn mask(&self, layer_id: &str) -> Option<&LayerMask> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    pub fn is_all_keep(&self) -> bool {
        self.layers.iter().all(|l| l.keep.iter().all(|&k| k))
    }
}

/// Number of channels dropped from a layer of `channels` outputs.
pub fn drop_count(magnitude: f32, channels: usize) -> usize {
    libm::floor(magnitude as f64 * channels as f64 + 1e-9) as usize
}

/// Ranks each internal layer independently and drops the `⌊magnitude·C⌋` least salient channels.
///
/// Block-output convolutions and downsample projections feed residual additions and stay whole.
pub fn build_pruning_plan(module: &AdaptationModule, magnitude: f32, epoch: usize) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&magnitude) {
        bail!(Config, "pruning magnitude must lie in [0, 1), got {magnitude}");
    }
    if module.is_pruned() {
        bail!(State, "module {} already carries a pruning plan", module.task_id);
    }
    let stage = module.stage();
    let name = stage.name();
    let mut layers = Vec::new();
    let mut warnings = Vec::new();
    for (b, block) in stage.blocks.iter().enumerate() {
        for i in 0..block.internal_layers() {
            let layer_id = format!("{name}.{b}.conv{}", i + 1);
            let scores = conv_saliency(&layer_id, &block.convs[i])?;
            let channels = scores.scores.len();
            let mut n_drop = drop_count(magnitude, channels);
            if n_drop >= channels {
                n_drop = channels - 1;
                warnings.push(format!("{layer_id}: magnitude {magnitude} would remove every channel; keeping 1"));
            }
            let mut keep = alloc::vec![true; channels];
            for &c in scores.pruning_order().iter().take(n_drop) {
                keep[c] = false;
            }
            layers.push(LayerMask { layer_id, keep });
        }
    }
    Ok(PruningPlan { magnitude, created_at_epoch: epoch, layers, warnings })
}

fn check_scope(module: &AdaptationModule, plan: &PruningPlan) -> Result<()> {
    let expected = module.prunable_layers();
    if expected.len() != plan.layers.len() {
        bail!(Structural, "plan covers {} layers, module has {} prunable layers", plan.layers.len(), expected.len());
    }
    for ((id, width), mask) in expected.iter().zip(&plan.layers) {
        if *id != mask.layer_id || *width != mask.keep.len() {
            bail!(
                Structural,
                "plan layer '{}' ({} channels) does not match module layer '{}' ({} channels)",
                mask.layer_id,
                mask.keep.len(),
                id,
                width
            );
        }
    }
    Ok(())
}

/// Attaches the plan as channel masks and zeroes every dropped weight.
pub fn apply_plan(module: &mut AdaptationModule, plan: &PruningPlan) -> Result<()> {
    if module.is_compacted() {
        bail!(State, "module {} is already compacted", module.task_id);
    }
    check_scope(module, plan)?;
    let (stage, slot, _) = module.parts_mut();
    let mut masks = plan.layers.iter();
    for block in &mut stage.blocks {
        for i in 0..block.internal_layers() {
            let mask = masks.next().expect("scope checked");
            block.keep[i] = Some(mask.keep.clone());
        }
    }
    *slot = Some(plan.clone());
    module.enforce_mask();
    Ok(())
}

/// Physically removes masked channels; downstream input dimensions shrink to match.
pub fn compact(module: &AdaptationModule) -> Result<AdaptationModule> {
    if module.plan().is_none() {
        bail!(State, "module {} has no pruning mask to compact", module.task_id);
    }
    let mut out = module.clone();
    let dense = module.dense_param_count();
    let (stage, _, compacted) = out.parts_mut();
    for block in &mut stage.blocks {
        for i in 0..block.internal_layers() {
            let Some(keep) = block.keep[i].take() else { continue };
            let kept: Vec<usize> = keep.iter().enumerate().filter_map(|(c, &k)| k.then_some(c)).collect();
            block.convs[i] = block.convs[i].select_outputs(&kept);
            block.norms[i] = block.norms[i].select(&kept);
            block.convs[i + 1] = block.convs[i + 1].select_inputs(&kept);
        }
    }
    *compacted = true;
    out.set_dense_param_count(dense);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneVariant};
    use crate::model::split_backbone;
    use crate::tensor::Tensor;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn template() -> AdaptationModule {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        split_backbone(Backbone::new(&mut rng, BackboneVariant::Tiny.arch())).unwrap().1
    }

    fn features(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([n, 64, 4, 4], (0..n * 64 * 16).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_channel_scores_zero() {
        let mut w = vec![1.0f32; 2 * 3 * 3 * 3];
        w[27..].iter_mut().for_each(|v| *v = 0.0);
        let s = channel_saliency("l", &w, [2, 3, 3, 3]).unwrap();
        assert_eq!(s.scores, vec![27.0, 0.0]);
    }

    #[test]
    fn empty_block_is_input_error() {
        assert!(matches!(channel_saliency("l", &[], [0, 3, 3, 3]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn sort_and_cut_example() {
        let s = SaliencyScores { layer_id: "x".into(), scores: vec![4.0, 1.0, 3.0, 2.0] };
        let order = s.pruning_order();
        let dropped: Vec<usize> = order.iter().take(drop_count(0.5, 4)).copied().collect();
        let mut d = dropped.clone();
        d.sort();
        assert_eq!(d, vec![1, 3]);
    }

    #[test]
    fn ties_keep_lower_index() {
        let s = SaliencyScores { layer_id: "x".into(), scores: vec![1.0, 1.0, 1.0, 5.0] };
        assert_eq!(&s.pruning_order()[..2], &[2, 1]);
    }

    #[test]
    fn magnitude_out_of_range_is_config_error() {
        let m = template();
        assert!(matches!(build_pruning_plan(&m, 1.0, 1), Err(crate::Error::Config(_))));
        assert!(matches!(build_pruning_plan(&m, -0.1, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn extreme_magnitude_clamps_to_one_channel() {
        let m = template();
        let plan = build_pruning_plan(&m, 0.999, 1).unwrap();
        for l in &plan.layers {
            assert_eq!(l.kept().len(), 1);
        }
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let mut m = template();
        let x = features(3, 1);
        let before = m.forward(&x).unwrap();
        let plan = build_pruning_plan(&m, 0.0, 1).unwrap();
        assert!(plan.is_all_keep());
        apply_plan(&mut m, &plan).unwrap();
        assert_eq!(m.forward(&x).unwrap(), before);
        let c = compact(&m).unwrap();
        assert_eq!(c.param_count(), m.param_count());
        assert_eq!(c.forward(&x).unwrap(), before);
    }

    #[test]
    fn scope_mismatch_is_structural() {
        let mut m = template();
        let mut plan = build_pruning_plan(&m, 0.5, 1).unwrap();
        plan.layers[0].layer_id = "layer4.9.conv1".into();
        assert!(matches!(apply_plan(&mut m, &plan), Err(crate::Error::Structural(_))));
        let mut plan = build_pruning_plan(&m, 0.5, 1).unwrap();
        plan.layers[0].keep.pop();
        assert!(matches!(apply_plan(&mut m, &plan), Err(crate::Error::Structural(_))));
    }

    #[test]
    fn masked_forward_matches_sliced_oracle() {
        let mut m = template();
        let plan = build_pruning_plan(&m, 0.75, 1).unwrap();
        apply_plan(&mut m, &plan).unwrap();
        // Oracle: rebuild the block by hand with the dropped channels physically sliced out.
        let kept = plan.layers[0].kept();
        let block = &m.stage().blocks[0];
        let c1 = block.convs[0].select_outputs(&kept);
        let b1 = block.norms[0].select(&kept);
        let c2 = block.convs[1].select_inputs(&kept);
        let x = features(4, 9);
        let mut h = b1.forward(&c1.forward(&x).unwrap()).unwrap();
        crate::nn::relu_inplace(&mut h);
        let mut h = block.norms[1].forward(&c2.forward(&h).unwrap()).unwrap();
        let (ds, dbn) = block.downsample.as_ref().unwrap();
        h.add_assign(&dbn.forward(&ds.forward(&x).unwrap()).unwrap());
        crate::nn::relu_inplace(&mut h);
        let masked = block.forward(&x).unwrap();
        for (a, b) in masked.data().iter().zip(h.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn compacted_count_equals_live_count() {
        let mut m = template();
        let plan = build_pruning_plan(&m, 0.96, 1).unwrap();
        apply_plan(&mut m, &plan).unwrap();
        let c = compact(&m).unwrap();
        assert_eq!(c.param_count(), m.live_param_count());
        assert!(c.param_count() < m.param_count());
        assert_eq!(c.dense_param_count(), m.dense_param_count());
    }
}
