//! Residual backbones: architecture descriptions, blocks, stages and named tensor access.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::nn::{relu_backward_inplace, relu_inplace, BatchNorm2d, Conv2d, MaxPool2d, Param};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (x4).
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Full description of a residual network family member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub block: BlockKind,
    pub layers: [usize; 4],
    pub widths: [usize; 4],
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    /// Expected input `C x H x W`.
    pub input: [usize; 3],
}

impl ArchSpec {
    pub fn stage_out_channels(&self, stage: usize) -> usize {
        self.widths[stage] * self.block.expansion()
    }

    /// Dimension of the pooled embedding fed to the classifier.
    pub fn embedding_dim(&self) -> usize {
        self.stage_out_channels(3)
    }
}

/// Named backbone variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneVariant {
    /// Desk-scale residual net: one basic block per stage, widths 16..128, 32x32 input.
    #[serde(rename = "rn-tiny")]
    Tiny,
    #[serde(rename = "rn18")]
    Rn18,
    #[serde(rename = "rn34")]
    Rn34,
    #[serde(rename = "rn50")]
    Rn50,
    #[serde(rename = "rn101")]
    Rn101,
    #[serde(rename = "rn152")]
    Rn152,
}

impl BackboneVariant {
    pub const ALL: [BackboneVariant; 6] = [
        BackboneVariant::Tiny,
        BackboneVariant::Rn18,
        BackboneVariant::Rn34,
        BackboneVariant::Rn50,
        BackboneVariant::Rn101,
        BackboneVariant::Rn152,
    ];

    pub fn id(self) -> &'static str {
        match self {
            BackboneVariant::Tiny => "rn-tiny",
            BackboneVariant::Rn18 => "rn18",
            BackboneVariant::Rn34 => "rn34",
            BackboneVariant::Rn50 => "rn50",
            BackboneVariant::Rn101 => "rn101",
            BackboneVariant::Rn152 => "rn152",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.id() == id)
            .ok_or_else(|| Error::Config(format!("unknown backbone variant '{id}'")))
    }

    pub fn arch(self) -> ArchSpec {
        let imagenet = |block, layers| ArchSpec {
            name: String::from(self.id()),
            block,
            layers,
            widths: [64, 128, 256, 512],
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            input: [3, 224, 224],
        };
        match self {
            BackboneVariant::Tiny => ArchSpec {
                name: String::from("rn-tiny"),
                block: BlockKind::Basic,
                layers: [1, 1, 1, 1],
                widths: [16, 32, 64, 128],
                stem_channels: 16,
                stem_kernel: 3,
                stem_stride: 1,
                stem_pool: true,
                input: [3, 32, 32],
            },
            BackboneVariant::Rn18 => imagenet(BlockKind::Basic, [2, 2, 2, 2]),
            BackboneVariant::Rn34 => imagenet(BlockKind::Basic, [3, 4, 6, 3]),
            BackboneVariant::Rn50 => imagenet(BlockKind::Bottleneck, [3, 4, 6, 3]),
            BackboneVariant::Rn101 => imagenet(BlockKind::Bottleneck, [3, 4, 23, 3]),
            BackboneVariant::Rn152 => imagenet(BlockKind::Bottleneck, [3, 8, 36, 3]),
        }
    }
}

/// Read-only view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

/// Mutable view of one named tensor.
pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut Vec<f32>,
}

fn conv_shape(c: &Conv2d) -> Vec<usize> {
    c.weight_shape().to_vec()
}

fn push_conv<'a>(out: &mut Vec<TensorRef<'a>>, prefix: &str, c: &'a Conv2d) {
    out.push(TensorRef { name: format!("{prefix}.weight"), shape: conv_shape(c), data: &c.weight.value });
}

fn push_bn<'a>(out: &mut Vec<TensorRef<'a>>, prefix: &str, bn: &'a BatchNorm2d) {
    let shape = vec![bn.channels()];
    out.push(TensorRef { name: format!("{prefix}.weight"), shape: shape.clone(), data: &bn.gamma.value });
    out.push(TensorRef { name: format!("{prefix}.bias"), shape: shape.clone(), data: &bn.beta.value });
    out.push(TensorRef { name: format!("{prefix}.running_mean"), shape: shape.clone(), data: &bn.running_mean });
    out.push(TensorRef { name: format!("{prefix}.running_var"), shape, data: &bn.running_var });
}

fn push_conv_mut<'a>(out: &mut Vec<TensorMut<'a>>, prefix: &str, c: &'a mut Conv2d) {
    let shape = conv_shape(c);
    out.push(TensorMut { name: format!("{prefix}.weight"), shape, data: &mut c.weight.value });
}

fn push_bn_mut<'a>(out: &mut Vec<TensorMut<'a>>, prefix: &str, bn: &'a mut BatchNorm2d) {
    let shape = vec![bn.channels()];
    out.push(TensorMut { name: format!("{prefix}.weight"), shape: shape.clone(), data: &mut bn.gamma.value });
    out.push(TensorMut { name: format!("{prefix}.bias"), shape: shape.clone(), data: &mut bn.beta.value });
    out.push(TensorMut { name: format!("{prefix}.running_mean"), shape: shape.clone(), data: &mut bn.running_mean });
    out.push(TensorMut { name: format!("{prefix}.running_var"), shape, data: &mut bn.running_var });
}

/// One residual block. Layers `0..n-1` are internal (prunable); the last conv writes the block output.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub kind: BlockKind,
    pub convs: Vec<Conv2d>,
    pub norms: Vec<BatchNorm2d>,
    pub downsample: Option<(Conv2d, BatchNorm2d)>,
    /// Keep-masks over the output channels of each internal layer.
    pub keep: Vec<Option<Vec<bool>>>,
    cached_acts: Vec<Tensor>,
    cached_out: Option<Tensor>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, kind: BlockKind, in_ch: usize, width: usize, stride: usize) -> Self {
        let out_ch = width * kind.expansion();
        let (convs, norms) = match kind {
            BlockKind::Basic => (
                vec![
                    Conv2d::kaiming(rng, in_ch, width, 3, stride, 1),
                    Conv2d::kaiming(rng, width, width, 3, 1, 1),
                ],
                vec![BatchNorm2d::new(width), BatchNorm2d::new(width)],
            ),
            BlockKind::Bottleneck => (
                vec![
                    Conv2d::kaiming(rng, in_ch, width, 1, 1, 0),
                    Conv2d::kaiming(rng, width, width, 3, stride, 1),
                    Conv2d::kaiming(rng, width, out_ch, 1, 1, 0),
                ],
                vec![BatchNorm2d::new(width), BatchNorm2d::new(width), BatchNorm2d::new(out_ch)],
            ),
        };
        let downsample = (stride != 1 || in_ch != out_ch)
            .then(|| (Conv2d::kaiming(rng, in_ch, out_ch, 1, stride, 0), BatchNorm2d::new(out_ch)));
        let internal = convs.len() - 1;
        ResidualBlock {
            kind,
            convs,
            norms,
            downsample,
            keep: vec![None; internal],
            cached_acts: Vec::new(),
            cached_out: None,
        }
    }

    pub fn internal_layers(&self) -> usize {
        self.convs.len() - 1
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.convs[self.convs.len() - 1].out_channels
    }

    fn zero_dropped(&self, layer: usize, x: &mut Tensor) {
        let Some(keep) = &self.keep[layer] else { return };
        let (n, c, hw) = (x.batch(), x.channels(), x.plane());
        for i in 0..n {
            for (ch, &k) in keep.iter().enumerate() {
                if !k {
                    let start = (i * c + ch) * hw;
                    x.data_mut()[start..start + hw].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.convs.len() - 1;
        let mut h = x.clone();
        for i in 0..=last {
            h = self.norms[i].forward(&self.convs[i].forward(&h)?)?;
            if i < last {
                self.zero_dropped(i, &mut h);
                relu_inplace(&mut h);
            }
        }
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        if identity.shape() != h.shape() {
            bail!(Structural, "residual shapes differ: {:?} vs {:?}", identity.shape(), h.shape());
        }
        h.add_assign(&identity);
        relu_inplace(&mut h);
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let last = self.convs.len() - 1;
        self.cached_acts.clear();
        let mut h = x.clone();
        for i in 0..=last {
            let z = self.convs[i].forward_train(&h)?;
            h = self.norms[i].forward_train(&z)?;
            if i < last {
                self.zero_dropped(i, &mut h);
                relu_inplace(&mut h);
                self.cached_acts.push(h.clone());
            }
        }
        let identity = match &mut self.downsample {
            Some((conv, bn)) => {
                let z = conv.forward_train(x)?;
                bn.forward_train(&z)?
            }
            None => x.clone(),
        };
        if identity.shape() != h.shape() {
            bail!(Structural, "residual shapes differ: {:?} vs {:?}", identity.shape(), h.shape());
        }
        h.add_assign(&identity);
        relu_inplace(&mut h);
        self.cached_out = Some(h.clone());
        Ok(h)
    }

    pub fn backward(&mut self, grad_out: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let Some(out) = self.cached_out.take() else {
            bail!(State, "block backward called without a cached forward pass");
        };
        let mut g = grad_out.clone();
        relu_backward_inplace(&mut g, &out);
        let last = self.convs.len() - 1;
        let mut grad_in = match &mut self.downsample {
            Some((conv, bn)) => {
                let gz = bn.backward(&g)?;
                conv.backward(&gz, need_input_grad)?
            }
            None => need_input_grad.then(|| g.clone()),
        };
        let mut h = g;
        for i in (0..=last).rev() {
            if i < last {
                let act = self.cached_acts.pop().expect("activation cached per internal layer");
                relu_backward_inplace(&mut h, &act);
                self.zero_dropped(i, &mut h);
            }
            let gz = self.norms[i].backward(&h)?;
            let need = i > 0 || need_input_grad;
            match self.convs[i].backward(&gz, need)? {
                Some(gx) if i > 0 => h = gx,
                Some(gx) => {
                    if let Some(acc) = grad_in.as_mut() {
                        acc.add_assign(&gx);
                    }
                }
                None => {}
            }
        }
        Ok(grad_in)
    }

    pub fn clear_cache(&mut self) {
        self.cached_acts.clear();
        self.cached_out = None;
        for c in &mut self.convs {
            c.clear_cache();
        }
        for n in &mut self.norms {
            n.clear_cache();
        }
        if let Some((c, n)) = &mut self.downsample {
            c.clear_cache();
            n.clear_cache();
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.push(&mut c.weight);
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        if let Some((c, n)) = &mut self.downsample {
            out.push(&mut c.weight);
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for (c, bn) in self.convs.iter().zip(&self.norms) {
            n += c.weight.len() + 2 * bn.channels();
        }
        if let Some((c, bn)) = &self.downsample {
            n += c.weight.len() + 2 * bn.channels();
        }
        n
    }

    /// Parameters that survive the attached masks (equals the count after compaction).
    pub fn live_param_count(&self) -> usize {
        let last = self.convs.len() - 1;
        let live = |layer: Option<usize>, total: usize| -> usize {
            match layer.and_then(|l| self.keep[l].as_ref()) {
                Some(k) => k.iter().filter(|&&b| b).count(),
                None => total,
            }
        };
        let mut n = 0;
        for i in 0..=last {
            let c = &self.convs[i];
            let outs = live((i < last).then_some(i), c.out_channels);
            let ins = live(i.checked_sub(1), c.in_channels);
            n += outs * ins * c.kernel * c.kernel + 2 * outs;
        }
        if let Some((c, bn)) = &self.downsample {
            n += c.weight.len() + 2 * bn.channels();
        }
        n
    }

    pub(crate) fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            push_conv(out, &format!("{prefix}.conv{}", i + 1), c);
            push_bn(out, &format!("{prefix}.bn{}", i + 1), n);
        }
        if let Some((c, n)) = &self.downsample {
            push_conv(out, &format!("{prefix}.downsample.0"), c);
            push_bn(out, &format!("{prefix}.downsample.1"), n);
        }
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        for (i, (c, n)) in self.convs.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            push_conv_mut(out, &format!("{prefix}.conv{}", i + 1), c);
            push_bn_mut(out, &format!("{prefix}.bn{}", i + 1), n);
        }
        if let Some((c, n)) = &mut self.downsample {
            push_conv_mut(out, &format!("{prefix}.downsample.0"), c);
            push_bn_mut(out, &format!("{prefix}.downsample.1"), n);
        }
    }
}

/// A run of residual blocks (one "layerN" of the backbone).
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// 1-based stage index, used for tensor names (`layer{index}`).
    pub index: usize,
    pub blocks: Vec<ResidualBlock>,
}

impl Stage {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, arch: &ArchSpec, stage: usize, in_ch: usize) -> Self {
        let stride = if stage == 0 { 1 } else { 2 };
        let width = arch.widths[stage];
        let out_ch = width * arch.block.expansion();
        let blocks = (0..arch.layers[stage])
            .map(|b| {
                let (cin, s) = if b == 0 { (in_ch, stride) } else { (out_ch, 1) };
                ResidualBlock::new(rng, arch.block, cin, width, s)
            })
            .collect();
        Stage { index: stage + 1, blocks }
    }

    pub fn name(&self) -> String {
        format!("layer{}", self.index)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward_train(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let mut g = grad.clone();
        let n = self.blocks.len();
        for i in (0..n).rev() {
            let need = i > 0 || need_input_grad;
            match self.blocks[i].backward(&g, need)? {
                Some(next) => g = next,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    pub fn clear_cache(&mut self) {
        self.blocks.iter_mut().for_each(ResidualBlock::clear_cache);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ResidualBlock::param_count).sum()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, ResidualBlock::out_channels)
    }

    pub(crate) fn tensors<'a>(&'a self, out: &mut Vec<TensorRef<'a>>) {
        let name = self.name();
        for (i, b) in self.blocks.iter().enumerate() {
            b.tensors(&format!("{name}.{i}"), out);
        }
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<TensorMut<'a>>) {
        let name = self.name();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.tensors_mut(&format!("{name}.{i}"), out);
        }
    }
}

/// Convolution, normalisation, ReLU and optional max pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
    pub pool: Option<MaxPool2d>,
    cached_act: Option<Tensor>,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, arch: &ArchSpec) -> Self {
        let k = arch.stem_kernel;
        Stem {
            conv: Conv2d::kaiming(rng, arch.input[0], arch.stem_channels, k, arch.stem_stride, k / 2),
            norm: BatchNorm2d::new(arch.stem_channels),
            pool: arch.stem_pool.then(|| MaxPool2d::new(3, 2, 1)),
            cached_act: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.norm.forward(&self.conv.forward(x)?)?;
        relu_inplace(&mut h);
        Ok(match &self.pool {
            Some(p) => p.forward(&h),
            None => h,
        })
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let z = self.conv.forward_train(x)?;
        let mut h = self.norm.forward_train(&z)?;
        relu_inplace(&mut h);
        self.cached_act = Some(h.clone());
        Ok(match &mut self.pool {
            Some(p) => p.forward_train(&h),
            None => h,
        })
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<()> {
        let mut g = match &mut self.pool {
            Some(p) => p.backward(grad)?,
            None => grad.clone(),
        };
        let Some(act) = self.cached_act.take() else {
            bail!(State, "stem backward called without a cached forward pass");
        };
        relu_backward_inplace(&mut g, &act);
        let gz = self.norm.backward(&g)?;
        self.conv.backward(&gz, false)?;
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.cached_act = None;
        self.conv.clear_cache();
        self.norm.clear_cache();
        if let Some(p) = &mut self.pool {
            p.clear_cache();
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.conv.weight, &mut self.norm.gamma, &mut self.norm.beta]
    }

    pub fn param_count(&self) -> usize {
        self.conv.weight.len() + 2 * self.norm.channels()
    }

    pub(crate) fn tensors<'a>(&'a self, out: &mut Vec<TensorRef<'a>>) {
        push_conv(out, "conv1", &self.conv);
        push_bn(out, "bn1", &self.norm);
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<TensorMut<'a>>) {
        push_conv_mut(out, "conv1", &mut self.conv);
        push_bn_mut(out, "bn1", &mut self.norm);
    }
}

/// A full residual backbone without its classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub arch: ArchSpec,
    pub stem: Stem,
    pub stages: Vec<Stage>,
}

impl Backbone {
    /// Randomly initialised backbone.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, arch: ArchSpec) -> Self {
        let stem = Stem::new(rng, &arch);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = arch.stem_channels;
        for s in 0..4 {
            let stage = Stage::new(rng, &arch, s, in_ch);
            in_ch = stage.out_channels();
            stages.push(stage);
        }
        Backbone { arch, stem, stages }
    }

    /// Backbone filled from `(name, shape, data)` triples using torchvision tensor names.
    /// Extra names (e.g. `fc.*`, `num_batches_tracked`) are ignored.
    pub fn from_named<'a, I>(arch: ArchSpec, tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
    {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut backbone = Backbone::new(&mut rng, arch);
        let provided: Vec<(&str, &[usize], &[f32])> = tensors.into_iter().collect();
        for slot in backbone.tensors_mut() {
            let Some((_, shape, data)) = provided.iter().find(|(n, _, _)| *n == slot.name) else {
                bail!(Structural, "missing tensor '{}' (expected shape {:?})", slot.name, slot.shape);
            };
            if *shape != slot.shape.as_slice() || data.len() != slot.data.len() {
                bail!(Structural, "tensor '{}' has shape {:?}, expected {:?}", slot.name, shape, slot.shape);
            }
            slot.data.copy_from_slice(data);
        }
        Ok(backbone)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for s in &self.stages {
            h = s.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward_train(x)?;
        for s in &mut self.stages {
            h = s.forward_train(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<()> {
        let mut g = grad.clone();
        for s in self.stages.iter_mut().rev() {
            g = s.backward(&g, true)?.expect("input gradient requested");
        }
        self.stem.backward(&g)
    }

    pub fn clear_cache(&mut self) {
        self.stem.clear_cache();
        self.stages.iter_mut().for_each(Stage::clear_cache);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.stem.params_mut();
        for s in &mut self.stages {
            out.extend(s.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count() + self.stages.iter().map(Stage::param_count).sum::<usize>()
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.stem.tensors(&mut out);
        for s in &self.stages {
            s.tensors(&mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.stem.tensors_mut(&mut out);
        for s in &mut self.stages {
            s.tensors_mut(&mut out);
        }
        out
    }
}
