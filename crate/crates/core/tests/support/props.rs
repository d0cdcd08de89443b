#![allow(dead_code)]

//! Property checks shared by the core property tests and the acceptance suite.
//! Each check drives a proptest runner and reports the first failure as text.

use pam_core::backbone::{ArchSpec, Backbone, BlockKind};
use pam_core::metrics::average_accuracy;
use pam_core::model::{split_backbone, AdaptationModule};
use pam_core::nn::softmax_rows;
use pam_core::pruning::{apply_plan, build_pruning_plan, channel_saliency, compact};
use pam_core::router::{ensemble_predict, predict, select_confident, EnsembleWeights, Strategy as Route};
use pam_core::tensor::{Matrix, Tensor};
use pam_core::trainer::{SessionState, TaskData, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_arch(block: BlockKind) -> ArchSpec {
    ArchSpec {
        name: "micro".into(),
        block,
        layers: [1, 1, 1, 1],
        widths: [4, 6, 8, 10],
        stem_channels: 4,
        stem_kernel: 3,
        stem_stride: 1,
        stem_pool: false,
        input: [3, 8, 8],
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Module whose weights are perturbed away from initialisation so saliencies differ.
pub fn random_module(seed: u64, block: BlockKind) -> (pam_core::model::SharedExtractor, AdaptationModule) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::new(&mut rng, micro_arch(block));
    let (extractor, mut module) = split_backbone(backbone).unwrap();
    for t in module.tensors_mut() {
        if t.name.ends_with("running_var") {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        } else {
            t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
    }
    (extractor, module)
}

pub fn toy_task(rng: &mut ChaCha8Rng, arch: &ArchSpec, classes: &[u32], per_class: usize) -> TaskData {
    let [c, h, w] = arch.input;
    let n = classes.len() * per_class;
    let mut images = random_tensor(rng, [n, c, h, w]);
    let labels: Vec<u32> = (0..n).map(|i| classes[i % classes.len()]).collect();
    // class-dependent offset so the toy tasks are learnable
    for (i, &l) in labels.iter().enumerate() {
        let ch = (l as usize) % c;
        let plane = h * w;
        images.sample_mut(i)[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += 1.5 + 0.2 * l as f32);
    }
    TaskData::new(images, labels).unwrap()
}

pub fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 8, prune_magnitude: 0.5, seed, ..TrainConfig::default() }
}

fn run<S: Strategy, F>(cases: u32, strategy: S, test: F) -> Result<(), String>
where
    F: Fn(S::Value) -> Result<(), TestCaseError>,
{
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn block_kind() -> impl Strategy<Value = BlockKind> {
    prop_oneof![Just(BlockKind::Basic), Just(BlockKind::Bottleneck)]
}

/// Saliency equals an index-by-index sum of absolute weights.
pub fn saliency_brute_force(cases: u32) -> Result<(), String> {
    let strategy = (1usize..6, 1usize..5, prop_oneof![Just(1usize), Just(3)]).prop_flat_map(|(o, i, k)| {
        (Just([o, i, k, k]), prop::collection::vec(-10.0f32..10.0, o * i * k * k))
    });
    run(cases, strategy, |(shape, w)| {
        let s = channel_saliency("l", &w, shape).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let [o, i, kh, kw] = shape;
        for c in 0..o {
            let mut sum = 0.0f64;
            for a in 0..i {
                for y in 0..kh {
                    for x in 0..kw {
                        sum += (w[((c * i + a) * kh + y) * kw + x] as f64).abs();
                    }
                }
            }
            prop_assert_eq!(s.scores[c], sum as f32);
        }
        Ok(())
    })
}

/// Scaling every weight by a power of two leaves the pruning order unchanged.
pub fn ranking_scale_invariance(cases: u32) -> Result<(), String> {
    let strategy = (1usize..12, 1usize..4)
        .prop_flat_map(|(o, i)| (Just([o, i, 3, 3]), prop::collection::vec(-4.0f32..4.0, o * i * 9), -8i32..8));
    run(cases, strategy, |(shape, w, e)| {
        let scale = 2f32.powi(e);
        let scaled: Vec<f32> = w.iter().map(|v| v * scale).collect();
        let a = channel_saliency("l", &w, shape).unwrap().pruning_order();
        let b = channel_saliency("l", &scaled, shape).unwrap().pruning_order();
        prop_assert_eq!(a, b);
        Ok(())
    })
}

/// Same module and magnitude give the same plan; a larger magnitude drops a superset.
pub fn plan_determinism_and_monotonicity(cases: u32) -> Result<(), String> {
    let strategy = (any::<u64>(), block_kind(), 0.0f32..0.99, 0.0f32..0.99);
    run(cases, strategy, |(seed, block, m1, m2)| {
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let (_, module) = random_module(seed, block);
        let a = build_pruning_plan(&module, lo, 1).unwrap();
        prop_assert_eq!(&a, &build_pruning_plan(&module, lo, 1).unwrap());
        let b = build_pruning_plan(&module, hi, 1).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let kept_hi = lb.kept();
            prop_assert!(kept_hi.iter().all(|c| la.keep[*c]), "higher magnitude kept a channel the lower one dropped");
            prop_assert!(!kept_hi.is_empty());
        }
        Ok(())
    })
}

/// Arbitrary values in masked filters, their input slices and their running stats do not reach the output.
pub fn masked_zero_invariance(cases: u32) -> Result<(), String> {
    let strategy = (any::<u64>(), block_kind(), 0.1f32..0.95, any::<u64>());
    run(cases, strategy, |(seed, block, m, noise)| {
        let (extractor, mut module) = random_module(seed, block);
        let plan = build_pruning_plan(&module, m, 1).unwrap();
        apply_plan(&mut module, &plan).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(noise);
        let x = extractor.extract(&random_tensor(&mut rng, [4, 3, 8, 8])).unwrap();
        let before = module.forward(&x).unwrap();

        let views: Vec<(String, Vec<usize>)> = module.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        let find = |name: &str| views.iter().position(|(n, _)| n == name).unwrap();
        let mut writes: Vec<(usize, usize, f32)> = Vec::new();
        for mask in &plan.layers {
            let (prefix, conv) = mask.layer_id.rsplit_once(".conv").unwrap();
            let idx: usize = conv.parse().unwrap();
            let this = find(&format!("{prefix}.conv{idx}.weight"));
            let next = find(&format!("{prefix}.conv{}.weight", idx + 1));
            let mean = find(&format!("{prefix}.bn{idx}.running_mean"));
            let var = find(&format!("{prefix}.bn{idx}.running_var"));
            let shape = &views[this].1;
            let len: usize = shape[1..].iter().product();
            let next_shape = &views[next].1;
            let kk = next_shape[2] * next_shape[3];
            for c in mask.dropped() {
                for j in 0..len {
                    writes.push((this, c * len + j, rng.gen_range(-5.0..5.0)));
                }
                for o in 0..next_shape[0] {
                    for j in 0..kk {
                        writes.push((next, (o * next_shape[1] + c) * kk + j, rng.gen_range(-5.0..5.0)));
                    }
                }
                writes.push((mean, c, rng.gen_range(-5.0..5.0)));
                writes.push((var, c, rng.gen_range(0.1..5.0)));
            }
        }
        prop_assume!(!writes.is_empty());
        let mut garbage = module.clone();
        {
            let mut tensors = garbage.tensors_mut();
            for (t, i, v) in writes {
                tensors[t].data[i] = v;
            }
        }
        prop_assert_ne!(&garbage, &module);
        prop_assert_eq!(garbage.forward(&x).unwrap(), before);
        Ok(())
    })
}

/// The compacted module reproduces the masked module on 100 random inputs.
pub fn compaction_equivalence(cases: u32) -> Result<(), String> {
    let strategy = (any::<u64>(), block_kind(), 0.0f32..0.97);
    run(cases, strategy, |(seed, block, m)| {
        let (extractor, mut module) = random_module(seed, block);
        let plan = build_pruning_plan(&module, m, 1).unwrap();
        apply_plan(&mut module, &plan).unwrap();
        let small = compact(&module).unwrap();
        prop_assert!(small.param_count() <= module.param_count());
        prop_assert_eq!(small.param_count(), module.live_param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x = extractor.extract(&random_tensor(&mut rng, [100, 3, 8, 8])).unwrap();
        let a = module.forward(&x).unwrap();
        let b = small.forward(&x).unwrap();
        for n in 0..100 {
            let (ra, rb) = (a.sample(n), b.sample(n));
            let diff: f32 = ra.iter().zip(rb).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt();
            let norm: f32 = ra.iter().map(|p| p * p).sum::<f32>().sqrt();
            prop_assert!(diff <= 1e-5 * norm.max(1e-6), "sample {n}: |diff| {diff} vs |out| {norm}");
        }
        Ok(())
    })
}

/// Training later tasks leaves the extractor, earlier modules and earlier classifier rows bitwise intact.
pub fn extractor_and_frozen_immutability(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), block_kind()), |(seed, block)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = micro_arch(block);
        let mut state = SessionState::new(Backbone::new(&mut rng, arch.clone())).unwrap();
        let config = toy_config(seed);
        state.train_task(&toy_task(&mut rng, &arch, &[0, 1], 6), &config).unwrap();
        let extractor = state.extractor.clone();
        let module = state.modules[0].clone();
        let rows: Vec<(Vec<f32>, f32)> = (0..2).map(|r| (state.classifier.row(r).0.to_vec(), state.classifier.row(r).1)).collect();
        state.train_task(&toy_task(&mut rng, &arch, &[2, 3], 6), &config).unwrap();
        state.train_task(&toy_task(&mut rng, &arch, &[4], 6), &config).unwrap();
        prop_assert!(state.extractor == extractor, "extractor changed");
        prop_assert!(state.modules[0] == module, "frozen module changed");
        for (r, (w, b)) in rows.iter().enumerate() {
            let (w2, b2) = state.classifier.row(r);
            prop_assert!(w2 == w.as_slice() && b2 == *b, "classifier row {r} changed");
        }
        Ok(())
    })
}

fn probability_matrices() -> impl Strategy<Value = (Vec<Matrix>, Vec<Vec<usize>>)> {
    (1usize..5, 1usize..6, 1usize..4).prop_flat_map(|(modules, batch, per)| {
        let classes = modules * per;
        (
            prop::collection::vec(prop::collection::vec(-6.0f32..6.0, batch * classes), modules),
            Just((modules, batch, per)),
        )
            .prop_map(move |(logits, (modules, batch, per))| {
                let mats = logits
                    .into_iter()
                    .map(|l| softmax_rows(&Matrix::from_vec(batch, modules * per, l).unwrap()))
                    .collect();
                let spaces = (0..modules).map(|m| (m * per..(m + 1) * per).collect()).collect();
                (mats, spaces)
            })
    })
}

/// Confidence routing matches an independent loop over modules.
pub fn routing_brute_force(cases: u32) -> Result<(), String> {
    run(cases, probability_matrices(), |(probs, spaces)| {
        let got = select_confident(&probs, &spaces).unwrap();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (m, (p, space)) in probs.iter().zip(&spaces).enumerate() {
            let mut total = 0.0f64;
            for r in 0..p.rows() {
                let mut top = 0.0f32;
                for &c in space {
                    if p.row(r)[c] > top {
                        top = p.row(r)[c];
                    }
                }
                total += top as f64;
            }
            let conf = total / p.rows() as f64;
            prop_assert!((got.scores[m] as f64 - conf).abs() <= 1e-6);
            if conf > best.1 {
                best = (m, conf);
            }
        }
        prop_assert_eq!(got.selected, best.0);
        Ok(())
    })
}

/// Adding a constant to a module's logits changes neither its probabilities nor the routing.
pub fn logit_shift_invariance(cases: u32) -> Result<(), String> {
    let strategy = (
        (1usize..4, 1usize..5, 1usize..4)
            .prop_flat_map(|(m, b, per)| (Just((m, b, per)), prop::collection::vec(-5.0f32..5.0, m * b * m * per))),
        -20.0f32..20.0,
        0usize..4,
    );
    run(cases, strategy, |(((modules, batch, per), logits), shift, which)| {
        let which = which % modules;
        let classes = modules * per;
        let chunk = batch * classes;
        let spaces: Vec<Vec<usize>> = (0..modules).map(|m| (m * per..(m + 1) * per).collect()).collect();
        let plain: Vec<Matrix> = (0..modules)
            .map(|m| softmax_rows(&Matrix::from_vec(batch, classes, logits[m * chunk..(m + 1) * chunk].to_vec()).unwrap()))
            .collect();
        let shifted: Vec<Matrix> = (0..modules)
            .map(|m| {
                let add = if m == which { shift } else { 0.0 };
                let l = logits[m * chunk..(m + 1) * chunk].iter().map(|v| v + add).collect();
                softmax_rows(&Matrix::from_vec(batch, classes, l).unwrap())
            })
            .collect();
        for (a, b) in plain.iter().zip(&shifted) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
        let (ra, rb) = (select_confident(&plain, &spaces).unwrap(), select_confident(&shifted, &spaces).unwrap());
        for (x, y) in ra.scores.iter().zip(&rb.scores) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        prop_assert_eq!(ra.selected, rb.selected);
        Ok(())
    })
}

/// Ensembling with all weight on the most confident module is single-module prediction.
pub fn ensemble_degeneracy(cases: u32) -> Result<(), String> {
    run(cases, any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = micro_arch(BlockKind::Basic);
        let mut state = SessionState::new(Backbone::new(&mut rng, arch.clone())).unwrap();
        let config = TrainConfig { epochs: 1, ..toy_config(seed) };
        for classes in [[0u32, 1], [2, 3], [4, 5]] {
            state.train_task(&toy_task(&mut rng, &arch, &classes, 4), &config).unwrap();
        }
        let batch = random_tensor(&mut rng, [6, 3, 8, 8]);
        let single = predict(&state, &batch, Route::Confidence, None).unwrap();
        let mixed = ensemble_predict(&state, &batch, EnsembleWeights::new(1.0).unwrap()).unwrap();
        prop_assert_eq!(single.labels, mixed.labels);
        prop_assert_eq!(single.module, mixed.module);
        Ok(())
    })
}

/// The average of per-stage accuracies equals the exact rational mean within 1e-9.
pub fn average_accuracy_closure(cases: u32) -> Result<(), String> {
    let strategy = prop::collection::vec((1u64..5000).prop_flat_map(|t| (0..=t, Just(t))), 1..40);
    run(cases, strategy, |stages| {
        let acc: Vec<f64> = stages.iter().map(|&(c, t)| 100.0 * c as f64 / t as f64).collect();
        // exact mean as a fraction over the common denominator
        let den = stages.iter().try_fold(1u128, |d, &(_, t)| d.checked_mul(t as u128)).filter(|&d| d < 1u128 << 100);
        let mean = match den {
            Some(den) => {
                let num: u128 = stages.iter().map(|&(c, t)| 100 * c as u128 * (den / t as u128)).sum();
                num as f64 / den as f64 / stages.len() as f64
            }
            None => acc.iter().sum::<f64>() / acc.len() as f64,
        };
        let got = average_accuracy(&acc).unwrap();
        prop_assert!((got - mean).abs() <= 1e-9, "{got} vs {mean}");
        Ok(())
    })
}

pub type Check = fn(u32) -> Result<(), String>;

/// Every property with its name.
pub const ALL: [(&str, Check); 10] = [
    ("saliency brute-force equivalence", saliency_brute_force),
    ("ranking scale-invariance", ranking_scale_invariance),
    ("plan determinism and monotone sparsity", plan_determinism_and_monotonicity),
    ("masked-zero forward invariance", masked_zero_invariance),
    ("compaction equivalence", compaction_equivalence),
    ("extractor and frozen-module immutability", extractor_and_frozen_immutability),
    ("routing brute-force argmax equivalence", routing_brute_force),
    ("logit-shift invariance", logit_shift_invariance),
    ("ensemble w=1 degeneracy", ensemble_degeneracy),
    ("average accuracy closure", average_accuracy_closure),
];
