//! End-to-end experiments: stream construction, resumable training, per-stage
//! evaluation, seed aggregation and ablation sweeps.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pam_core::backbone::Backbone;
use pam_core::baseline::SequentialFinetune;
use pam_core::metrics::{average_accuracy, evaluate_stage, mean_std, percent, task_batches, EvalBatch, EvalMode};
use pam_core::model::{CountingMode, InitStrategy, ParamReport};
use pam_core::router::{ModuleSelectionMatrix, Strategy};
use pam_core::stream::{build_task_stream, indices_for, SplitSpec};
use pam_core::tensor::Tensor;
use pam_core::trainer::{SessionState, TaskData};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_session, read_manifest, save_stage, stage_dir, write_jsonl, write_manifest, SessionManifest, TaskEntry};
use crate::config::RunConfig;
use crate::data::{load_cifar, to_tensor, Dataset};
use crate::error::{io_err, Error, Result};
use crate::weights::{load_backbone, WeightsManifest};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
const BASELINE_FILE: &str = "baseline.json";

/// Data and pretrained weights shared by every run of one configuration.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub train: Dataset,
    pub test: Dataset,
    pub backbone: Backbone,
    pub weights: WeightsManifest,
}

impl Inputs {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (train, test) = load_cifar(&cfg.data.root, cfg.data.format)?;
        let (backbone, weights) = load_backbone(&cfg.model.weights, cfg.model.variant()?)?;
        Ok(Inputs {
            train: cap_per_class(&train, cfg.data.train_per_class),
            test: cap_per_class(&test, cfg.data.test_per_class),
            backbone,
            weights,
        })
    }

    fn side(&self) -> usize {
        self.backbone.arch.input[1]
    }
}

/// Keeps the first `cap` samples of every class (0 keeps everything).
pub fn cap_per_class(data: &Dataset, cap: usize) -> Dataset {
    if cap == 0 {
        return data.clone();
    }
    let mut seen = std::collections::HashMap::new();
    let keep: Vec<usize> = (0..data.len())
        .filter(|&i| {
            let n = seen.entry(data.labels[i]).or_insert(0usize);
            *n += 1;
            *n <= cap
        })
        .collect();
    let px = data.images.len() / data.len().max(1);
    Dataset {
        images: keep.iter().flat_map(|&i| data.images[i * px..(i + 1) * px].iter().copied()).collect(),
        labels: keep.iter().map(|&i| data.labels[i]).collect(),
        class_names: data.class_names.clone(),
    }
}

pub fn task_stream(cfg: &RunConfig, data: &Dataset) -> Result<Vec<Vec<u32>>> {
    let spec = SplitSpec::new(cfg.split.base_classes, cfg.split.increment, cfg.train.seed)?;
    Ok(build_task_stream(&spec, &data.classes())?)
}

fn tensor_for(cfg: &RunConfig, inputs: &Inputs, data: &Dataset, classes: &[u32]) -> Result<(Tensor, Vec<u32>)> {
    let idx = indices_for(&data.labels, classes);
    if idx.is_empty() {
        return Err(Error::Ingestion(format!("no samples for classes {classes:?}")));
    }
    let labels = idx.iter().map(|&i| data.labels[i]).collect();
    Ok((to_tensor(data, &idx, &cfg.data.normalization, inputs.side())?, labels))
}

fn check_weights(run: &Path, manifest: &SessionManifest, inputs: &Inputs) -> Result<()> {
    if manifest.weights.sha256 != inputs.weights.sha256 {
        return Err(Error::Ingestion(format!(
            "{} was trained from weights {}, the configured weights hash to {}",
            run.display(),
            manifest.weights.sha256,
            inputs.weights.sha256
        )));
    }
    Ok(())
}

/// Trains every stage not yet checkpointed in `run` and returns the session manifest.
pub fn train_stream(cfg: &RunConfig, inputs: &Inputs, run: &Path) -> Result<SessionManifest> {
    fs::create_dir_all(run).map_err(io_err(run))?;
    let stream = task_stream(cfg, &inputs.train)?;
    let hash = cfg.training_hash();
    let fresh = SessionState::new(inputs.backbone.clone())?;
    let (mut manifest, mut state) = match read_manifest(run)? {
        Some(m) => {
            if m.config_hash != hash {
                return Err(Error::Config(format!(
                    "{} holds a run with a different training configuration; pick another run name or output root",
                    run.display()
                )));
            }
            check_weights(run, &m, inputs)?;
            let done = m.stages_completed();
            if done > 0 {
                log::info!("{}: resuming after stage {done}", run.display());
            }
            let state = load_session(run, &m, done, fresh)?;
            (m, state)
        }
        None => (
            SessionManifest {
                config_hash: hash,
                variant: inputs.backbone.arch.name.clone(),
                weights: inputs.weights.clone(),
                tasks: Vec::new(),
            },
            fresh,
        ),
    };
    for (b, classes) in stream.iter().enumerate().skip(manifest.stages_completed()) {
        let start = Instant::now();
        let (images, labels) = tensor_for(cfg, inputs, &inputs.train, classes)?;
        let train_log = state.train_task(&TaskData::new(images, labels)?, &cfg.train)?;
        if !train_log.all_finite() {
            return Err(Error::Core(pam_core::Error::State(format!("non-finite loss in stage {}", b + 1))));
        }
        let record = state.tasks.last().expect("task just trained").clone();
        save_stage(run, b + 1, &state, record.module, &train_log)?;
        manifest.tasks.push(TaskEntry {
            stage: b + 1,
            module: record.module,
            classes: record.labels,
            reuse: record.reuse,
            seconds: start.elapsed().as_secs_f64(),
        });
        write_manifest(run, &manifest)?;
        log::info!(
            "{}: stage {}/{} done in {:.1}s, module {}, final epoch loss {:?}",
            run.display(),
            b + 1,
            stream.len(),
            manifest.tasks[b].seconds,
            record.module,
            train_log.epoch_losses().last()
        );
    }
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub training_hash: String,
    pub per_stage_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub final_accuracy: f64,
    pub seconds: f64,
}

/// Sequential finetuning on the same stream, scored on the cumulative test set after every stage.
pub fn run_baseline(cfg: &RunConfig, inputs: &Inputs) -> Result<BaselineReport> {
    let stream = task_stream(cfg, &inputs.train)?;
    let start = Instant::now();
    let mut model = SequentialFinetune::new(inputs.backbone.clone());
    let mut accuracies = Vec::with_capacity(stream.len());
    for (b, classes) in stream.iter().enumerate() {
        let (images, labels) = tensor_for(cfg, inputs, &inputs.train, classes)?;
        model.train_task(&TaskData::new(images, labels)?, &cfg.train)?;
        let seen: Vec<u32> = stream[..=b].iter().flatten().copied().collect();
        let (images, labels) = tensor_for(cfg, inputs, &inputs.test, &seen)?;
        let mut correct = 0;
        for start in (0..labels.len()).step_by(cfg.eval.test_batch_size) {
            let end = (start + cfg.eval.test_batch_size).min(labels.len());
            let pred = model.predict(&images.slice_batch(start, end))?;
            correct += pred.iter().zip(&labels[start..end]).filter(|(p, l)| p == l).count();
        }
        accuracies.push(percent(correct, labels.len()));
        log::info!("baseline stage {}/{}: {:.2}%", b + 1, stream.len(), accuracies[b]);
    }
    Ok(BaselineReport {
        training_hash: cfg.training_hash(),
        average_accuracy: average_accuracy(&accuracies)?,
        final_accuracy: *accuracies.last().expect("non-empty stream"),
        per_stage_accuracy: accuracies,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn cached_baseline(cfg: &RunConfig, inputs: &Inputs, run: &Path) -> Result<BaselineReport> {
    let path = run.join(BASELINE_FILE);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(report) = serde_json::from_str::<BaselineReport>(&text) {
            if report.training_hash == cfg.training_hash() {
                return Ok(report);
            }
        }
    }
    let report = run_baseline(cfg, inputs)?;
    fs::write(&path, serde_json::to_string_pretty(&report).expect("plain struct")).map_err(io_err(&path))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_echo: RunConfig,
    pub config_hash: String,
    pub training_hash: String,
    pub weights: WeightsManifest,
    pub eval_mode: EvalMode,
    pub stage_classes: Vec<Vec<u32>>,
    /// Class-incremental accuracy after each stage, in percent.
    pub per_stage_accuracy: Vec<f64>,
    pub average_accuracy: f64,
    pub final_accuracy: f64,
    /// Task-incremental accuracy after each stage over all seen tasks.
    pub til_per_stage_accuracy: Vec<f64>,
    /// `til_matrix[b][t]`: task-incremental accuracy on task `t` after stage `b + 1`.
    pub til_matrix: Vec<Vec<f64>>,
    pub module_of_task: Vec<usize>,
    pub module_count: usize,
    pub param_report: ParamReport,
    pub param_report_dense: ParamReport,
    /// Routing decisions at the last stage, tasks by modules.
    pub confusion: ModuleSelectionMatrix,
    pub selection_accuracy: f64,
    pub baseline: Option<BaselineReport>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub wall_time: f64,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(REPORT_JSON);
        fs::write(&path, serde_json::to_string_pretty(self).expect("report serialises")).map_err(io_err(&path))?;
        let path = dir.join(REPORT_CSV);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut rows = vec![vec![
            "stage".to_string(),
            "classes_seen".into(),
            "modules".into(),
            "cil_accuracy".into(),
            "til_accuracy".into(),
            "baseline_accuracy".into(),
        ]];
        let mut seen = 0;
        for b in 0..self.per_stage_accuracy.len() {
            seen += self.stage_classes[b].len();
            let modules = self.module_of_task[..=b].iter().max().map_or(0, |m| m + 1);
            let baseline = self.baseline.as_ref().map_or(String::new(), |r| r.per_stage_accuracy[b].to_string());
            rows.push(vec![
                (b + 1).to_string(),
                seen.to_string(),
                modules.to_string(),
                self.per_stage_accuracy[b].to_string(),
                self.til_per_stage_accuracy[b].to_string(),
                baseline,
            ]);
        }
        for row in rows {
            w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(io_err(&path))
    }
}

/// Scores the checkpoints in `checkpoints` after every stage, writing per-sample
/// predictions and routing records under `out`.
pub fn evaluate_run(
    cfg: &RunConfig,
    inputs: &Inputs,
    checkpoints: &Path,
    out: &Path,
    baseline: Option<BaselineReport>,
) -> Result<RunReport> {
    let start = Instant::now();
    let manifest = read_manifest(checkpoints)?
        .ok_or_else(|| Error::Config(format!("{} holds no trained session", checkpoints.display())))?;
    if manifest.config_hash != cfg.training_hash() {
        return Err(Error::Config(format!(
            "{} was trained with a different configuration than the one given",
            checkpoints.display()
        )));
    }
    check_weights(checkpoints, &manifest, inputs)?;
    let stages = manifest.stages_completed();
    if stages == 0 {
        return Err(Error::Config(format!("{} has no completed stage", checkpoints.display())));
    }
    let mode = cfg.eval.mode();
    let mut tests: Vec<Vec<EvalBatch>> = Vec::with_capacity(stages);
    for (t, entry) in manifest.tasks.iter().enumerate() {
        let (images, labels) = tensor_for(cfg, inputs, &inputs.test, &entry.classes)?;
        tests.push(task_batches(t, &images, &labels, cfg.eval.test_batch_size)?);
    }

    let mut cil = Vec::with_capacity(stages);
    let mut til = Vec::with_capacity(stages);
    let mut til_matrix = Vec::with_capacity(stages);
    let mut last = None;
    for b in 1..=stages {
        let state = load_session(checkpoints, &manifest, b, SessionState::new(inputs.backbone.clone())?)?;
        let batches: Vec<EvalBatch> = tests[..b].iter().flatten().cloned().collect();
        let eval = evaluate_stage(&state, &batches, mode)?;
        let within = evaluate_stage(&state, &batches, EvalMode::WithinTask)?;
        let dir = stage_dir(out, b);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_jsonl(&dir.join("predictions.jsonl"), &eval.samples)?;
        write_jsonl(&dir.join("routing.jsonl"), &eval.routing)?;
        log::info!("stage {b}/{stages}: CIL {:.2}%, TIL {:.2}%", eval.accuracy, within.accuracy);
        cil.push(eval.accuracy);
        til.push(within.accuracy);
        til_matrix.push(within.per_task_accuracy);
        last = Some((state, eval));
    }
    let (state, eval) = last.expect("at least one stage");
    let module_of_task: Vec<usize> = manifest.tasks.iter().map(|t| t.module).collect();
    let train_seconds: f64 = manifest.tasks.iter().map(|t| t.seconds).sum();
    let eval_seconds = start.elapsed().as_secs_f64();
    Ok(RunReport {
        seed: cfg.train.seed,
        config_echo: cfg.clone(),
        config_hash: cfg.hash(),
        training_hash: manifest.config_hash.clone(),
        weights: manifest.weights.clone(),
        eval_mode: mode,
        stage_classes: manifest.tasks.iter().map(|t| t.classes.clone()).collect(),
        average_accuracy: average_accuracy(&cil)?,
        final_accuracy: cil[stages - 1],
        per_stage_accuracy: cil,
        til_per_stage_accuracy: til,
        til_matrix,
        module_count: state.module_count(),
        param_report: state.param_report(CountingMode::CompactedPhysical)?,
        param_report_dense: state.param_report(CountingMode::MaskedLogical)?,
        selection_accuracy: eval.confusion.correct_fraction(&module_of_task),
        confusion: eval.confusion,
        module_of_task,
        train_seconds,
        eval_seconds,
        wall_time: train_seconds + eval_seconds + baseline.as_ref().map_or(0.0, |b| b.seconds),
        baseline,
    })
}

/// Trains (or resumes) and evaluates one seed in `run`, writing its report there.
pub fn run_seed(cfg: &RunConfig, inputs: &Inputs, run: &Path) -> Result<RunReport> {
    train_stream(cfg, inputs, run)?;
    let baseline = if cfg.run.baseline { Some(cached_baseline(cfg, inputs, run)?) } else { None };
    let report = evaluate_run(cfg, inputs, run, run, baseline)?;
    report.write(run)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Self> {
        let (mean, std) = mean_std(values)?;
        Ok(Stat { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub average_accuracy: Stat,
    pub final_accuracy: Stat,
    pub final_til_accuracy: Stat,
    pub module_count: Stat,
    pub baseline_final_accuracy: Option<Stat>,
    pub per_stage_accuracy: Vec<Stat>,
}

impl SeedSummary {
    pub fn of(reports: &[RunReport]) -> Result<Self> {
        let col = |f: &dyn Fn(&RunReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
        let stages = reports.iter().map(|r| r.per_stage_accuracy.len()).min().unwrap_or(0);
        let baselines: Option<Vec<f64>> = reports.iter().map(|r| r.baseline.as_ref().map(|b| b.final_accuracy)).collect();
        Ok(SeedSummary {
            seeds: reports.iter().map(|r| r.seed).collect(),
            average_accuracy: col(&|r| r.average_accuracy)?,
            final_accuracy: col(&|r| r.final_accuracy)?,
            final_til_accuracy: col(&|r| *r.til_per_stage_accuracy.last().unwrap_or(&0.0))?,
            module_count: col(&|r| r.module_count as f64)?,
            baseline_final_accuracy: baselines.map(|v| Stat::of(&v)).transpose()?,
            per_stage_accuracy: (0..stages).map(|b| col(&|r| r.per_stage_accuracy[b])).collect::<Result<_>>()?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(self).expect("summary serialises")).map_err(io_err(&path))?;
        let path = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let fmt = |s: &Stat| [s.mean.to_string(), s.std.to_string()];
        let mut rows: Vec<(String, Stat)> = vec![
            ("average_accuracy".into(), self.average_accuracy),
            ("final_accuracy".into(), self.final_accuracy),
            ("final_til_accuracy".into(), self.final_til_accuracy),
            ("module_count".into(), self.module_count),
        ];
        if let Some(b) = self.baseline_final_accuracy {
            rows.push(("baseline_final_accuracy".into(), b));
        }
        for (b, s) in self.per_stage_accuracy.iter().enumerate() {
            rows.push((format!("stage_{}_accuracy", b + 1), *s));
        }
        w.write_record(["metric", "mean", "std"]).map_err(|e| Error::Format(e.to_string()))?;
        for (name, stat) in rows {
            let [m, s] = fmt(&stat);
            w.write_record([name, m, s]).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(io_err(&path))
    }
}

pub fn experiment_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run.output_root.join(&cfg.run.name)
}

pub fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    experiment_dir(cfg).join(format!("seed_{seed}"))
}

/// Runs every configured seed and writes the cross-seed summary.
pub fn run_experiment(cfg: &RunConfig, inputs: &Inputs) -> Result<(Vec<RunReport>, SeedSummary)> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        reports.push(run_seed(&cfg.for_seed(seed), inputs, &seed_dir(cfg, seed))?);
    }
    let summary = SeedSummary::of(&reports)?;
    summary.write(&experiment_dir(cfg))?;
    Ok((reports, summary))
}

/// Re-scores existing checkpoints with the evaluation settings of `cfg`.
pub fn rescore_experiment(cfg: &RunConfig, inputs: &Inputs) -> Result<(Vec<RunReport>, SeedSummary)> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        let c = cfg.for_seed(seed);
        let run = seed_dir(cfg, seed);
        let baseline = if c.run.baseline { Some(cached_baseline(&c, inputs, &run)?) } else { None };
        let report = evaluate_run(&c, inputs, &run, &run, baseline)?;
        report.write(&run)?;
        reports.push(report);
    }
    let summary = SeedSummary::of(&reports)?;
    summary.write(&experiment_dir(cfg))?;
    Ok((reports, summary))
}

/// One swept hyperparameter and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum AblationAxis {
    PruneEpoch(Vec<usize>),
    Magnitude(Vec<f32>),
    Strategy(Vec<Strategy>),
    EnsembleW(Vec<f32>),
    Init(Vec<InitStrategy>),
    Beta(Vec<f32>),
}

impl AblationAxis {
    pub const NAMES: [&'static str; 6] = ["prune_epoch", "magnitude", "strategy", "ensemble_w", "init", "beta"];

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::PruneEpoch(_) => "prune_epoch",
            AblationAxis::Magnitude(_) => "magnitude",
            AblationAxis::Strategy(_) => "strategy",
            AblationAxis::EnsembleW(_) => "ensemble_w",
            AblationAxis::Init(_) => "init",
            AblationAxis::Beta(_) => "beta",
        }
    }

    /// The standard sweep for an axis name.
    pub fn standard(name: &str) -> Result<Self> {
        Ok(match name {
            "prune_epoch" => AblationAxis::PruneEpoch(vec![1, 5, 10]),
            "magnitude" => AblationAxis::Magnitude(vec![0.95, 0.96, 0.97, 0.98]),
            "strategy" => {
                AblationAxis::Strategy(vec![Strategy::Confidence, Strategy::DistancePooled, Strategy::DistanceMap])
            }
            "ensemble_w" => AblationAxis::EnsembleW(vec![1.0, 0.9, 0.8]),
            "init" => AblationAxis::Init(vec![InitStrategy::Pretrained, InitStrategy::Relevant]),
            "beta" => AblationAxis::Beta(vec![0.70, 0.73, 0.75, 0.77]),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation axis '{other}' (expected one of {})",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    /// Parses `name` or `name=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let Some((name, values)) = spec.split_once('=') else {
            return Self::standard(spec.trim());
        };
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if items.is_empty() {
            return Err(Error::Config(format!("ablation axis '{name}' lists no values")));
        }
        let bad = |v: &str| Error::Config(format!("bad value '{v}' for ablation axis '{name}'"));
        let floats = || items.iter().map(|v| v.parse::<f32>().map_err(|_| bad(v))).collect::<Result<Vec<_>>>();
        Ok(match Self::standard(name.trim())? {
            AblationAxis::PruneEpoch(_) => {
                AblationAxis::PruneEpoch(items.iter().map(|v| v.parse().map_err(|_| bad(v))).collect::<Result<_>>()?)
            }
            AblationAxis::Magnitude(_) => AblationAxis::Magnitude(floats()?),
            AblationAxis::Strategy(_) => {
                AblationAxis::Strategy(items.iter().map(|v| Strategy::parse(v).map_err(|_| bad(v))).collect::<Result<_>>()?)
            }
            AblationAxis::EnsembleW(_) => AblationAxis::EnsembleW(floats()?),
            AblationAxis::Init(_) => AblationAxis::Init(
                items
                    .iter()
                    .map(|v| match *v {
                        "pretrained" => Ok(InitStrategy::Pretrained),
                        "relevant" => Ok(InitStrategy::Relevant),
                        _ => Err(bad(v)),
                    })
                    .collect::<Result<_>>()?,
            ),
            AblationAxis::Beta(_) => AblationAxis::Beta(floats()?),
        })
    }

    /// Whether the axis only changes evaluation, so arms can share one training run.
    pub fn eval_only(&self) -> bool {
        matches!(self, AblationAxis::Strategy(_) | AblationAxis::EnsembleW(_))
    }

    /// `(label, config)` for every arm.
    pub fn arms(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        fn each<T: Copy>(base: &RunConfig, values: &[T], label: impl Fn(T) -> String, set: impl Fn(&mut RunConfig, T)) -> Vec<(String, RunConfig)> {
            values
                .iter()
                .map(|&v| {
                    let mut c = base.clone();
                    set(&mut c, v);
                    (label(v), c)
                })
                .collect()
        }
        match self {
            AblationAxis::PruneEpoch(v) => each(base, v, |x| x.to_string(), |c, x| c.train.prune_epoch = x),
            AblationAxis::Magnitude(v) => each(base, v, |x| x.to_string(), |c, x| c.train.prune_magnitude = x),
            AblationAxis::Strategy(v) => each(base, v, |x| x.id().to_string(), |c, x| {
                c.eval.strategy = x;
                c.eval.ensemble_weight = 1.0;
            }),
            AblationAxis::EnsembleW(v) => each(base, v, |x| x.to_string(), |c, x| c.eval.ensemble_weight = x),
            AblationAxis::Init(v) => each(
                base,
                v,
                |x| match x {
                    InitStrategy::Pretrained => "pretrained".to_string(),
                    InitStrategy::Relevant => "relevant".to_string(),
                },
                |c, x| c.train.init_strategy = x,
            ),
            AblationAxis::Beta(v) => each(base, v, |x| x.to_string(), |c, x| c.train.reuse_beta = Some(x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub axis: String,
    pub value: String,
    pub final_accuracy: Stat,
    pub average_accuracy: Stat,
    pub module_count: Stat,
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn arms_of(&self, axis: &str) -> Vec<&ArmResult> {
        self.arms.iter().filter(|a| a.axis == axis).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("ablation.json");
        fs::write(&path, serde_json::to_string_pretty(self).expect("report serialises")).map_err(io_err(&path))?;
        let path = dir.join("ablation.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let header = ["axis", "value", "final_mean", "final_std", "average_mean", "average_std", "modules_mean"];
        w.write_record(header).map_err(|e| Error::Format(e.to_string()))?;
        for a in &self.arms {
            w.write_record([
                a.axis.clone(),
                a.value.clone(),
                a.final_accuracy.mean.to_string(),
                a.final_accuracy.std.to_string(),
                a.average_accuracy.mean.to_string(),
                a.average_accuracy.std.to_string(),
                a.module_count.mean.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(io_err(&path))
    }
}

pub fn ablation_dir(base: &RunConfig) -> PathBuf {
    experiment_dir(base).join("ablate")
}

/// Sweeps each axis independently around `base`, every arm over every seed.
///
/// Arms with identical training settings share one checkpoint directory keyed by
/// the training hash, so evaluation-only axes train once.
pub fn run_ablation(base: &RunConfig, inputs: &Inputs, axes: &[AblationAxis]) -> Result<AblationReport> {
    base.validate()?;
    let mut names = BTreeSet::new();
    for axis in axes {
        if !names.insert(axis.name()) {
            return Err(Error::Config(format!("ablation axis '{}' appears twice in one sweep", axis.name())));
        }
    }
    let root = ablation_dir(base);
    let mut arms = Vec::new();
    for axis in axes {
        for (label, cfg) in axis.arms(base) {
            cfg.validate()?;
            let mut reports = Vec::new();
            let mut paths = Vec::new();
            for &seed in &cfg.run.seeds {
                let c = cfg.for_seed(seed);
                let train_dir = root.join("train").join(&c.training_hash()[..16]);
                train_stream(&c, inputs, &train_dir)?;
                let arm_dir = root.join(axis.name()).join(&label).join(format!("seed_{seed}"));
                let baseline = if c.run.baseline { Some(cached_baseline(&c, inputs, &train_dir)?) } else { None };
                let report = evaluate_run(&c, inputs, &train_dir, &arm_dir, baseline)?;
                report.write(&arm_dir)?;
                log::info!("{}={label} seed {seed}: final {:.2}%", axis.name(), report.final_accuracy);
                paths.push(arm_dir.join(REPORT_JSON));
                reports.push(report);
            }
            let summary = SeedSummary::of(&reports)?;
            arms.push(ArmResult {
                axis: axis.name().to_string(),
                value: label,
                final_accuracy: summary.final_accuracy,
                average_accuracy: summary.average_accuracy,
                module_count: summary.module_count,
                reports: paths,
            });
        }
    }
    let report = AblationReport { arms };
    report.write(&root)?;
    Ok(report)
}
