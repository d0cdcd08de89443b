use std::fs;
use std::path::Path;

use pam::checkpoint::{load_session, read_jsonl, read_manifest, stage_dir, write_manifest};
use pam::config::RunConfig;
use pam::harness::{
    run_ablation, run_experiment, run_seed, seed_dir, train_stream, AblationAxis, Inputs, RunReport, REPORT_JSON,
};
use pam::synth::{generate, SynthSpec};
use pam::weights::WeightsManifest;
use pam::Error;
use pam_core::backbone::{Backbone, BackboneVariant};
use pam_core::metrics::{percent, SamplePrediction};
use pam_core::trainer::{SessionState, TaskData};
use rand::SeedableRng;

fn inputs(classes: usize) -> Inputs {
    let spec = SynthSpec { classes, train_per_class: 12, test_per_class: 6, seed: 3, namespace: 0 };
    let (train, test) = generate(&spec);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    Inputs {
        train,
        test,
        backbone: Backbone::new(&mut rng, BackboneVariant::Tiny.arch()),
        weights: WeightsManifest { variant: "rn-tiny".into(), source: "test".into(), sha256: "0".repeat(64) },
    }
}

fn config(root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.run.name = "toy".into();
    c.run.output_root = root.to_path_buf();
    c.train.epochs = 1;
    c.train.batch_size = 8;
    c.eval.test_batch_size = 6;
    c
}

#[test]
fn two_stage_run_reports_consistent_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let inputs = inputs(4);
    let (reports, summary) = run_experiment(&cfg, &inputs).unwrap();
    let r = &reports[0];
    assert_eq!(r.per_stage_accuracy.len(), 2);
    let mean = r.per_stage_accuracy.iter().sum::<f64>() / 2.0;
    assert!((r.average_accuracy - mean).abs() <= 1e-9);
    assert_eq!(r.final_accuracy, r.per_stage_accuracy[1]);
    assert!(r.per_stage_accuracy.iter().all(|a| (0.0..=100.0).contains(a)));
    assert_eq!(summary.final_accuracy.mean, r.final_accuracy);

    let run = seed_dir(&cfg, 0);
    for name in ["session.json", "report.json", "report.csv"] {
        assert!(run.join(name).is_file(), "{name} missing");
    }
    for b in 1..=2 {
        for name in ["module.bin", "plan.txt", "classifier.bin", "centroid.bin", "log.jsonl", "predictions.jsonl", "routing.jsonl"] {
            assert!(stage_dir(&run, b).join(name).is_file(), "stage {b}: {name} missing");
        }
        // stage accuracy recounted from the persisted per-sample log
        let samples: Vec<SamplePrediction> = read_jsonl(&stage_dir(&run, b).join("predictions.jsonl")).unwrap();
        let correct = samples.iter().filter(|s| s.label == s.predicted).count();
        assert_eq!(percent(correct, samples.len()), r.per_stage_accuracy[b - 1]);
    }

    // persisted report reproduces the in-memory one and its config echo round-trips
    let loaded = RunReport::load(&run.join(REPORT_JSON)).unwrap();
    assert_eq!(&loaded, r);
    let echo = RunConfig::from_toml(&loaded.config_echo.to_toml()).unwrap();
    assert_eq!(echo, loaded.config_echo);
    assert_eq!(echo, cfg.for_seed(0));

    // csv agrees with the json
    let csv = fs::read_to_string(run.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for (b, row) in rows.iter().enumerate() {
        let acc: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(acc, r.per_stage_accuracy[b]);
    }
}

#[test]
fn same_seed_is_reproducible_and_resume_matches() {
    let inputs = inputs(6);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = config(a.path());
    let cb = config(b.path());
    let ra = run_seed(&ca.for_seed(0), &inputs, &seed_dir(&ca, 0)).unwrap();
    let rb = run_seed(&cb.for_seed(0), &inputs, &seed_dir(&cb, 0)).unwrap();
    assert_eq!(ra.per_stage_accuracy, rb.per_stage_accuracy);
    assert_eq!(ra.til_matrix, rb.til_matrix);

    // crash after stage 1: drop later stages and their manifest entries, then rerun
    let run = seed_dir(&cb, 0);
    let mut manifest = read_manifest(&run).unwrap().unwrap();
    manifest.tasks.truncate(1);
    write_manifest(&run, &manifest).unwrap();
    for s in 2..=3 {
        fs::remove_dir_all(stage_dir(&run, s)).unwrap();
    }
    fs::remove_file(run.join(REPORT_JSON)).unwrap();
    let resumed = run_seed(&cb.for_seed(0), &inputs, &run).unwrap();
    assert_eq!(resumed.per_stage_accuracy, ra.per_stage_accuracy);
    assert_eq!(resumed.til_matrix, ra.til_matrix);
    assert_eq!(resumed.module_of_task, ra.module_of_task);
}

#[test]
fn checkpoints_restore_the_trained_session() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path()).for_seed(0);
    cfg.train.reuse_beta = Some(5.0);
    let inputs = inputs(6);
    let run = dir.path().join("run");
    let manifest = train_stream(&cfg, &inputs, &run).unwrap();
    assert_eq!(manifest.stages_completed(), 3);
    assert!(manifest.tasks.iter().skip(1).all(|t| t.reuse.as_ref().unwrap().reused), "large beta should reuse");

    // the same stream trained in memory
    let stream = pam::harness::task_stream(&cfg, &inputs.train).unwrap();
    let mut state = SessionState::new(inputs.backbone.clone()).unwrap();
    for classes in &stream {
        let idx = pam_core::stream::indices_for(&inputs.train.labels, classes);
        let images = pam::data::to_tensor(&inputs.train, &idx, &cfg.data.normalization, 32).unwrap();
        let labels = idx.iter().map(|&i| inputs.train.labels[i]).collect();
        state.train_task(&TaskData::new(images, labels).unwrap(), &cfg.train).unwrap();
    }
    let loaded = load_session(&run, &manifest, 3, SessionState::new(inputs.backbone.clone()).unwrap()).unwrap();
    assert_eq!(loaded.modules, state.modules);
    assert_eq!(loaded.classifier, state.classifier);
    assert_eq!(loaded.centroids, state.centroids);
    assert_eq!(loaded.tasks, state.tasks);
}

#[test]
fn mismatched_configuration_refuses_to_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path()).for_seed(0);
    let inputs = inputs(4);
    let run = dir.path().join("run");
    train_stream(&cfg, &inputs, &run).unwrap();
    let mut other = cfg.clone();
    other.train.learning_rate = 0.5;
    assert!(matches!(train_stream(&other, &inputs, &run), Err(Error::Config(_))));

    let mut tampered = inputs.clone();
    tampered.weights.sha256 = "f".repeat(64);
    assert!(matches!(train_stream(&cfg, &tampered, &run), Err(Error::Ingestion(_))));
}

#[test]
fn seed_statistics_match_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.run.seeds = vec![0, 1, 2];
    let (reports, summary) = run_experiment(&cfg, &inputs(4)).unwrap();
    let finals: Vec<f64> = reports.iter().map(|r| r.final_accuracy).collect();
    let mean = finals.iter().sum::<f64>() / 3.0;
    let std = (finals.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((summary.final_accuracy.mean - mean).abs() <= 1e-9);
    assert!((summary.final_accuracy.std - std).abs() <= 1e-9);
    // seeds permute the class order
    assert_ne!(reports[0].stage_classes, reports[1].stage_classes);
}

#[test]
fn single_arm_sweep_matches_the_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let inputs = inputs(4);
    let (reports, _) = run_experiment(&cfg, &inputs).unwrap();
    let sweep = run_ablation(&cfg, &inputs, &[AblationAxis::Magnitude(vec![cfg.train.prune_magnitude])]).unwrap();
    assert_eq!(sweep.arms.len(), 1);
    let arm = RunReport::load(&sweep.arms[0].reports[0]).unwrap();
    assert_eq!(arm.per_stage_accuracy, reports[0].per_stage_accuracy);

    let dup = [AblationAxis::Beta(vec![0.7]), AblationAxis::Beta(vec![0.75])];
    assert!(matches!(run_ablation(&cfg, &inputs, &dup), Err(Error::Config(_))));
}

#[test]
fn ablation_axes_parse() {
    assert_eq!(AblationAxis::parse("magnitude").unwrap(), AblationAxis::Magnitude(vec![0.95, 0.96, 0.97, 0.98]));
    assert_eq!(AblationAxis::parse("prune_epoch=1, 10").unwrap(), AblationAxis::PruneEpoch(vec![1, 10]));
    assert!(AblationAxis::parse("strategy=confidence,bogus").is_err());
    assert!(AblationAxis::parse("depth").is_err());
    let cfg = RunConfig::default();
    let arms = AblationAxis::parse("beta=0.7,0.77").unwrap().arms(&cfg);
    assert_eq!(arms.len(), 2);
    assert_eq!(arms[1].1.train.reuse_beta, Some(0.77));
}
