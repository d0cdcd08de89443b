use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pam::harness::{RunReport, REPORT_JSON};

fn pam(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pam"))
        .current_dir(dir)
        .args(args)
        .env_remove("PAM_DATA_ROOT")
        .env_remove("PAM_OUTPUT_ROOT")
        .envs(env.iter().copied())
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn end_to_end_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let default = ok(pam(dir, &["config"], &[]));
    let mut cfg: toml::Table = toml::from_str(&default).unwrap();
    cfg["run"]["name"] = "smoke".into();
    cfg["train"]["epochs"] = 1.into();
    cfg["split"]["increment"] = 2.into();
    cfg["model"]["weights"] = "w/tiny.safetensors".into();
    cfg["data"]["root"] = "missing".into();
    cfg["run"]["output_root"] = "missing".into();
    fs::write(dir.join("c.toml"), toml::to_string(&cfg).unwrap()).unwrap();

    ok(pam(dir, &["synth", "--out", "corpus", "--classes", "4", "--train-per-class", "10", "--test-per-class", "5"], &[]));
    ok(pam(
        dir,
        &["pretrain", "--out", "w/tiny.safetensors", "--classes", "3", "--per-class", "6", "--epochs", "1"],
        &[],
    ));
    assert!(dir.join("w/tiny.safetensors.json").is_file());

    // the configured data root does not exist
    let failed = pam(dir, &["train", "-c", "c.toml"], &[]);
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("PAM_DATA_ROOT"));

    let env = [("PAM_DATA_ROOT", "corpus"), ("PAM_OUTPUT_ROOT", "out")];
    let trained = ok(pam(dir, &["train", "-c", "c.toml"], &env));
    assert!(trained.contains("seeds [0]"), "{trained}");
    let report_path = dir.join("out/smoke/seed_0").join(REPORT_JSON);
    let report = RunReport::load(&report_path).unwrap();
    assert_eq!(report.per_stage_accuracy.len(), 2);
    assert_eq!(report.config_echo.run.output_root, Path::new("out"));

    ok(pam(dir, &["eval", "-c", "c.toml", "--strategy", "distance-pooled"], &env));
    let rescored = RunReport::load(&report_path).unwrap();
    assert_eq!(rescored.training_hash, report.training_hash);
    assert_ne!(rescored.eval_mode, report.eval_mode);

    let bad = pam(dir, &["eval", "-c", "c.toml", "--strategy", "nearest"], &env);
    assert!(!bad.status.success());

    let table = ok(pam(dir, &["report", "out"], &[]));
    assert!(table.contains("stage"), "{table}");
    assert!(dir.join("out/smoke/seed_0/accuracy.svg").is_file());
}
