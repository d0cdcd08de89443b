use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pam::config::RunConfig;
use pam::harness::{ablation_dir, run_ablation, run_experiment, rescore_experiment, AblationAxis, AblationReport, Inputs, RunReport, SeedSummary};
use pam::pretrain::{pretrain_to, PretrainSpec};
use pam::report::{render_ablation, render_run, run_table};
use pam::synth::{generate, SynthSpec};
use pam_core::backbone::BackboneVariant;
use pam_core::router::Strategy;

#[derive(Parser)]
#[command(name = "pam", version, about = "Pruned adaptation modules for class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one stream per configured seed (resumes from checkpoints).
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Override run.seeds.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Re-route and re-score existing checkpoints.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        ensemble_weight: Option<f32>,
        #[arg(long)]
        test_batch_size: Option<usize>,
    },
    /// Sweep one or more axes: `name` for the standard values or `name=v1,v2`.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        /// prune_epoch, magnitude, strategy, ensemble_w, init or beta; all when omitted.
        #[arg(long = "axis")]
        axes: Vec<String>,
    },
    /// Print tables and draw plots for every report found under the given paths.
    Report { paths: Vec<PathBuf> },
    /// Write the synthetic CIFAR-format corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        namespace: u32,
    },
    /// Train a surrogate backbone on a disjoint synthetic namespace.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "rn-tiny")]
        variant: String,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 300)]
        per_class: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default configuration.
    Config,
}

fn load_config(path: &Path, seeds: &[u64]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if !seeds.is_empty() {
        cfg.run.seeds = seeds.to_vec();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(summary: &SeedSummary) {
    println!(
        "seeds {:?}: average {:.2} ± {:.2}, final {:.2} ± {:.2}, TIL final {:.2}, modules {:.1}",
        summary.seeds,
        summary.average_accuracy.mean,
        summary.average_accuracy.std,
        summary.final_accuracy.mean,
        summary.final_accuracy.std,
        summary.final_til_accuracy.mean,
        summary.module_count.mean
    );
    if let Some(b) = summary.baseline_final_accuracy {
        println!("finetune baseline final {:.2} ± {:.2}", b.mean, b.std);
    }
}

fn find_files(root: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.is_file() {
        if root.file_name().is_some_and(|n| n == name) {
            out.push(root.to_path_buf());
        }
        return Ok(());
    }
    let mut entries: Vec<_> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|n| n == name) {
            out.push(p);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, seeds } => {
            let cfg = load_config(&config, &seeds)?;
            let inputs = Inputs::load(&cfg)?;
            let (reports, summary) = run_experiment(&cfg, &inputs)?;
            for r in &reports {
                println!("seed {}: stage accuracies {:?}", r.seed, r.per_stage_accuracy);
            }
            print_summary(&summary);
        }
        Command::Eval { config, seeds, strategy, ensemble_weight, test_batch_size } => {
            let mut cfg = load_config(&config, &seeds)?;
            if let Some(s) = strategy {
                cfg.eval.strategy = Strategy::parse(&s)?;
            }
            if let Some(w) = ensemble_weight {
                cfg.eval.ensemble_weight = w;
            }
            if let Some(n) = test_batch_size {
                cfg.eval.test_batch_size = n;
            }
            cfg.validate()?;
            let inputs = Inputs::load(&cfg)?;
            let (_, summary) = rescore_experiment(&cfg, &inputs)?;
            print_summary(&summary);
        }
        Command::Ablate { config, axes } => {
            let cfg = load_config(&config, &[])?;
            let axes: Vec<AblationAxis> = if axes.is_empty() {
                AblationAxis::NAMES.iter().map(|n| AblationAxis::standard(n)).collect::<pam::Result<_>>()?
            } else {
                axes.iter().map(|a| AblationAxis::parse(a)).collect::<pam::Result<_>>()?
            };
            let inputs = Inputs::load(&cfg)?;
            let report = run_ablation(&cfg, &inputs, &axes)?;
            for arm in &report.arms {
                println!(
                    "{:<12} {:<16} final {:>6.2} ± {:<5.2} average {:>6.2} modules {:.1}",
                    arm.axis, arm.value, arm.final_accuracy.mean, arm.final_accuracy.std, arm.average_accuracy.mean, arm.module_count.mean
                );
            }
            render_ablation(&report, &ablation_dir(&cfg))?;
        }
        Command::Report { paths } => {
            if paths.is_empty() {
                bail!("give at least one run directory or report file");
            }
            let mut runs = Vec::new();
            let mut ablations = Vec::new();
            for p in &paths {
                find_files(p, pam::harness::REPORT_JSON, &mut runs)?;
                find_files(p, "ablation.json", &mut ablations)?;
            }
            if runs.is_empty() && ablations.is_empty() {
                bail!("no report.json or ablation.json under {paths:?}");
            }
            let mut loaded = Vec::new();
            for path in runs {
                let report = RunReport::load(&path)?;
                let dir = path.parent().unwrap_or(Path::new("."));
                for f in render_run(&report, dir)? {
                    log::info!("wrote {}", f.display());
                }
                loaded.push((dir.to_path_buf(), report));
            }
            print!("{}", run_table(&loaded));
            for path in ablations {
                let report = AblationReport::load(&path)?;
                let dir = path.parent().unwrap_or(Path::new("."));
                for f in render_ablation(&report, dir)? {
                    log::info!("wrote {}", f.display());
                }
                for arm in &report.arms {
                    println!("{:<12} {:<16} final {:>6.2} ± {:.2}", arm.axis, arm.value, arm.final_accuracy.mean, arm.final_accuracy.std);
                }
            }
        }
        Command::Synth { out, classes, train_per_class, test_per_class, seed, namespace } => {
            let spec = SynthSpec { classes, train_per_class, test_per_class, seed, namespace };
            let (train, test) = generate(&spec);
            pam::data::write_cifar10_dir(&out, &train, &test)?;
            println!("wrote {} train and {} test images to {}", train.len(), test.len(), out.display());
        }
        Command::Pretrain { out, variant, classes, per_class, epochs, seed } => {
            let spec = PretrainSpec {
                variant: BackboneVariant::parse(&variant)?,
                classes,
                per_class,
                epochs,
                seed,
                ..PretrainSpec::default()
            };
            let manifest = pretrain_to(&out, &spec)?;
            println!("wrote {} (sha256 {})", out.display(), manifest.sha256);
        }
        Command::Config => print!("{}", RunConfig::default().to_toml()),
    }
    Ok(())
}
