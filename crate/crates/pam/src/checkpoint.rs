//! Per-stage checkpoints and the session manifest.
//!
//! ```text
//! <run>/session.json
//! <run>/stage_<b>/module.bin       module tensors after stage b
//! <run>/stage_<b>/plan.txt         pruning plan of that module
//! <run>/stage_<b>/classifier.bin   all classifier rows after stage b
//! <run>/stage_<b>/centroid.bin     extractor centroid of task b
//! <run>/stage_<b>/log.jsonl        training records
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pam_core::model::{AdaptationModule, UnifiedClassifier};
use pam_core::pruning::{apply_plan, compact};
use pam_core::trainer::{ReuseDecision, SessionState, TaskRecord, TrainLog};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::plan_text::{plan_from_text, plan_to_text};
use crate::weights::{read_tensors, write_tensors, WeightsManifest};

pub const SESSION_FILE: &str = "session.json";
const UNPRUNED: &str = "unpruned";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    /// 1-based stage that introduced the task.
    pub stage: usize,
    pub module: usize,
    pub classes: Vec<u32>,
    pub reuse: Option<ReuseDecision>,
    /// Training time of the session.
    pub seconds: f64,
}

/// Task-to-module mapping plus what is needed to rebuild the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub config_hash: String,
    pub variant: String,
    pub weights: WeightsManifest,
    pub tasks: Vec<TaskEntry>,
}

impl SessionManifest {
    pub fn stages_completed(&self) -> usize {
        self.tasks.len()
    }
}

pub fn stage_dir(run: &Path, stage: usize) -> PathBuf {
    run.join(format!("stage_{stage}"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_manifest(run: &Path, manifest: &SessionManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    write_atomic(&run.join(SESSION_FILE), text.as_bytes())
}

pub fn read_manifest(run: &Path) -> Result<Option<SessionManifest>> {
    let path = run.join(SESSION_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

/// Writes everything stage `stage` produced. `module` is the index of the module it trained.
pub fn save_stage(run: &Path, stage: usize, state: &SessionState, module: usize, log: &TrainLog) -> Result<()> {
    let dir = stage_dir(run, stage);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let m = &state.modules[module];

    let mut meta = BTreeMap::new();
    meta.insert("module".to_string(), module.to_string());
    meta.insert("task_id".to_string(), m.task_id.to_string());
    meta.insert("compacted".to_string(), m.is_compacted().to_string());
    let tensors = m.tensors();
    write_tensors(&dir.join("module.bin"), tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data)), &meta)?;

    let plan = match m.plan() {
        Some(p) => plan_to_text(p),
        None => format!("{UNPRUNED}\n"),
    };
    fs::write(dir.join("plan.txt"), plan).map_err(io_err(dir.join("plan.txt")))?;

    let c = &state.classifier;
    let mut meta = BTreeMap::new();
    meta.insert("labels".to_string(), serde_json::to_string(c.labels()).expect("vec"));
    meta.insert("row_task".to_string(), serde_json::to_string(c.row_task()).expect("vec"));
    meta.insert("trainable".to_string(), serde_json::to_string(c.trainable()).expect("vec"));
    let wshape = [c.rows(), c.dim()];
    let bshape = [c.rows()];
    write_tensors(
        &dir.join("classifier.bin"),
        [("weight", &wshape[..], c.weight.value.as_slice()), ("bias", &bshape[..], c.bias.value.as_slice())],
        &meta,
    )?;

    let centroid = &state.centroids[stage - 1];
    let shape = [centroid.len()];
    write_tensors(&dir.join("centroid.bin"), [("centroid", &shape[..], centroid.as_slice())], &BTreeMap::new())?;

    write_jsonl(&dir.join("log.jsonl"), &log.records)
}

pub fn read_plan(path: &Path) -> Result<Option<pam_core::pruning::PruningPlan>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim() == UNPRUNED {
        return Ok(None);
    }
    plan_from_text(&text).map(Some)
}

fn meta<'a>(m: &'a BTreeMap<String, String>, key: &str, file: &Path) -> Result<&'a str> {
    m.get(key).map(String::as_str).ok_or_else(|| Error::Ingestion(format!("{}: missing metadata '{key}'", file.display())))
}

fn parse_meta<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str, file: &Path) -> Result<T> {
    meta(m, key, file)?.parse().map_err(|_| Error::Ingestion(format!("{}: bad metadata '{key}'", file.display())))
}

fn json_meta<T: for<'de> Deserialize<'de>>(m: &BTreeMap<String, String>, key: &str, file: &Path) -> Result<T> {
    serde_json::from_str(meta(m, key, file)?).map_err(|e| Error::Ingestion(format!("{}: metadata '{key}': {e}", file.display())))
}

/// Rebuilds the frozen module stored in a stage directory from the dense template.
pub fn load_module(dir: &Path, template: &AdaptationModule) -> Result<(usize, AdaptationModule)> {
    let path = dir.join("module.bin");
    let (tensors, m) = read_tensors(&path)?;
    let index: usize = parse_meta(&m, "module", &path)?;
    let compacted: bool = parse_meta(&m, "compacted", &path)?;
    let mut module = template.clone();
    module.task_id = parse_meta(&m, "task_id", &path)?;
    if let Some(plan) = read_plan(&dir.join("plan.txt"))? {
        apply_plan(&mut module, &plan)?;
        if compacted {
            module = compact(&module)?;
        }
    }
    for slot in module.tensors_mut() {
        let t = tensors
            .iter()
            .find(|t| t.name == slot.name)
            .ok_or_else(|| Error::Ingestion(format!("{}: missing tensor '{}'", path.display(), slot.name)))?;
        if t.shape != slot.shape {
            return Err(Error::Ingestion(format!(
                "{}: tensor '{}' has shape {:?}, expected {:?}",
                path.display(),
                t.name,
                t.shape,
                slot.shape
            )));
        }
        slot.data.copy_from_slice(&t.data);
    }
    module.freeze();
    Ok((index, module))
}

pub fn load_classifier(dir: &Path) -> Result<UnifiedClassifier> {
    let path = dir.join("classifier.bin");
    let (tensors, m) = read_tensors(&path)?;
    let get = |name: &str| {
        tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Ingestion(format!("{}: missing '{name}'", path.display())))
    };
    let (w, b) = (get("weight")?, get("bias")?);
    let dim = *w.shape.get(1).ok_or_else(|| Error::Ingestion(format!("{}: weight must be 2-D", path.display())))?;
    Ok(UnifiedClassifier::from_parts(
        dim,
        w.data.clone(),
        b.data.clone(),
        json_meta(&m, "labels", &path)?,
        json_meta(&m, "row_task", &path)?,
        json_meta(&m, "trainable", &path)?,
    )?)
}

pub fn load_centroid(dir: &Path) -> Result<Vec<f32>> {
    let path = dir.join("centroid.bin");
    let (tensors, _) = read_tensors(&path)?;
    tensors
        .into_iter()
        .find(|t| t.name == "centroid")
        .map(|t| t.data)
        .ok_or_else(|| Error::Ingestion(format!("{}: missing 'centroid'", path.display())))
}

/// Session state as it was right after `stages` stages, rebuilt on top of `fresh`.
pub fn load_session(run: &Path, manifest: &SessionManifest, stages: usize, mut fresh: SessionState) -> Result<SessionState> {
    if stages > manifest.stages_completed() {
        return Err(Error::Ingestion(format!(
            "{} holds {} completed stages, {stages} requested",
            run.display(),
            manifest.stages_completed()
        )));
    }
    for (b, entry) in manifest.tasks.iter().take(stages).enumerate() {
        let dir = stage_dir(run, b + 1);
        let (index, module) = load_module(&dir, &fresh.template)?;
        if index != entry.module {
            return Err(Error::Ingestion(format!("{}: module index {index} disagrees with the manifest", dir.display())));
        }
        match index.cmp(&fresh.modules.len()) {
            std::cmp::Ordering::Less => fresh.modules[index] = module,
            std::cmp::Ordering::Equal => fresh.modules.push(module),
            std::cmp::Ordering::Greater => {
                return Err(Error::Ingestion(format!("{}: module {index} appears before its predecessors", dir.display())))
            }
        }
        fresh.centroids.push(load_centroid(&dir)?);
        fresh.tasks.push(TaskRecord { labels: entry.classes.clone(), module: entry.module, reuse: entry.reuse.clone() });
    }
    if stages > 0 {
        fresh.classifier = load_classifier(&stage_dir(run, stages))?;
    }
    Ok(fresh)
}
