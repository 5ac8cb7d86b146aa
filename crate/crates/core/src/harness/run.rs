//! Run directories: training, re-evaluation and checksum verification.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Precision};
use crate::backbone::{pretrain_backbone, BackboneParams, PretrainReport};
use crate::data::SplitBenchmark;
use crate::diffcore::blob::{read_payload, write_payload, BlobMeta};
use crate::diffcore::Scalar;
use crate::error::{Error, Result};
use crate::losses::{losses_to_csv, ClassificationClassifier, LinearHead};
use crate::metrics::{average_accuracy, summarize, AccuracyMatrix, MetricsSummary};
use crate::prompts::TaskState;
use crate::trainer::{
    evaluate_seen, predictions_to_csv, run_sequence, IntegrityLog, TaskDiagnostics, TaskEval, TrainConfig,
};

pub const RUNNING_MARKER: &str = "RUNNING";
pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ORACLE_METRICS_FILE: &str = "metrics_oracle.json";
pub const ACC_FILE: &str = "acc_matrix.json";
pub const EVALS_FILE: &str = "evals.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const ORACLE_PREDICTIONS_FILE: &str = "predictions_oracle.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const UPPER_BOUND_FILE: &str = "upper_bound.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CLASSIFIER_FILE: &str = "classifier.json";
pub const BACKBONE_DIR: &str = "backbone";

pub fn task_dir_name(i: usize) -> String {
    format!("task_{i}")
}

/// Identity of a run plus checksums of every deterministic artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub precision: Precision,
    pub tasks: usize,
    /// Relative path → sha256 of the file bytes.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalsFile {
    /// Per training step, the evaluation of every seen task.
    pub rows: Vec<Vec<TaskEval>>,
    /// Accuracy with the true task's prompts, same layout as the accuracy matrix.
    pub oracle_acc: AccuracyMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub pretrain: Option<PretrainReport>,
    pub tasks: Vec<TaskDiagnostics>,
    pub integrity: IntegrityLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBoundFile {
    pub average_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingFile {
    pub pretrain_seconds: f64,
    pub task_seconds: Vec<f64>,
    pub upper_bound_seconds: Option<f64>,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifierManifest {
    classes: usize,
    dim: usize,
    tensors: Vec<BlobMeta>,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(v)? + "\n")
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::checkpoint(path, e.to_string()))
}

pub fn save_classifier<S: Scalar>(cc: &ClassificationClassifier<S>, dir: &Path) -> Result<()> {
    let tensors = vec![
        write_payload(dir, "classifier_weight", &cc.weight)?,
        write_payload(dir, "classifier_bias", &cc.bias)?,
    ];
    write_json(&dir.join(CLASSIFIER_FILE), &ClassifierManifest { classes: cc.classes(), dim: cc.dim(), tensors })
}

pub fn load_classifier<S: Scalar>(dir: &Path) -> Result<ClassificationClassifier<S>> {
    let path = dir.join(CLASSIFIER_FILE);
    let m: ClassifierManifest = read_json(&path)?;
    let [w, b] = m.tensors.as_slice() else {
        return Err(Error::checkpoint(&path, "expected weight and bias"));
    };
    let head = LinearHead { weight: read_payload(dir, w)?, bias: read_payload(dir, b)? };
    if head.weight.shape() != [m.classes, m.dim] || head.bias.shape() != [m.classes] {
        return Err(Error::checkpoint(&path, "classifier shapes disagree with the manifest"));
    }
    Ok(head)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every file under `dir` except the run record, the marker and timings,
/// keyed by `/`-separated relative path.
fn artifact_checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
                continue;
            }
            let rel = p.strip_prefix(root).expect("under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if [RUN_FILE, RUNNING_MARKER, TIMING_FILE].contains(&key.as_str()) {
                continue;
            }
            out.insert(key, sha256_file(&p)?);
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn refresh_run_info(dir: &Path, info: &mut RunInfo) -> Result<()> {
    info.checksums = artifact_checksums(dir)?;
    write_json(&dir.join(RUN_FILE), info)
}

/// Checks every recorded checksum; returns the paths that disagree or
/// are missing.
pub fn verify_run(dir: &Path) -> Result<Vec<String>> {
    let info: RunInfo = read_json(&dir.join(RUN_FILE))?;
    let mut bad = Vec::new();
    for (rel, sum) in &info.checksums {
        let p = dir.join(rel);
        if !p.is_file() || sha256_file(&p)? != *sum {
            bad.push(rel.clone());
        }
    }
    Ok(bad)
}

/// What `train` reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub metrics: MetricsSummary,
    pub seconds: f64,
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let occupied = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if occupied {
            if !force {
                return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out.display())));
            }
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn continual_labels(bench: &SplitBenchmark) -> Vec<u16> {
    bench.tasks.iter().flat_map(|t| t.labels.iter().copied()).collect()
}

fn obtain_backbone<S: Scalar>(
    cfg: &ExperimentConfig,
    bench: &SplitBenchmark,
    seed: u64,
) -> Result<(BackboneParams<S>, Option<PretrainReport>)> {
    if let Some(dir) = &cfg.backbone_checkpoint {
        let bb = BackboneParams::<S>::load(dir)?;
        if bb.config != cfg.backbone {
            return Err(Error::Config(format!("backbone checkpoint {} has a different architecture", dir.display())));
        }
        bb.verify_frozen()?;
        return Ok((bb, None));
    }
    let split = bench
        .pretrain
        .as_ref()
        .ok_or_else(|| Error::Config("the dataset has no pretraining split and no backbone checkpoint is set".into()))?;
    let bb = BackboneParams::<S>::init(&cfg.backbone, seed)?;
    let (bb, report) = pretrain_backbone(bb, split, &continual_labels(bench), &cfg.pretrain, seed)?;
    Ok((bb, Some(report)))
}

fn train_typed<S: Scalar>(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<TrainSummary> {
    let start = Instant::now();
    let bench = cfg.benchmark(seed)?;
    bench.validate()?;
    write_file(&out.join(CONFIG_FILE), cfg.to_json()?)?;

    let (bb, pretrain) = obtain_backbone::<S>(cfg, &bench, seed)?;
    let pretrain_seconds = start.elapsed().as_secs_f64();
    if let Some(r) = &pretrain {
        info!("backbone pretrained: held-out accuracy {:?} (chance {:.2})", r.heldout_accuracy, r.chance);
    }
    bb.save(&out.join(BACKBONE_DIR))?;

    let outcome = run_sequence(&bb, &bench, &cfg.train, &cfg.prompts, seed)?;
    for state in &outcome.bank.states {
        state.save(&out.join(task_dir_name(state.task_index)))?;
    }
    save_classifier(&outcome.classifier, out)?;
    write_file(&out.join(LOSSES_FILE), losses_to_csv(&outcome.losses))?;
    write_json(&out.join(ACC_FILE), &outcome.acc)?;
    write_json(&out.join(EVALS_FILE), &EvalsFile { rows: outcome.evals.clone(), oracle_acc: outcome.oracle_acc.clone() })?;
    write_file(&out.join(PREDICTIONS_FILE), predictions_to_csv(&outcome.predictions))?;
    write_json(
        &out.join(DIAGNOSTICS_FILE),
        &DiagnosticsFile { pretrain, tasks: outcome.diagnostics.clone(), integrity: outcome.integrity.clone() },
    )?;

    let mut upper = None;
    let mut upper_seconds = None;
    if cfg.upper_bound {
        let t = Instant::now();
        let merged = bench.merged();
        let joint = run_sequence(&bb, &merged, &cfg.train, &cfg.prompts, seed)?;
        let a_u = average_accuracy(&joint.acc)?;
        info!("joint upper bound: {a_u:.4}");
        write_json(&out.join(UPPER_BOUND_FILE), &UpperBoundFile { average_accuracy: a_u })?;
        upper = Some(a_u);
        upper_seconds = Some(t.elapsed().as_secs_f64());
    }

    let metrics = summarize(&outcome.acc, upper)?;
    write_json(&out.join(METRICS_FILE), &metrics)?;
    let seconds = start.elapsed().as_secs_f64();
    write_json(
        &out.join(TIMING_FILE),
        &TimingFile { pretrain_seconds, task_seconds: outcome.task_seconds, upper_bound_seconds: upper_seconds, total_seconds: seconds },
    )?;
    let mut info = RunInfo { seed, precision: cfg.precision, tasks: bench.tasks.len(), checksums: BTreeMap::new() };
    refresh_run_info(out, &mut info)?;
    Ok(TrainSummary { dir: out.to_path_buf(), metrics, seconds })
}

/// Trains one seed into `out`. A `RUNNING` marker stays behind if the run
/// does not finish.
pub fn train(cfg: &ExperimentConfig, seed: u64, out: &Path, force: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    prepare_out_dir(out, force)?;
    let marker = out.join(RUNNING_MARKER);
    write_file(&marker, format!("seed {seed}\n"))?;
    let summary = match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, seed, out)?,
        Precision::F64 => train_typed::<f64>(cfg, seed, out)?,
    };
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(summary)
}

/// A completed run loaded back from disk.
pub struct LoadedRun<S: Scalar> {
    pub config: ExperimentConfig,
    pub info: RunInfo,
    pub bench: SplitBenchmark,
    pub backbone: BackboneParams<S>,
    pub states: Vec<TaskState<S>>,
    pub classifier: ClassificationClassifier<S>,
}

pub fn load_run<S: Scalar>(dir: &Path) -> Result<LoadedRun<S>> {
    if dir.join(RUNNING_MARKER).exists() {
        return Err(Error::checkpoint(dir, "run did not finish (RUNNING marker present)"));
    }
    let bad = verify_run(dir)?;
    if !bad.is_empty() {
        return Err(Error::checkpoint(dir, format!("checksum mismatch or missing: {}", bad.join(", "))));
    }
    let config: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
    config.validate()?;
    let info: RunInfo = read_json(&dir.join(RUN_FILE))?;
    let bench = config.benchmark(info.seed)?;
    let backbone = BackboneParams::<S>::load(&dir.join(BACKBONE_DIR))?;
    let layout = config.prompts.layout(config.backbone.seq_len(), config.backbone.dim);
    let states = if config.train.mode.prompted() {
        (0..info.tasks).map(|i| TaskState::load(&dir.join(task_dir_name(i)), &layout)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let classifier = load_classifier(dir)?;
    Ok(LoadedRun { config, info, bench, backbone, states, classifier })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub final_row: Vec<f64>,
    /// Whether the recomputed final row equals the stored one.
    pub reproduces_stored: bool,
    pub metrics: MetricsSummary,
}

fn eval_typed<S: Scalar>(dir: &Path, oracle: bool) -> Result<EvalSummary> {
    let run = load_run::<S>(dir)?;
    let last = run.info.tasks.checked_sub(1).ok_or_else(|| Error::checkpoint(dir, "run has no tasks"))?;
    let (evals, rows) = evaluate_seen(
        &run.backbone,
        run.config.train.mode,
        &run.states,
        &run.classifier,
        &run.bench,
        last,
        &run.config.train.inference,
        oracle,
    )?;
    let stored = if oracle {
        read_json::<EvalsFile>(&dir.join(EVALS_FILE))?.oracle_acc
    } else {
        read_json::<AccuracyMatrix>(&dir.join(ACC_FILE))?
    };
    let final_row: Vec<f64> =
        evals.iter().map(|e| if oracle { e.oracle_accuracy } else { e.accuracy }).collect();
    let reproduces_stored = stored.final_row() == Some(final_row.as_slice());
    let mut refreshed = stored.clone();
    *refreshed.rows.last_mut().expect("non-empty") = final_row.clone();
    refreshed.validate()?;
    let upper_path = dir.join(UPPER_BOUND_FILE);
    let upper =
        if upper_path.exists() { Some(read_json::<UpperBoundFile>(&upper_path)?.average_accuracy) } else { None };
    let metrics = summarize(&refreshed, upper)?;
    let (pred_file, metrics_file) =
        if oracle { (ORACLE_PREDICTIONS_FILE, ORACLE_METRICS_FILE) } else { (PREDICTIONS_FILE, METRICS_FILE) };
    write_file(&dir.join(pred_file), predictions_to_csv(&rows))?;
    write_json(&dir.join(metrics_file), &metrics)?;
    let mut info = run.info;
    refresh_run_info(dir, &mut info)?;
    Ok(EvalSummary { final_row, reproduces_stored, metrics })
}

/// Re-runs inference over every test split. With `oracle` the true task's
/// prompts are used instead of the predicted task's.
pub fn eval(dir: &Path, oracle: bool) -> Result<EvalSummary> {
    let info: RunInfo = read_json(&dir.join(RUN_FILE))?;
    match info.precision {
        Precision::F32 => eval_typed::<f32>(dir, oracle),
        Precision::F64 => eval_typed::<f64>(dir, oracle),
    }
}

/// The training config stored in a run, for reports.
pub fn run_train_config(dir: &Path) -> Result<TrainConfig> {
    Ok(read_json::<ExperimentConfig>(&dir.join(CONFIG_FILE))?.train)
}
