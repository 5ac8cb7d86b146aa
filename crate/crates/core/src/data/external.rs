//! Directory dataset format.
//!
//! `manifest.json` describes geometry and tasks; every split file holds
//! `N·H·W·C` u8 pixels ordered `(sample, row, col, channel)` followed by `N`
//! little-endian u16 labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Geometry, Image, Sample, SplitBenchmark, TaskSplit};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub labels: Vec<u16>,
    pub train_file: String,
    pub test_file: String,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub dtype: String,
    pub tasks: Vec<TaskEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<TaskEntry>,
    /// File name → hex SHA-256.
    pub checksums: BTreeMap<String, String>,
}

fn encode_split(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(s.image.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    for s in samples {
        out.extend_from_slice(&s.label.to_le_bytes());
    }
    out
}

fn decode_split(bytes: &[u8], count: usize, geometry: Geometry, file: &str) -> Result<Vec<Sample>> {
    let per = geometry.numel();
    if bytes.len() != count * (per + 2) {
        return Err(Error::Data(format!(
            "{file}: {} bytes but {count} samples of {per} pixels need {}",
            bytes.len(),
            count * (per + 2)
        )));
    }
    let (pix, labels) = bytes.split_at(count * per);
    Ok(pix
        .chunks_exact(per)
        .zip(labels.chunks_exact(2))
        .map(|(p, l)| Sample {
            image: Image { geometry, pixels: p.iter().map(|&b| b as f32 / 255.0).collect() },
            label: u16::from_le_bytes([l[0], l[1]]),
        })
        .collect())
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bench` into `dir` in the directory dataset format.
pub fn export_benchmark(bench: &SplitBenchmark, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checksums = BTreeMap::new();
    let mut write_split = |name: &str, split: &TaskSplit| -> Result<TaskEntry> {
        let mut entry = |kind: &str, samples: &[Sample]| -> Result<String> {
            let file = format!("{name}_{kind}.bin");
            let bytes = encode_split(samples);
            checksums.insert(file.clone(), sha_hex(&bytes));
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(file)
        };
        Ok(TaskEntry {
            labels: split.labels.clone(),
            train_file: entry("train", &split.train)?,
            test_file: entry("test", &split.test)?,
            counts: SplitCounts { train: split.train.len(), test: split.test.len() },
        })
    };
    let tasks = bench
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| write_split(&format!("task_{i}"), t))
        .collect::<Result<Vec<_>>>()?;
    let pretrain = bench.pretrain.as_ref().map(|p| write_split("pretrain", p)).transpose()?;
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        height: bench.geometry.height,
        width: bench.geometry.width,
        channels: bench.geometry.channels,
        dtype: "u8".into(),
        tasks,
        pretrain,
        checksums,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_entry(dir: &Path, m: &DatasetManifest, entry: &TaskEntry, geometry: Geometry) -> Result<TaskSplit> {
    let load = |file: &str, count: usize| -> Result<Vec<Sample>> {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = m
            .checksums
            .get(file)
            .ok_or_else(|| Error::Data(format!("no checksum listed for {file}")))?;
        if &sha_hex(&bytes) != expected {
            return Err(Error::Data(format!("{file}: checksum mismatch")));
        }
        decode_split(&bytes, count, geometry, file)
    };
    let mut labels = entry.labels.clone();
    labels.sort_unstable();
    let split = TaskSplit {
        labels,
        train: load(&entry.train_file, entry.counts.train)?,
        test: load(&entry.test_file, entry.counts.test)?,
    };
    if split.labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data(format!("duplicate label inside {}", entry.train_file)));
    }
    Ok(split)
}

/// Regroups every continual class, in sorted label order, into tasks of
/// `classes_per_task` classes.
fn regroup(tasks: Vec<TaskSplit>, classes_per_task: usize) -> Result<Vec<TaskSplit>> {
    let labels: BTreeSet<u16> = tasks.iter().flat_map(|t| t.labels.iter().copied()).collect();
    if classes_per_task == 0 || !labels.len().is_multiple_of(classes_per_task) {
        return Err(Error::Data(format!(
            "{} classes cannot be split into tasks of {classes_per_task}",
            labels.len()
        )));
    }
    let labels: Vec<u16> = labels.into_iter().collect();
    let (train, test): (Vec<Sample>, Vec<Sample>) = tasks.into_iter().fold((vec![], vec![]), |mut acc, t| {
        acc.0.extend(t.train);
        acc.1.extend(t.test);
        acc
    });
    Ok(labels
        .chunks(classes_per_task)
        .map(|chunk| {
            let has = |s: &&Sample| chunk.contains(&s.label);
            TaskSplit {
                labels: chunk.to_vec(),
                train: train.iter().filter(has).cloned().collect(),
                test: test.iter().filter(has).cloned().collect(),
            }
        })
        .collect())
}

/// Loads a dataset directory; `classes_per_task` regroups classes by sorted
/// label order, `None` keeps the manifest's task split.
pub fn load_external_dataset(manifest_path: &Path, classes_per_task: Option<usize>) -> Result<SplitBenchmark> {
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported dataset version {}", m.version)));
    }
    if m.dtype != "u8" {
        return Err(Error::Data(format!("unsupported dtype {}", m.dtype)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let geometry = Geometry { height: m.height, width: m.width, channels: m.channels };
    let mut tasks = m.tasks.iter().map(|e| read_entry(dir, &m, e, geometry)).collect::<Result<Vec<_>>>()?;
    let pretrain = m.pretrain.as_ref().map(|e| read_entry(dir, &m, e, geometry)).transpose()?;
    let bench_before = SplitBenchmark { geometry, tasks: tasks.clone(), pretrain: pretrain.clone() };
    bench_before.validate()?;
    if let Some(c) = classes_per_task {
        tasks = regroup(tasks, c)?;
    }
    let bench = SplitBenchmark { geometry, tasks, pretrain };
    bench.validate()?;
    Ok(bench)
}
