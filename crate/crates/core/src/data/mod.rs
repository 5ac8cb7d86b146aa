//! Split-task image benchmarks: synthetic generation, augmentation, and the
//! on-disk dataset format.

mod augment;
mod external;
mod synthetic;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use augment::{augment_pair, AugmentConfig};
pub use external::{export_benchmark, load_external_dataset, DatasetManifest};
pub use synthetic::{class_prototypes, generate_synthetic_benchmark, SyntheticSpec};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Row-major `(row, col, channel)` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub geometry: Geometry,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(geometry: Geometry, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != geometry.numel() {
            return Err(Error::Data(format!(
                "{} pixels for geometry {geometry:?}",
                pixels.len()
            )));
        }
        Ok(Self { geometry, pixels })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize, ch: usize) -> f32 {
        let g = self.geometry;
        self.pixels[(r * g.width + c) * g.channels + ch]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Dataset label (not yet mapped to a classifier index).
    pub label: u16,
}

/// One task: its label set plus train and test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    /// Sorted; position in this list is the task-local class index.
    pub labels: Vec<u16>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskSplit {
    pub fn local_index(&self, label: u16) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBenchmark {
    pub geometry: Geometry,
    pub tasks: Vec<TaskSplit>,
    /// Classes reserved for pretraining the backbone; disjoint from every task.
    pub pretrain: Option<TaskSplit>,
}

impl SplitBenchmark {
    /// First global class index of each task, plus the total as a last entry.
    pub fn class_offsets(&self) -> Vec<usize> {
        let mut offsets = vec![0];
        for t in &self.tasks {
            offsets.push(offsets.last().unwrap() + t.num_classes());
        }
        offsets
    }

    /// Global classifier index of `label` inside task `task`.
    pub fn global_class(&self, task: usize, label: u16) -> Option<usize> {
        let local = self.tasks.get(task)?.local_index(label)?;
        Some(self.class_offsets()[task] + local)
    }

    /// Enforces label-set disjointness, label membership, and geometry.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Data("benchmark has no tasks".into()));
        }
        let mut seen = BTreeSet::new();
        let splits = self.tasks.iter().enumerate().map(|(i, t)| (format!("task {i}"), t));
        let all = splits.chain(self.pretrain.iter().map(|t| ("pretrain split".to_string(), t)));
        for (name, split) in all {
            if split.labels.is_empty() {
                return Err(Error::Data(format!("{name} has no classes")));
            }
            if split.labels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(format!("{name} labels are not sorted and unique")));
            }
            for &l in &split.labels {
                if !seen.insert(l) {
                    return Err(Error::Data(format!(
                        "label {l} of {name} already belongs to another split; label sets must be disjoint"
                    )));
                }
            }
            for s in split.train.iter().chain(&split.test) {
                if split.local_index(s.label).is_none() {
                    return Err(Error::Data(format!("{name} holds a sample with foreign label {}", s.label)));
                }
                if s.image.geometry != self.geometry {
                    return Err(Error::Data(format!(
                        "{name} holds a {:?} image in a {:?} benchmark",
                        s.image.geometry, self.geometry
                    )));
                }
            }
            if split.train.is_empty() {
                return Err(Error::Data(format!("{name} has no training samples")));
            }
        }
        Ok(())
    }

    /// All tasks merged into one, for upper-bound joint training.
    pub fn merged(&self) -> SplitBenchmark {
        let mut labels: Vec<u16> = self.tasks.iter().flat_map(|t| t.labels.clone()).collect();
        labels.sort_unstable();
        let train = self.tasks.iter().flat_map(|t| t.train.clone()).collect();
        let test = self.tasks.iter().flat_map(|t| t.test.clone()).collect();
        SplitBenchmark {
            geometry: self.geometry,
            tasks: vec![TaskSplit { labels, train, test }],
            pretrain: self.pretrain.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: &[&[u16]]) -> SplitBenchmark {
        let geometry = Geometry { height: 2, width: 2, channels: 1 };
        let img = Image::new(geometry, vec![0.0; 4]).unwrap();
        let tasks = labels
            .iter()
            .map(|ls| TaskSplit {
                labels: ls.to_vec(),
                train: ls.iter().map(|&l| Sample { image: img.clone(), label: l }).collect(),
                test: vec![],
            })
            .collect();
        SplitBenchmark { geometry, tasks, pretrain: None }
    }

    #[test]
    fn overlapping_labels_are_rejected() {
        assert!(tiny(&[&[0, 1], &[2, 3]]).validate().is_ok());
        let err = tiny(&[&[0, 1], &[1, 3]]).validate().unwrap_err();
        assert!(err.to_string().contains("disjoint"));
    }

    #[test]
    fn global_indices_follow_task_order() {
        let b = tiny(&[&[5, 9], &[1, 2, 3]]);
        assert_eq!(b.class_offsets(), vec![0, 2, 5]);
        assert_eq!(b.global_class(0, 9), Some(1));
        assert_eq!(b.global_class(1, 1), Some(2));
        assert_eq!(b.global_class(1, 9), None);
    }
}
