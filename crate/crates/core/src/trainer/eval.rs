//! Per-task evaluation over every seen task's test split.

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::backbone::BackboneParams;
use crate::data::{Image, SplitBenchmark};
use crate::diffcore::Scalar;
use crate::error::{Error, Result};
use crate::inference::{classify_rep, plain_batch, predict_batch, InferenceOptions};
use crate::losses::ClassificationClassifier;
use crate::prompts::TaskState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: usize,
    pub test_count: usize,
    /// Full test path with predicted task identity.
    pub accuracy: f64,
    /// Same classifier with the true task's prompts.
    pub oracle_accuracy: f64,
    pub task_id_accuracy: f64,
    /// Task identity from promptless queries and naive keys.
    pub naive_task_id_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: usize,
    pub true_global_class: usize,
    pub predicted_task: usize,
    pub predicted_class: usize,
}

pub const PREDICTIONS_CSV_HEADER: &str = "image_id,true_global_class,predicted_task,predicted_class";

pub fn predictions_to_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from(PREDICTIONS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.image_id, r.true_global_class, r.predicted_task, r.predicted_class));
    }
    out
}

fn frac(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Evaluates tasks `0..=upto` with the states trained so far. Image ids
/// count test images in task order; with `oracle_rows` the prediction rows
/// record the true task and the class predicted under its prompts.
pub fn evaluate_seen<S: Scalar>(
    bb: &BackboneParams<S>,
    mode: Mode,
    states: &[TaskState<S>],
    cc: &ClassificationClassifier<S>,
    bench: &SplitBenchmark,
    upto: usize,
    opts: &InferenceOptions,
    oracle_rows: bool,
) -> Result<(Vec<TaskEval>, Vec<PredictionRow>)> {
    if upto >= bench.tasks.len() {
        return Err(Error::InvalidArgument(format!("task {upto} is not in the benchmark")));
    }
    if mode.prompted() && states.len() != upto + 1 {
        return Err(Error::InvalidArgument(format!("{} task states for {} seen tasks", states.len(), upto + 1)));
    }
    let offsets = bench.class_offsets();
    let seen = offsets[upto + 1];
    if cc.classes() != seen {
        return Err(Error::Shape(format!("classifier has {} outputs for {seen} seen classes", cc.classes())));
    }
    let task_of_class = |c: usize| offsets.iter().rposition(|&o| o <= c).unwrap_or(0).min(upto);
    let mut evals = Vec::with_capacity(upto + 1);
    let mut rows = Vec::new();
    let mut image_id = 0;
    for (i, split) in bench.tasks.iter().enumerate().take(upto + 1) {
        let images: Vec<&Image> = split.test.iter().map(|s| &s.image).collect();
        let truth: Vec<usize> = split
            .test
            .iter()
            .map(|s| offsets[i] + split.local_index(s.label).expect("validated label"))
            .collect();
        let (mut hit, mut oracle_hit, mut tid_hit, mut naive_hit, mut naive_n) = (0, 0, 0, 0, 0);
        if mode.prompted() {
            let oracle = vec![i; images.len()];
            let preds = predict_batch(bb, states, cc, &images, Some(&oracle), opts)?;
            for (p, &t) in preds.iter().zip(&truth) {
                hit += usize::from(p.predicted_class == t);
                oracle_hit += usize::from(p.oracle_class == Some(t));
                tid_hit += usize::from(p.predicted_task == i);
                if let Some(n) = p.naive_task {
                    naive_n += 1;
                    naive_hit += usize::from(n == i);
                }
                let (predicted_task, predicted_class) = if oracle_rows {
                    (i, p.oracle_class.expect("truth supplied"))
                } else {
                    (p.predicted_task, p.predicted_class)
                };
                rows.push(PredictionRow { image_id, true_global_class: t, predicted_task, predicted_class });
                image_id += 1;
            }
        } else {
            let reps = if images.is_empty() { None } else { Some(plain_batch(bb, &images)?) };
            for (b, &t) in truth.iter().enumerate() {
                let reps = reps.as_ref().expect("non-empty split");
                let c = classify_rep(reps.row(b), cc, None, opts);
                let task = task_of_class(c);
                hit += usize::from(c == t);
                tid_hit += usize::from(task == i);
                rows.push(PredictionRow { image_id, true_global_class: t, predicted_task: task, predicted_class: c });
                image_id += 1;
            }
            oracle_hit = hit;
        }
        let n = images.len();
        evals.push(TaskEval {
            task: i,
            test_count: n,
            accuracy: frac(hit, n),
            oracle_accuracy: frac(oracle_hit, n),
            task_id_accuracy: frac(tid_hit, n),
            naive_task_id_accuracy: (naive_n > 0).then(|| frac(naive_hit, naive_n)),
        });
    }
    Ok((evals, rows))
}
