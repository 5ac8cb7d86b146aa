//! Task-aware query-key inference: per-task keys from k-means over query
//! outputs, minimum-distance task selection, and classification with the
//! selected task's prompts.

mod kmeans;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, kmeans_with, objective as kmeans_objective, rows_f64, KMeansConfig, KMeansResult};

use crate::backbone::{argmax, BackboneParams, PromptSchedule};
use crate::data::Image;
use crate::diffcore::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::losses::ClassificationClassifier;
use crate::prompts::TaskState;

/// Cluster centers used to recognize a task's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskKeys<S> {
    pub task_index: usize,
    /// `[K × D]`
    pub centers: Tensor<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct InferenceOptions {
    /// Restrict the argmax to the selected task's classes.
    pub mask_to_task: bool,
    /// Compare unit-normalized queries and keys instead of raw ones.
    pub normalize: bool,
}


/// Images per graph during batched inference.
pub const QUERY_CHUNK: usize = 32;

fn query_chunk<S: Scalar>(bb: &BackboneParams<S>, state: &TaskState<S>, images: &[&Image]) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let bound = bb.bind(&mut g, false);
    let seqs = images.iter().map(|im| bb.embed_var(&mut g, &bound, im)).collect::<Result<Vec<_>>>()?;
    let sched = PromptSchedule {
        general: state.general_prompt.iter().map(|t| g.constant(t.clone())).collect(),
        task: state.task_prompt.iter().map(|t| g.constant(t.clone())).collect(),
    };
    let out = bb.forward_with_prompts(&mut g, &bound, &seqs, &sched)?;
    Ok(g.value(out.adapted).clone())
}

fn stack_rows<S: Scalar>(parts: Vec<Tensor<S>>, dim: usize) -> Result<Tensor<S>> {
    let rows: usize = parts.iter().map(|t| t.rows()).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new([rows, dim], data)
}

/// Adapted representations of `images` under task `state`'s prompts,
/// `[B × D]`. Chunks are evaluated in parallel; every row depends only on
/// its own image, so the result does not depend on the chunking.
pub fn query_batch<S: Scalar>(bb: &BackboneParams<S>, state: &TaskState<S>, images: &[&Image]) -> Result<Tensor<S>> {
    let parts = images
        .par_chunks(QUERY_CHUNK)
        .map(|chunk| query_chunk(bb, state, chunk))
        .collect::<Result<Vec<_>>>()?;
    stack_rows(parts, bb.config.dim)
}

/// Promptless representations, `[B × D]`.
pub fn plain_batch<S: Scalar>(bb: &BackboneParams<S>, images: &[&Image]) -> Result<Tensor<S>> {
    let parts = images
        .par_chunks(QUERY_CHUNK)
        .map(|chunk| {
            let rows = bb.represent_plain(chunk)?;
            stack_rows(rows.into_iter().map(|r| r.reshape([1, bb.config.dim])).collect::<Result<_>>()?, bb.config.dim)
        })
        .collect::<Result<Vec<_>>>()?;
    stack_rows(parts, bb.config.dim)
}

/// Query `q_i(x)` for a single image.
pub fn query<S: Scalar>(bb: &BackboneParams<S>, state: &TaskState<S>, image: &Image) -> Result<Tensor<S>> {
    let t = query_chunk(bb, state, &[image])?;
    Tensor::new([bb.config.dim], t.into_data())
}

/// k-means over `queries` (`[M × D]`) with `K = o_per_class · classes`.
pub fn keys_from_queries<S: Scalar>(
    queries: &Tensor<S>,
    task_index: usize,
    classes: usize,
    o_per_class: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<(TaskKeys<S>, KMeansResult)> {
    let k = o_per_class * classes;
    if queries.rows() < k {
        return Err(Error::InvalidArgument(format!(
            "{} training images cannot provide {k} keys",
            queries.rows()
        )));
    }
    let res = kmeans_with(&rows_f64(queries), k, seed, cfg)?;
    Ok((TaskKeys { task_index, centers: res.centers_tensor() }, res))
}

/// Queries every training image with the task's prompts and clusters them.
pub fn build_task_keys<S: Scalar>(
    bb: &BackboneParams<S>,
    state: &TaskState<S>,
    train_images: &[&Image],
    o_per_class: usize,
    seed: u64,
) -> Result<TaskKeys<S>> {
    let k = o_per_class * state.num_classes;
    if train_images.len() < k {
        return Err(Error::InvalidArgument(format!("{} training images cannot provide {k} keys", train_images.len())));
    }
    let q = query_batch(bb, state, train_images)?;
    Ok(keys_from_queries(&q, state.task_index, state.num_classes, o_per_class, seed, &KMeansConfig::default())?.0)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// `d = min_j ‖q − κ^j‖`.
pub fn key_distance<S: Scalar>(q: &[S], keys: &TaskKeys<S>, normalize: bool) -> f64 {
    let q: Vec<f64> = q.iter().map(|v| v.as_f64()).collect();
    let q = if normalize { unit(&q) } else { q };
    (0..keys.centers.rows())
        .map(|j| {
            let c: Vec<f64> = keys.centers.row(j).iter().map(|v| v.as_f64()).collect();
            let c = if normalize { unit(&c) } else { c };
            q.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// `argmin_i d_i`, lowest index on ties. `queries[i]` is the image's query
/// under task `i`'s prompts.
pub fn predict_task_identity<S: Scalar>(queries: &[&[S]], keys: &[&TaskKeys<S>], normalize: bool) -> Result<usize> {
    if keys.is_empty() || queries.len() != keys.len() {
        return Err(Error::InvalidArgument(format!("{} queries for {} keyed tasks", queries.len(), keys.len())));
    }
    let mut best = (0, f64::INFINITY);
    for (i, (q, k)) in queries.iter().zip(keys).enumerate() {
        let d = key_distance(q, k, normalize);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Argmax over every seen class, or over the selected task's classes when
/// masking is enabled.
pub fn classify_rep<S: Scalar>(
    rep: &[S],
    cc: &ClassificationClassifier<S>,
    task: Option<&TaskState<S>>,
    opts: &InferenceOptions,
) -> usize {
    let logits = cc.logits(rep);
    match (opts.mask_to_task, task) {
        (true, Some(t)) => t.class_offset + argmax(&logits[t.class_offset..t.class_offset + t.num_classes]),
        _ => argmax(&logits),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted_task: usize,
    pub predicted_class: usize,
    /// Class predicted with the true task's prompts, when the truth is given.
    pub oracle_class: Option<usize>,
    /// Task chosen from promptless queries and naive keys, when available.
    pub naive_task: Option<usize>,
}

/// Full test path for a batch: query under every task, pick the task, and
/// classify with that task's representation. With `true_tasks`, each image
/// is also classified under its true task's prompts.
pub fn predict_batch<S: Scalar>(
    bb: &BackboneParams<S>,
    states: &[TaskState<S>],
    cc: &ClassificationClassifier<S>,
    images: &[&Image],
    true_tasks: Option<&[usize]>,
    opts: &InferenceOptions,
) -> Result<Vec<Prediction>> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("no trained task".into()));
    }
    if true_tasks.is_some_and(|t| t.len() != images.len()) {
        return Err(Error::Shape("one true task per image required".into()));
    }
    let queries = states.iter().map(|s| query_batch(bb, s, images)).collect::<Result<Vec<_>>>()?;
    let keys: Vec<&TaskKeys<S>> = states
        .iter()
        .map(|s| s.keys.as_ref().ok_or_else(|| Error::InvalidArgument(format!("task {} has no keys", s.task_index))))
        .collect::<Result<_>>()?;
    let naive: Option<Vec<&TaskKeys<S>>> = states.iter().map(|s| s.naive_keys.as_ref()).collect();
    let plain = naive.as_ref().map(|_| plain_batch(bb, images)).transpose()?;
    let mut out = Vec::with_capacity(images.len());
    for b in 0..images.len() {
        let qs: Vec<&[S]> = queries.iter().map(|q| q.row(b)).collect();
        let predicted_task = predict_task_identity(&qs, &keys, opts.normalize)?;
        let predicted_class = classify_rep(qs[predicted_task], cc, Some(&states[predicted_task]), opts);
        let oracle_class = match true_tasks {
            Some(t) if t[b] >= states.len() => {
                return Err(Error::InvalidArgument(format!("task {} is not trained", t[b])))
            }
            Some(t) => Some(classify_rep(qs[t[b]], cc, Some(&states[t[b]]), opts)),
            None => None,
        };
        let naive_task = match (&naive, &plain) {
            (Some(nk), Some(p)) => {
                let row = p.row(b);
                Some(predict_task_identity(&vec![row; nk.len()], nk, opts.normalize)?)
            }
            _ => None,
        };
        out.push(Prediction { predicted_task, predicted_class, oracle_class, naive_task });
    }
    Ok(out)
}
