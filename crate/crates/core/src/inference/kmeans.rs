//! Seeded k-means: k-means++ seeding, Lloyd iterations, and single-point
//! move refinement, with restarts.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Independent seedings; the lowest final objective wins.
    pub restarts: usize,
    /// Polish the Lloyd fixpoint by moving single points between clusters
    /// while that lowers the objective.
    pub refine: bool,
    /// Instances with at most this many labelings (K^M) are solved by
    /// enumerating every partition instead.
    pub exact_limit: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iter: 100, restarts: 4, refine: true, exact_limit: 6561 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `[K × D]`
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Objective after seeding and after every subsequent update.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.history.last().expect("history starts at seeding")
    }

    pub fn centers_tensor<S: Scalar>(&self) -> Tensor<S> {
        let k = self.centers.len();
        let d = self.centers.first().map_or(0, Vec::len);
        let data = self.centers.iter().flatten().map(|&v| S::of(v)).collect();
        Tensor::new([k, d], data).expect("rectangular centers")
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center, lowest index on ties.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn objective(points: &[Vec<f64>], centers: &[Vec<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &a)| sq(p, &centers[a])).sum()
}

fn means(points: &[Vec<f64>], assign: &[usize], k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    sums
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let m = points.len();
    let mut centers = vec![points[rng.random_range(0..m)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..m)
        };
        centers.push(points[pick].clone());
        for (dv, p) in d2.iter_mut().zip(points) {
            *dv = dv.min(sq(p, centers.last().expect("pushed")));
        }
    }
    centers
}

/// Gives every empty cluster the point farthest from its current center,
/// taken from a cluster that keeps at least one member.
fn reseed_empty(points: &[Vec<f64>], centers: &[Vec<f64>], assign: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let far = (0..points.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq(&points[a], &centers[assign[a]]);
                let db = sq(&points[b], &centers[assign[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("M >= K leaves a cluster with two members");
        assign[far] = empty;
    }
}

/// Exact single-point moves: relocate a point whenever that strictly lowers
/// the objective, until no move helps.
fn refine(points: &[Vec<f64>], assign: &mut [usize], k: usize, d: usize, max_passes: usize) -> usize {
    let mut passes = 0;
    loop {
        let centers = means(points, assign, k, d);
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let mut moved = None;
        for (i, p) in points.iter().enumerate() {
            let a = assign[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let leave = na / (na - 1.0) * sq(p, &centers[a]);
            for b in 0..k {
                if b == a {
                    continue;
                }
                let nb = counts[b] as f64;
                let join = nb / (nb + 1.0) * sq(p, &centers[b]);
                if join < leave - 1e-12 * leave.max(1.0) {
                    moved = Some((i, b));
                    break;
                }
            }
            if moved.is_some() {
                break;
            }
        }
        match moved {
            Some((i, b)) if passes < max_passes => {
                assign[i] = b;
                passes += 1;
            }
            _ => return passes,
        }
    }
}

fn single_run(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig, rng: &mut Rng) -> KMeansResult {
    let d = points[0].len();
    let mut centers = plus_plus(points, k, rng);
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    reseed_empty(points, &centers, &mut assign, k);
    let mut history = vec![objective(points, &centers, &assign)];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        centers = means(points, &assign, k, d);
        history.push(objective(points, &centers, &assign));
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        reseed_empty(points, &centers, &mut next, k);
        if next == assign {
            break;
        }
        assign = next;
    }
    if cfg.refine && refine(points, &mut assign, k, d, 10 * points.len() * k) > 0 {
        centers = means(points, &assign, k, d);
        history.push(objective(points, &centers, &assign));
    }
    KMeansResult { centers, assignments: assign, history, iterations }
}

/// Optimal partition by walking every restricted-growth labeling, so each
/// partition into exactly `k` non-empty groups is visited once.
fn exhaustive(points: &[Vec<f64>], k: usize) -> KMeansResult {
    let (m, d) = (points.len(), points[0].len());
    let mut label = vec![0usize; m];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let used = label.iter().max().map_or(0, |&x| x + 1);
        if used == k {
            let centers = means(points, &label, k, d);
            let obj = objective(points, &centers, &label);
            if best.as_ref().is_none_or(|b| obj < b.0) {
                best = Some((obj, label.clone()));
            }
        }
        // next restricted-growth string: label[i] <= 1 + max(label[..i]), capped at k - 1
        let mut i = m;
        loop {
            if i <= 1 {
                let (obj, assign) = best.expect("M >= K admits a partition");
                let centers = means(points, &assign, k, d);
                return KMeansResult { centers, assignments: assign, history: vec![obj], iterations: 0 };
            }
            i -= 1;
            let prefix_max = label[..i].iter().max().copied().unwrap_or(0);
            if label[i] < (prefix_max + 1).min(k - 1) {
                label[i] += 1;
                label[i + 1..].iter_mut().for_each(|v| *v = 0);
                break;
            }
        }
    }
}

/// Clusters the rows of `points` into `k` groups, deterministically in `seed`.
pub fn kmeans_with(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-means with K = 0".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidArgument(format!("{} points cannot form {k} clusters", points.len())));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("k-means points have differing dimensions".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    if (k as f64).powi(points.len().min(64) as i32) <= cfg.exact_limit as f64 {
        return Ok(exhaustive(points, k));
    }
    let mut rng = rng::stream(seed, Stream::KMeans, &[]);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = single_run(points, k, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| run.objective() < b.objective()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    kmeans_with(points, k, seed, &KMeansConfig::default())
}

/// Rows of an `[M × D]` tensor as f64 vectors.
pub fn rows_f64<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|v| v.as_f64()).collect()).collect()
}
