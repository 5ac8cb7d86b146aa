//! Fixtures shared by the benchmarks.

use hprompt_core::backbone::{BackboneConfig, BackboneParams};
use hprompt_core::data::{Geometry, Image};
use hprompt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk-sized backbone and `n` random images for it.
pub fn desk_backbone_and_images(n: usize) -> (BackboneParams<f32>, Vec<Image>) {
    let cfg = BackboneConfig::default();
    let bb = BackboneParams::<f32>::init(&cfg, 0).expect("default config is valid");
    let geo = Geometry { height: cfg.image_side, width: cfg.image_side, channels: cfg.channels };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = (0..n)
        .map(|_| Image::new(geo, (0..geo.numel()).map(|_| rng.random_range(0.0f32..1.0)).collect()).expect("sized"))
        .collect();
    (bb, images)
}

/// `m` Gaussian points in `d` dimensions around `k` well-spread centres.
pub fn clustered_points(m: usize, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
    (0..m)
        .map(|i| centres[i % k].iter().map(|c| c + rng.random_range(-0.5..0.5)).collect())
        .collect()
}

/// Two views of `n` samples over `classes` labels.
pub fn contrastive_batch(n: usize, classes: usize, d: usize) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let labels = base.iter().chain(&base).copied().collect();
    (Tensor::randn([2 * n, d], 1.0, &mut rng), labels)
}
