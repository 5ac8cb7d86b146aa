use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::rng::{Rng, Stream};

/// Label-preserving view generator for the contrastive phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image, sampled uniformly in `[min, max]`.
    pub min_scale: f64,
    pub max_scale: f64,
    pub flip_prob: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { min_scale: 0.6, max_scale: 1.0, flip_prob: 0.5, noise_std: 0.05 }
    }
}

impl AugmentConfig {
    /// Zero strength: every view equals the input.
    pub fn identity() -> Self {
        Self { min_scale: 1.0, max_scale: 1.0, flip_prob: 0.0, noise_std: 0.0 }
    }
}

fn bilinear(img: &Image, y: f32, x: f32, ch: usize) -> f32 {
    let g = img.geometry;
    let y = y.clamp(0.0, (g.height - 1) as f32);
    let x = x.clamp(0.0, (g.width - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(g.height - 1), (x0 + 1).min(g.width - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = img.at(y0, x0, ch) * (1.0 - fx) + img.at(y0, x1, ch) * fx;
    let bot = img.at(y1, x0, ch) * (1.0 - fx) + img.at(y1, x1, ch) * fx;
    top * (1.0 - fy) + bot * fy
}

fn view(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Image {
    let g = img.geometry;
    let scale = if cfg.max_scale > cfg.min_scale {
        rng.random_range(cfg.min_scale..=cfg.max_scale)
    } else {
        cfg.min_scale
    };
    let side = scale.sqrt() as f32;
    let (ch_h, ch_w) = (side * g.height as f32, side * g.width as f32);
    let top = rng.random_range(0.0..=(g.height as f32 - ch_h).max(0.0));
    let left = rng.random_range(0.0..=(g.width as f32 - ch_w).max(0.0));
    let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.min(1.0));
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("valid std"));

    let mut pixels = Vec::with_capacity(g.numel());
    for r in 0..g.height {
        for c in 0..g.width {
            let cc = if flip { g.width - 1 - c } else { c };
            let y = top + (r as f32 + 0.5) * ch_h / g.height as f32 - 0.5;
            let x = left + (cc as f32 + 0.5) * ch_w / g.width as f32 - 0.5;
            for k in 0..g.channels {
                let mut p = bilinear(img, y, x, k);
                if let Some(n) = &noise {
                    p += n.sample(rng) as f32;
                }
                pixels.push(p.clamp(0.0, 1.0));
            }
        }
    }
    Image { geometry: g, pixels }
}

/// Two independently augmented views of `image`, reproducible from `seed`.
pub fn augment_pair(image: &Image, cfg: &AugmentConfig, seed: u64) -> (Image, Image) {
    let mut rng = crate::rng::stream(seed, Stream::Augment, &[]);
    let a = view(image, cfg, &mut rng);
    let b = view(image, cfg, &mut rng);
    (a, b)
}
