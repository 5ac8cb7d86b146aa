use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Geometry, Image, Sample, SplitBenchmark, TaskSplit};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pretrain_classes: usize,
    pub pretrain_train_per_class: usize,
    pub pretrain_test_per_class: usize,
    pub side: usize,
    pub channels: usize,
    /// Per-pixel Gaussian noise std.
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 5,
            classes_per_task: 2,
            train_per_class: 40,
            test_per_class: 20,
            pretrain_classes: 10,
            pretrain_train_per_class: 40,
            pretrain_test_per_class: 10,
            side: 16,
            channels: 3,
            noise_std: 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Bar,
    Cross,
    Ring,
    Checker,
}

const SHAPES: [Shape; 5] = [Shape::Disc, Shape::Bar, Shape::Cross, Shape::Ring, Shape::Checker];

/// Procedural description of one class.
#[derive(Debug, Clone)]
struct ClassStyle {
    shape: Shape,
    fg: [f32; 3],
    bg: [f32; 3],
    stripe_freq: f32,
    stripe_angle: f32,
    stripe_phase: f32,
}

#[derive(Debug, Clone, Copy)]
struct Jitter {
    dx: f32,
    dy: f32,
    scale: f32,
    brightness: f32,
}

const NO_JITTER: Jitter = Jitter { dx: 0.0, dy: 0.0, scale: 1.0, brightness: 0.0 };

fn mask(shape: Shape, u: f32, v: f32) -> f32 {
    let r = (u * u + v * v).sqrt();
    let inside = match shape {
        Shape::Disc => r < 0.6,
        Shape::Bar => v.abs() < 0.25 && u.abs() < 0.8,
        Shape::Cross => (u.abs() < 0.22 && v.abs() < 0.8) || (v.abs() < 0.22 && u.abs() < 0.8),
        Shape::Ring => r > 0.38 && r < 0.75,
        Shape::Checker => {
            u.abs() < 0.8
                && v.abs() < 0.8
                && (((u + 1.0) * 2.0).floor() as i32 + ((v + 1.0) * 2.0).floor() as i32) % 2 == 0
        }
    };
    if inside {
        1.0
    } else {
        0.0
    }
}

fn quantize(x: f32) -> f32 {
    (x.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(style: &ClassStyle, geometry: Geometry, jitter: Jitter, noise: Option<(&mut Rng, f64)>) -> Image {
    let (h, w, ch) = (geometry.height, geometry.width, geometry.channels);
    let mut pixels = Vec::with_capacity(geometry.numel());
    let (sa, ca) = style.stripe_angle.sin_cos();
    let mut noise = noise.map(|(rng, std)| (rng, Normal::new(0.0, std).expect("valid std")));
    for r in 0..h {
        for c in 0..w {
            let y = (r as f32 + 0.5) / h as f32 * 2.0 - 1.0;
            let x = (c as f32 + 0.5) / w as f32 * 2.0 - 1.0;
            let u = (x - jitter.dx) / jitter.scale;
            let v = (y - jitter.dy) / jitter.scale;
            let m = mask(style.shape, u, v);
            let t = (x * ca + y * sa) * std::f32::consts::PI * style.stripe_freq + style.stripe_phase;
            let stripe = 0.7 + 0.3 * t.cos();
            for k in 0..ch {
                let k3 = k % 3;
                let base = style.bg[k3] + (style.fg[k3] * stripe - style.bg[k3]) * m;
                let mut p = base + jitter.brightness;
                if let Some((rng, dist)) = noise.as_mut() {
                    p += dist.sample(*rng) as f32;
                }
                pixels.push(quantize(p));
            }
        }
    }
    Image { geometry, pixels }
}

fn random_color(rng: &mut Rng) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn color_dist(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

fn make_styles(spec: &SyntheticSpec, n: usize) -> Vec<ClassStyle> {
    let mut rng = rng::stream(spec.seed, Stream::Data, &[0]);
    let mut styles: Vec<ClassStyle> = Vec::with_capacity(n);
    while styles.len() < n {
        let shape = SHAPES[styles.len() % SHAPES.len()];
        let fg = random_color(&mut rng);
        let bg = random_color(&mut rng);
        if color_dist(&fg, &bg) < 0.5 {
            continue;
        }
        // Same-shape classes must differ visibly in colour.
        let clash = styles
            .iter()
            .any(|s| s.shape == shape && (color_dist(&s.fg, &fg) < 0.35 || color_dist(&s.bg, &bg) < 0.2));
        if clash {
            continue;
        }
        styles.push(ClassStyle {
            shape,
            fg,
            bg,
            stripe_freq: rng.random_range(0..4) as f32,
            stripe_angle: rng.random_range(0.0..std::f32::consts::PI),
            stripe_phase: rng.random_range(0.0..std::f32::consts::TAU),
        });
    }
    // Decouple shape from class order.
    for i in (1..styles.len()).rev() {
        let j = rng.random_range(0..=i);
        styles.swap(i, j);
    }
    styles
}

fn geometry(spec: &SyntheticSpec) -> Geometry {
    Geometry { height: spec.side, width: spec.side, channels: spec.channels }
}

/// Noise-free, jitter-free image of every class, continual classes first.
pub fn class_prototypes(spec: &SyntheticSpec) -> Vec<Image> {
    let n = spec.tasks * spec.classes_per_task + spec.pretrain_classes;
    make_styles(spec, n).iter().map(|s| render(s, geometry(spec), NO_JITTER, None)).collect()
}

fn draw_samples(style: &ClassStyle, label: u16, count: usize, spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Sample> {
    (0..count)
        .map(|_| {
            let jitter = Jitter {
                dx: rng.random_range(-0.15..0.15),
                dy: rng.random_range(-0.15..0.15),
                scale: rng.random_range(0.85..1.15),
                brightness: rng.random_range(-0.08..0.08),
            };
            let image = render(style, geometry(spec), jitter, Some((&mut *rng, spec.noise_std)));
            Sample { image, label }
        })
        .collect()
}

/// Deterministic split benchmark: labels `0..T·C` form the continual tasks
/// (task `i` owns `i·C..(i+1)·C`), the following `pretrain_classes` labels
/// form the disjoint pretraining split.
pub fn generate_synthetic_benchmark(spec: &SyntheticSpec) -> Result<SplitBenchmark> {
    if spec.tasks == 0 || spec.classes_per_task == 0 || spec.train_per_class == 0 || spec.side == 0 {
        return Err(Error::Data("synthetic benchmark parameters must be positive".into()));
    }
    let continual = spec.tasks * spec.classes_per_task;
    let total = continual + spec.pretrain_classes;
    if total > u16::MAX as usize {
        return Err(Error::Data(format!("{total} classes exceed the u16 label space")));
    }
    let styles = make_styles(spec, total);
    let build = |labels: Vec<u16>, n_train: usize, n_test: usize| {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &l in &labels {
            let mut rng = rng::stream(spec.seed, Stream::Data, &[1, l as u64]);
            train.extend(draw_samples(&styles[l as usize], l, n_train, spec, &mut rng));
            test.extend(draw_samples(&styles[l as usize], l, n_test, spec, &mut rng));
        }
        TaskSplit { labels, train, test }
    };
    let c = spec.classes_per_task;
    let tasks = (0..spec.tasks)
        .map(|t| build(((t * c) as u16..((t + 1) * c) as u16).collect(), spec.train_per_class, spec.test_per_class))
        .collect();
    let pretrain = (spec.pretrain_classes > 0).then(|| {
        build(
            (continual as u16..total as u16).collect(),
            spec.pretrain_train_per_class,
            spec.pretrain_test_per_class,
        )
    });
    let bench = SplitBenchmark { geometry: geometry(spec), tasks, pretrain };
    bench.validate()?;
    Ok(bench)
}
