use std::collections::BTreeMap;
use std::fs;

use hprompt_core::backbone::{pretrain_backbone, BackboneConfig, BackboneParams, PretrainConfig};
use hprompt_core::data::{
    augment_pair, class_prototypes, generate_synthetic_benchmark, load_external_dataset, AugmentConfig, DatasetManifest,
    SyntheticSpec,
};
use hprompt_core::inference::plain_batch;
use hprompt_core::prompts::{init_task_state, sample_virtual_embedding, PromptConfig};
use hprompt_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[test]
fn class_prompt_samples_match_their_gaussian() {
    let cfg = PromptConfig::default();
    let layout = cfg.layout(2, 3);
    let mut state = init_task_state::<f64>(0, 0, 1, &cfg, &layout, true, 5);
    let cp = &mut state.class_prompts[0];
    cp.log_sigma = Tensor::from_f64([2, 3], &[-2.0, -1.0, 0.0, 0.5, -0.5, -3.0]).unwrap();
    let before = cp.clone();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<Tensor<f64>> = (0..n).map(|_| sample_virtual_embedding(cp, &mut rng)).collect();
    assert_eq!(*cp, before, "sampling must not touch the prompt");
    for e in 0..6 {
        let mu = cp.mu.data()[e];
        let sigma = cp.log_sigma.data()[e].exp();
        let xs: Vec<f64> = samples.iter().map(|s| s.data()[e]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - mu).abs() < 3.0 * sigma / (n as f64).sqrt(), "entry {e}: mean {mean} vs {mu}");
        // sample variance has std σ²·sqrt(2/(n−1))
        let tol = 3.0 * sigma * sigma * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - sigma * sigma).abs() < tol, "entry {e}: var {var} vs {}", sigma * sigma);
    }
    // off-diagonal covariance near zero
    let (a, b) = (0, 3);
    let ma = samples.iter().map(|s| s.data()[a]).sum::<f64>() / n as f64;
    let mb = samples.iter().map(|s| s.data()[b]).sum::<f64>() / n as f64;
    let cov = samples.iter().map(|s| (s.data()[a] - ma) * (s.data()[b] - mb)).sum::<f64>() / (n - 1) as f64;
    let sa = cp.log_sigma.data()[a].exp();
    let sb = cp.log_sigma.data()[b].exp();
    assert!(cov.abs() < 4.0 * sa * sb / (n as f64).sqrt());
}

#[test]
fn prototypes_are_separated_beyond_noise() {
    let spec = SyntheticSpec::default();
    let protos = class_prototypes(&spec);
    let mut min = f64::INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            let d: f64 = protos[i]
                .pixels
                .iter()
                .zip(&protos[j].pixels)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            min = min.min(d);
        }
    }
    assert!(min > 3.0 * spec.noise_std, "closest prototypes {min}");
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn ten_class_grayscale_set_splits_into_five_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let (side, train, test) = (8usize, 3usize, 2usize);
    let encode = |per_class: usize| {
        let mut pix = Vec::new();
        let mut labels = Vec::new();
        for class in 0..10u16 {
            for k in 0..per_class {
                pix.extend((0..side * side).map(|p| ((p * 7 + class as usize * 23 + k) % 256) as u8));
                labels.extend_from_slice(&(class + 100).to_le_bytes());
            }
        }
        pix.extend(labels);
        pix
    };
    let (tr, te) = (encode(train), encode(test));
    fs::write(dir.path().join("all_train.bin"), &tr).unwrap();
    fs::write(dir.path().join("all_test.bin"), &te).unwrap();
    let manifest = serde_json::json!({
        "version": 1, "H": side, "W": side, "C": 1, "dtype": "u8",
        "tasks": [{
            "labels": (100..110).collect::<Vec<u16>>(),
            "train_file": "all_train.bin", "test_file": "all_test.bin",
            "counts": {"train": 10 * train, "test": 10 * test}
        }],
        "checksums": BTreeMap::from([("all_train.bin", sha_hex(&tr)), ("all_test.bin", sha_hex(&te))]),
    });
    let _: DatasetManifest = serde_json::from_value(manifest.clone()).unwrap();
    let path = dir.path().join("manifest.json");
    fs::write(&path, manifest.to_string()).unwrap();

    let bench = load_external_dataset(&path, Some(2)).unwrap();
    assert_eq!(bench.tasks.len(), 5);
    assert_eq!(bench.geometry.channels, 1);
    let mut seen = Vec::new();
    for t in &bench.tasks {
        assert_eq!(t.labels.len(), 2);
        assert_eq!(t.train.len(), 2 * train);
        assert_eq!(t.test.len(), 2 * test);
        assert!(t.train.iter().chain(&t.test).all(|s| t.labels.contains(&s.label)));
        seen.extend(t.labels.iter().copied());
    }
    assert_eq!(seen, (100..110).collect::<Vec<u16>>());
}

/// Nearest class mean on frozen features: its decision function is linear
/// in the feature vector.
#[test]
fn linear_probe_on_frozen_features_beats_chance() {
    let spec = SyntheticSpec::default();
    let bench = generate_synthetic_benchmark(&spec).unwrap();
    let cfg = BackboneConfig::default();
    let continual: Vec<u16> = bench.tasks.iter().flat_map(|t| t.labels.clone()).collect();
    let (bb, _) = pretrain_backbone(
        BackboneParams::<f32>::init(&cfg, 0).unwrap(),
        bench.pretrain.as_ref().unwrap(),
        &continual,
        &PretrainConfig::default(),
        0,
    )
    .unwrap();
    let merged = bench.merged();
    let task = &merged.tasks[0];
    let feats = |samples: &[hprompt_core::data::Sample]| {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        plain_batch(&bb, &images).unwrap()
    };
    let (ftr, fte) = (feats(&task.train), feats(&task.test));
    let c = task.num_classes();
    let d = cfg.dim;
    let mut means = vec![vec![0.0f64; d]; c];
    let mut counts = vec![0usize; c];
    for (r, s) in task.train.iter().enumerate() {
        let k = task.local_index(s.label).unwrap();
        counts[k] += 1;
        for (m, v) in means[k].iter_mut().zip(ftr.row(r)) {
            *m += *v as f64;
        }
    }
    for (m, n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let mut correct = 0;
    for (r, s) in task.test.iter().enumerate() {
        let x = fte.row(r);
        let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - *b as f64).powi(2)).sum::<f64>();
        let best = (0..c).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
        correct += usize::from(best == task.local_index(s.label).unwrap());
    }
    let acc = correct as f64 / task.test.len() as f64;
    assert!(acc >= 3.0 / c as f64, "probe accuracy {acc} over {c} classes");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentation_keeps_geometry_and_range(seed in any::<u64>(), idx in 0usize..10) {
        let spec = SyntheticSpec { train_per_class: 1, test_per_class: 1, pretrain_classes: 1, pretrain_train_per_class: 1, pretrain_test_per_class: 1, ..Default::default() };
        let protos = class_prototypes(&spec);
        let img = &protos[idx % protos.len()];
        let (a, b) = augment_pair(img, &AugmentConfig::default(), seed);
        prop_assert_eq!(a.geometry, img.geometry);
        prop_assert_eq!(b.geometry, img.geometry);
        prop_assert!(a.pixels.iter().chain(&b.pixels).all(|p| (0.0..=1.0).contains(p)));
        prop_assert_eq!(augment_pair(img, &AugmentConfig::default(), seed), (a, b));
    }
}
