use hprompt_core::losses::{
    bda_classifier_loss, bda_deception_loss, cke_loss, gke_loss, orthogonality_loss, total_loss_report, HeadVars,
};
use hprompt_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn head(g: &mut Graph<f64>, w: Tensor<f64>, trainable: bool) -> HeadVars {
    let b = Tensor::zeros([w.rows()]);
    if trainable {
        HeadVars { weight: g.param(w), bias: g.param(b) }
    } else {
        HeadVars { weight: g.constant(w), bias: g.constant(b) }
    }
}

#[test]
fn uniform_logits_give_ln_four_per_term() {
    let mut g = Graph::<f64>::new();
    let real = g.constant(Tensor::from_f64([1, 3], &[0.4, -1.0, 2.0]).unwrap());
    let virt = g.constant(Tensor::from_f64([1, 3], &[1.0, 0.5, 0.0]).unwrap());
    let cd = head(&mut g, Tensor::zeros([4, 3]), true);
    let terms = bda_classifier_loss(&mut g, real, &[1], virt, &[0], cd).unwrap();
    let ln4 = 4f64.ln();
    assert!((g.value(terms.cls).item() - 2.0 * ln4).abs() < 1e-15);
    // zero rows: every diagonal Gram entry misses 1
    assert!((g.value(terms.dis).item() - 4.0 / 16.0).abs() < 1e-15);
}

#[test]
fn deception_vanishes_when_the_discriminator_is_certain() {
    let mut g = Graph::<f64>::new();
    let virt = g.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let w = Tensor::from_f64([4, 2], &[200.0, 0.0, 0.0, 200.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let cd = head(&mut g, w, false);
    let l = bda_deception_loss(&mut g, virt, &[0, 1], cd).unwrap();
    assert!(g.value(l).item() < 1e-80);
}

#[test]
fn detachment_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let mu = g.param(Tensor::randn([2, 3], 1.0, &mut rng));
    let ls = g.param(Tensor::full([2, 3], -2.0));
    let sample = g.gaussian_reparam_sample(mu, ls, Tensor::randn([2, 3], 1.0, &mut rng)).unwrap();
    let prompt = g.param(Tensor::randn([3, 3], 1.0, &mut rng));
    let virt = g.matmul(sample, prompt).unwrap();
    let real = g.constant(Tensor::randn([2, 3], 1.0, &mut rng));

    // discriminator step: virtual reps detached, so only C_d moves
    let detached = g.detach(virt);
    let cd = head(&mut g, Tensor::randn([4, 3], 0.3, &mut rng), true);
    let terms = bda_classifier_loss(&mut g, real, &[0, 1], detached, &[1, 0], cd).unwrap();
    let grads = g.backward(terms.total).unwrap();
    assert!(grads.get(mu).is_none() && grads.get(ls).is_none() && grads.get(prompt).is_none());
    assert!(grads.get(cd.weight).is_some());

    // deception step: C_d constant
    let cd_fixed = HeadVars { weight: g.constant(g.value(cd.weight).clone()), bias: g.constant(g.value(cd.bias).clone()) };
    let dec = bda_deception_loss(&mut g, virt, &[1, 0], cd_fixed).unwrap();
    let grads = g.backward(dec).unwrap();
    assert!(grads.get(cd_fixed.weight).is_none() && grads.get(cd_fixed.bias).is_none());
    assert!(grads.get(mu).is_some() && grads.get(ls).is_some());
}

#[test]
fn cke_arithmetic_and_first_task() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::<f64>::new();
    let real = g.constant(Tensor::randn([3, 4], 1.0, &mut rng));
    let virt = g.constant(Tensor::randn([2, 4], 1.0, &mut rng));
    let cc = head(&mut g, Tensor::randn([5, 4], 0.5, &mut rng), true);

    let first = cke_loss(&mut g, real, &[0, 1, 1], None, cc, 0.1).unwrap();
    assert!(first.vir.is_none());
    assert_eq!(g.value(first.total).item(), g.value(first.rea).item());

    let zero = cke_loss(&mut g, real, &[3, 4, 3], Some((virt, &[0, 2])), cc, 0.0).unwrap();
    assert_eq!(g.value(zero.total).item(), g.value(zero.rea).item());

    let l = cke_loss(&mut g, real, &[3, 4, 3], Some((virt, &[0, 2])), cc, 0.1).unwrap();
    let (rea, vir) = (g.value(l.rea).item(), g.value(l.vir.unwrap()).item());
    assert!((g.value(l.total).item() - (rea + 0.1 * vir)).abs() < 1e-15);
}

#[test]
fn total_report_and_phase_bookkeeping() {
    let r = total_loss_report(Some(1.0), Some(2.0), Some(3.0));
    assert_eq!(r.sum, 6.0);
    let gke_only = total_loss_report(None, None, Some(0.7));
    assert!(gke_only.bda.is_none() && gke_only.cke.is_none());
    assert_eq!(gke_only.sum, 0.7);
}

fn gke_value(reps: &Tensor<f64>, labels: &[usize], tau: f64) -> f64 {
    let mut g = Graph::new();
    let r = g.constant(reps.clone());
    let l = gke_loss(&mut g, r, labels, tau).unwrap();
    g.value(l).item()
}

fn views(n: usize, classes: usize, d: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Vec<usize>) {
    use rand::Rng;
    let base: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let labels: Vec<usize> = base.iter().chain(&base).copied().collect();
    (Tensor::randn([2 * n, d], 1.0, rng), labels)
}

fn permute_rows(t: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let data: Vec<f64> = order.iter().flat_map(|&r| t.row(r).to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #[test]
    fn gke_is_permutation_invariant(seed in any::<u64>(), n in 1usize..6, tau in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (reps, labels) = views(n, 3, 5, &mut rng);
        let mut order: Vec<usize> = (0..2 * n).collect();
        order.shuffle(&mut rng);
        let permuted = permute_rows(&reps, &order);
        let plabels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let a = gke_value(&reps, &labels, tau);
        let b = gke_value(&permuted, &plabels, tau);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn gke_ignores_positive_rescaling(seed in any::<u64>(), n in 1usize..6, row in 0usize..12, factor in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (reps, labels) = views(n, 2, 4, &mut rng);
        let row = row % (2 * n);
        let mut scaled = reps.clone();
        let d = scaled.cols();
        for v in &mut scaled.data_mut()[row * d..(row + 1) * d] {
            *v *= factor;
        }
        let a = gke_value(&reps, &labels, 0.1);
        let b = gke_value(&scaled, &labels, 0.1);
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn orthogonality_zero_only_when_orthonormal(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::<f64>::randn([k, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let wv = g.constant(w);
        let l = orthogonality_loss(&mut g, wv).unwrap();
        prop_assert!(g.value(l).item() > 0.0);

        // rows of the identity, permuted, are orthonormal
        let mut eye = Tensor::<f64>::zeros([k, 6]);
        let mut cols: Vec<usize> = (0..6).collect();
        cols.shuffle(&mut rng);
        for r in 0..k {
            eye.data_mut()[r * 6 + cols[r]] = if r % 2 == 0 { 1.0 } else { -1.0 };
        }
        let ev = g.constant(eye);
        let l = orthogonality_loss(&mut g, ev).unwrap();
        prop_assert_eq!(g.value(l).item(), 0.0);
    }
}
