mod common;

use crossmodal::memory::{BankTag, PrototypeBank};
use crossmodal::objectives::{grad_through_normalization, intra_infonce, multi_positive_global};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const STEP: f64 = 1e-4;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    m
}

/// `clusters` global clusters; the first `mixed` get a visible and an
/// infrared prototype, the rest a single visible one.
fn bank(rng: &mut ChaCha8Rng, clusters: usize, mixed: usize, d: usize) -> PrototypeBank {
    let mut tags = Vec::new();
    let mut owner = Vec::new();
    let mut positives = Vec::new();
    for z in 0..clusters {
        let mut p = vec![tags.len()];
        tags.push(BankTag::Visible);
        owner.push(z);
        if z < mixed {
            p.push(tags.len());
            tags.push(BankTag::Infrared);
            owner.push(z);
        }
        positives.push(p);
    }
    PrototypeBank {
        vectors: unit_rows(rng, tags.len(), d),
        modality_tag: tags,
        owner_cluster: owner,
        mu: 0.1,
        positives,
    }
}

fn numeric_grad(f: &Array2<f64>, loss: impl Fn(&Array2<f64>) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.len());
    for idx in 0..f.len() {
        let (i, j) = (idx / f.ncols(), idx % f.ncols());
        let mut up = f.clone();
        up[[i, j]] += STEP;
        let mut down = f.clone();
        down[[i, j]] -= STEP;
        out.push((loss(&up) - loss(&down)) / (2.0 * STEP));
    }
    out
}

#[test]
fn intra_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let b = bank(&mut rng, 5, 0, d);
        let f = unit_rows(&mut rng, 8, d);
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
        let tau = 0.05 + 0.5 * rng.random::<f64>();
        let out = intra_infonce(f.view(), &labels, &b, tau).unwrap();
        let num = numeric_grad(&f, |g| intra_infonce(g.view(), &labels, &b, tau).unwrap().value);
        let err = common::max_rel_error(out.grad.as_slice().unwrap(), &num);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn global_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = 6;
        let b = bank(&mut rng, 6, 4, d);
        let f = unit_rows(&mut rng, 8, d);
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..6)).collect();
        let tau = 0.1 + 0.5 * rng.random::<f64>();
        let out = multi_positive_global(f.view(), &labels, &b, tau, 3).unwrap();
        let num = numeric_grad(&f, |g| {
            multi_positive_global(g.view(), &labels, &b, tau, 3).unwrap().value
        });
        let err = common::max_rel_error(out.grad.as_slice().unwrap(), &num);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn composed_normalization_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = 5;
    let b = bank(&mut rng, 4, 0, d);
    let x = Array2::from_shape_fn((3, d), |_| rng.sample::<f64, _>(StandardNormal) * 2.0);
    let labels = [0, 2, 3];
    let normalize = |m: &Array2<f64>| {
        let mut m = m.clone();
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    };
    let f = normalize(&x);
    let g = intra_infonce(f.view(), &labels, &b, 0.2).unwrap().grad;
    let chained = grad_through_normalization(g.view(), x.view()).unwrap();
    let num = numeric_grad(&x, |y| intra_infonce(normalize(y).view(), &labels, &b, 0.2).unwrap().value);
    assert!(common::max_rel_error(chained.as_slice().unwrap(), &num) < 1e-4);
}

#[test]
fn exhaustive_negatives_equal_full_denominator() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = bank(&mut rng, 5, 2, 4);
    let f = unit_rows(&mut rng, 4, 4);
    let labels = [0, 1, 3, 4];
    let tau = 0.05;
    let got = multi_positive_global(f.view(), &labels, &b, tau, usize::MAX).unwrap().value;
    // direct: every prototype in the denominator
    let mut want = 0.0;
    for (i, &z) in labels.iter().enumerate() {
        let s: Vec<f64> = b.vectors.rows().into_iter().map(|m| m.dot(&f.row(i)) / tau).collect();
        let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
        let pos = &b.positives[z];
        want += pos.iter().map(|&p| lse - s[p]).sum::<f64>() / pos.len() as f64;
    }
    assert!((got - 0.5 * want).abs() < 1e-9);
}

#[test]
fn raising_a_dominant_positive_increases_multi_positive_loss() {
    // The loss pulls a query equally towards every positive, so pushing it
    // further onto one of two positives makes it worse.
    let b = PrototypeBank {
        vectors: ndarray::array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]],
        modality_tag: vec![BankTag::Visible, BankTag::Infrared, BankTag::Visible],
        owner_cluster: vec![0, 0, 1],
        mu: 0.1,
        positives: vec![vec![0, 1], vec![2]],
    };
    let at = |theta: f64| {
        let f = ndarray::array![[theta.cos(), theta.sin()]];
        multi_positive_global(f.view(), &[0], &b, 0.5, 1).unwrap().value
    };
    let balanced = at(std::f64::consts::FRAC_PI_4);
    assert!(at(0.3) > balanced);
    assert!(at(0.1) > at(0.3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_non_negative_and_finite(seed in 0u64..10_000, tau in 0.02f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = bank(&mut rng, 6, 3, 4);
        let f = unit_rows(&mut rng, 5, 4);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
        let intra_labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..b.len())).collect();
        let a = intra_infonce(f.view(), &intra_labels, &b, tau).unwrap();
        let g = multi_positive_global(f.view(), &labels, &b, tau, 4).unwrap();
        for l in [a.value, g.value] {
            prop_assert!(l.is_finite() && l >= -1e-12);
        }
    }

    #[test]
    fn swapping_positive_prototypes_keeps_loss(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = bank(&mut rng, 4, 2, 5);
        let f = unit_rows(&mut rng, 3, 5);
        let labels = [0, 1, 0];
        let mut swapped = b.clone();
        let (p, q) = (b.positives[0][0], b.positives[0][1]);
        swapped.vectors.row_mut(p).assign(&b.vectors.row(q));
        swapped.vectors.row_mut(q).assign(&b.vectors.row(p));
        let x = multi_positive_global(f.view(), &labels, &b, 0.1, 2).unwrap().value;
        let y = multi_positive_global(f.view(), &labels, &swapped, 0.1, 2).unwrap().value;
        prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
    }

    #[test]
    fn single_positive_loss_monotone_in_positive_similarity(seed in 0u64..10_000, t in 0.01f64..1.0) {
        // Only the positive prototype has weight on coordinate 0, so moving
        // f along it raises that one similarity and nothing else.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = bank(&mut rng, 5, 0, 4);
        let y = rng.random_range(0..5);
        for (j, mut r) in b.vectors.rows_mut().into_iter().enumerate() {
            if j != y {
                r[0] = 0.0;
            } else {
                r[0] = r[0].abs() + 0.1;
            }
        }
        let f = unit_rows(&mut rng, 1, 4);
        let mut g = f.clone();
        g[[0, 0]] += t;
        let zs: Vec<usize> = (0..5).collect();
        let intra = |m: &Array2<f64>| intra_infonce(m.view(), &[y], &b, 0.1).unwrap().value;
        let global = |m: &Array2<f64>| multi_positive_global(m.view(), &[zs[y]], &b, 0.1, 2).unwrap().value;
        prop_assert!(intra(&g) <= intra(&f) + 1e-12);
        prop_assert!(global(&g) <= global(&f) + 1e-12);
    }
}
