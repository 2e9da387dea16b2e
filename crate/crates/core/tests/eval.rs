mod common;

use crossmodal::distance::cosine_distance;
use crossmodal::embed_store::{EmbeddingSet, Modality};
use crossmodal::eval::{ari_labels, cmc_map, distance_distribution, BinSpec, GroupBy, PairType};
use crossmodal::synth::{generate, SynthConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Pair counting over all unordered pairs, noise points as singletons.
fn pair_count_ari(a: &[i64], b: &[i64]) -> f64 {
    let n = a.len();
    let same = |l: &[i64], i: usize, j: usize| l[i] >= 0 && l[i] == l[j];
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in (i + 1)..n {
            match (same(a, i, j), same(b, i, j)) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let num = 2.0 * (both * neither - only_a * only_b);
    let den = (both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither);
    num / den
}

#[test]
fn twelve_points_match_pair_counting() {
    let pred = [0, 0, 1, 1, 1, -1, 2, 2, 0, -1, 2, 1];
    let truth = [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3];
    let got = ari_labels(&pred, &truth).unwrap();
    assert!((got - pair_count_ari(&pred, &truth)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ari_matches_pair_counting(labels in prop::collection::vec((-1i64..4, 0i64..4), 4..40)) {
        let (a, b): (Vec<i64>, Vec<i64>) = labels.into_iter().unzip();
        let got = ari_labels(&a, &b).unwrap();
        let want = pair_count_ari(&a, &b);
        if want.is_finite() {
            prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        }
    }

    #[test]
    fn ari_symmetric_and_permutation_invariant(labels in prop::collection::vec((0i64..5, 0i64..5), 3..40), shift in 1i64..7) {
        let (a, b): (Vec<i64>, Vec<i64>) = labels.into_iter().unzip();
        let renamed: Vec<i64> = a.iter().map(|&l| (l * 3 + shift) % 97).collect();
        let x = ari_labels(&a, &b).unwrap();
        prop_assert!((x - ari_labels(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((x - ari_labels(&renamed, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cmc_monotone_and_bounded(seed in 0u64..10_000) {
        let (q, g) = retrieval_pair(seed, 6, 25, 4);
        let r = cmc_map(&q, &g, 25).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
        prop_assert!((0.0..=1.0).contains(&r.map_score));
        prop_assert!((r.cmc[24] - 1.0).abs() < 1e-12);
    }
}

fn retrieval_pair(seed: u64, nq: usize, ng: usize, ids: u32) -> (EmbeddingSet, EmbeddingSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize, m: Modality| {
        let f = Array2::from_shape_fn((n, 3), |_| rng.sample::<f32, _>(StandardNormal));
        let id: Vec<u32> = (0..n).map(|i| i as u32 % ids).collect();
        EmbeddingSet::new(f, vec![m; n]).unwrap().with_true_ids(id).unwrap()
    };
    (make(nq, Modality::Infrared), make(ng, Modality::Visible))
}

#[test]
fn average_precision_matches_brute_force() {
    let (q, g) = retrieval_pair(42, 5, 20, 4);
    let r = cmc_map(&q, &g, 20).unwrap();
    let qf = q.l2_normalize().unwrap().features_f64();
    let gf = g.l2_normalize().unwrap().features_f64();
    let (qid, gid) = (q.true_ids().unwrap(), g.true_ids().unwrap());
    let mut ap_sum = 0.0;
    let mut rank1 = 0.0;
    for i in 0..5 {
        let mut order: Vec<(f64, usize)> = (0..20).map(|j| (-gf.row(j).dot(&qf.row(i)), j)).collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rel: Vec<bool> = order.iter().map(|&(_, j)| gid[j] == qid[i]).collect();
        let hits = rel.iter().filter(|&&h| h).count() as f64;
        let mut ap = 0.0;
        for k in 0..20 {
            if rel[k] {
                ap += rel[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64;
            }
        }
        ap_sum += ap / hits;
        rank1 += rel[0] as u8 as f64;
    }
    assert!((r.map_score - ap_sum / 5.0).abs() < 1e-12);
    assert!((r.rank1() - rank1 / 5.0).abs() < 1e-12);
}

#[test]
fn histogram_totals_count_every_pair() {
    let c = generate(&SynthConfig { num_ids: 10, ..Default::default() }).unwrap();
    let set = c.train_embed();
    let d = cosine_distance(&set).unwrap();
    let h = distance_distribution(&set, &d, GroupBy::TrueClass, BinSpec { lo: 0.0, hi: 2.0, bins: 20 }).unwrap();
    // 20 visible + 10 infrared per identity
    assert_eq!(h.get(PairType::VisVis).total, 10 * 190);
    assert_eq!(h.get(PairType::IrIr).total, 10 * 45);
    assert_eq!(h.get(PairType::VisIr).total, 10 * 200);
    for p in [PairType::VisVis, PairType::IrIr, PairType::VisIr] {
        assert_eq!(h.get(p).counts.iter().sum::<u64>(), h.get(p).total);
    }
}

#[test]
fn cross_modal_distances_dominate_under_cosine() {
    use crossmodal::distance::{jaccard_distance, JaccardMode, JaccardParams};
    let c = generate(&SynthConfig::default()).unwrap();
    let set = c.train_embed();
    let spec = BinSpec { lo: 0.0, hi: 2.0, bins: 40 };
    let cos = cosine_distance(&set).unwrap();
    let h = distance_distribution(&set, &cos, GroupBy::TrueClass, spec).unwrap();
    let vi = h.get(PairType::VisIr).mean().unwrap();
    assert!(vi > h.get(PairType::VisVis).mean().unwrap());
    assert!(vi > h.get(PairType::IrIr).mean().unwrap());
    let jm = jaccard_distance(&set, &JaccardParams::default(), JaccardMode::ModalityAware).unwrap();
    let hj = distance_distribution(&set, &jm, GroupBy::TrueClass, BinSpec { lo: 0.0, hi: 1.0, bins: 40 }).unwrap();
    assert!(hj.gap().unwrap() < h.gap().unwrap());
}
