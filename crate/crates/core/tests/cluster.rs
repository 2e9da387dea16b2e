mod common;

use crossmodal::cluster::{
    cluster_global, cluster_intra, dbscan_values, mixed_cluster_rate, subset_sample,
    ClusterAssignment, ClusterConfig, NOISE,
};
use crossmodal::distance::JaccardMode;
use crossmodal::embed_store::Modality;
use crossmodal::eval::ari;
use crossmodal::synth::{generate, SynthConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn euclid(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let d = &x.row(i) - &x.row(j);
        d.dot(&d).sqrt()
    })
}

/// Cores joined through eps-edges, components numbered by their lowest
/// core, borders given to their lowest-index core neighbor.
fn reference_dbscan(d: &Array2<f64>, eps: f64, min_samples: usize) -> Vec<i32> {
    let n = d.nrows();
    let near = |i: usize, j: usize| d[[i, j]] <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_samples)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label_of_root = std::collections::HashMap::new();
    let mut labels = vec![NOISE; n];
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let next = label_of_root.len() as i32;
            labels[i] = *label_of_root.entry(r).or_insert(next);
        }
    }
    for i in 0..n {
        if !core[i] {
            if let Some(c) = (0..n).find(|&j| core[j] && near(i, j)) {
                labels[i] = labels[c];
            }
        }
    }
    labels
}

#[test]
fn thirty_point_instance_matches_reference() {
    // three blobs of nine points plus three outliers in the plane
    let mut pts = Vec::new();
    for (cx, cy) in [(0.0, 0.0), (3.0, 0.0), (0.0, 3.0)] {
        for k in 0..9 {
            let a = k as f64 * 0.7;
            pts.push([cx + 0.3 * a.cos(), cy + 0.3 * a.sin() * (k % 3) as f64 / 2.0]);
        }
    }
    pts.extend([[1.5, 1.5], [5.0, 5.0], [0.55, 0.0]]);
    let x = Array2::from_shape_fn((30, 2), |(i, j)| pts[i][j]);
    let d = euclid(&x);
    for (eps, min) in [(0.4, 4), (0.6, 3), (0.25, 5)] {
        let got = dbscan_values(&d, eps, min).unwrap();
        assert_eq!(got.labels, reference_dbscan(&d, eps, min), "eps {eps} min {min}");
    }
}

fn same_partition(a: &[i32], b: &[i32]) -> bool {
    let n = a.len();
    (0..n).all(|i| {
        (a[i] == NOISE) == (b[i] == NOISE)
            && (0..n).all(|j| a[i] == NOISE || (a[i] == a[j]) == (b[i] == b[j]))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matches_reference_on_random_points(seed in 0u64..10_000, eps in 0.2f64..1.5, min in 2usize..6) {
        let (x, _) = common::clustered_set(seed, 4, 8, 3, 0.5);
        let d = euclid(&x);
        prop_assert_eq!(dbscan_values(&d, eps, min).unwrap().labels, reference_dbscan(&d, eps, min));
    }

    #[test]
    fn labels_contiguous_noise_uncounted(seed in 0u64..10_000, eps in 0.2f64..1.5) {
        let (x, _) = common::clustered_set(seed, 5, 6, 3, 0.4);
        let a = dbscan_values(&euclid(&x), eps, 4).unwrap();
        let used: std::collections::BTreeSet<i32> = a.labels.iter().copied().filter(|&l| l >= 0).collect();
        prop_assert_eq!(used.into_iter().collect::<Vec<_>>(), (0..a.num_clusters as i32).collect::<Vec<_>>());
        prop_assert_eq!(a.members.iter().map(Vec::len).sum::<usize>() + a.noise_count(), a.len());
    }

    #[test]
    fn permutation_invariant(seed in 0u64..10_000) {
        // well separated blobs leave no border point between two clusters
        let (x, _) = common::clustered_set(seed, 4, 8, 6, 0.05);
        let n = x.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let d = euclid(&x);
        let dp = Array2::from_shape_fn((n, n), |(i, j)| d[[perm[i], perm[j]]]);
        let base = dbscan_values(&d, 0.6, 4).unwrap().labels;
        let permuted = dbscan_values(&dp, 0.6, 4).unwrap().labels;
        let mut back = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            back[p] = permuted[k];
        }
        prop_assert!(same_partition(&base, &back));
    }

    #[test]
    fn core_structure_permutation_invariant(seed in 0u64..10_000, eps in 0.3f64..1.2) {
        let (x, _) = common::clustered_set(seed, 4, 6, 2, 0.6);
        let n = x.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let d = euclid(&x);
        let dp = Array2::from_shape_fn((n, n), |(i, j)| d[[perm[i], perm[j]]]);
        let a = dbscan_values(&d, eps, 3).unwrap();
        let b = dbscan_values(&dp, eps, 3).unwrap();
        let core = |i: usize| (0..n).filter(|&j| d[[i, j]] <= eps).count() >= 3;
        let mut back = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            back[p] = b.labels[k];
        }
        prop_assert_eq!(a.num_clusters, b.num_clusters);
        for i in (0..n).filter(|&i| core(i)) {
            for j in (0..n).filter(|&j| core(j)) {
                prop_assert_eq!(a.labels[i] == a.labels[j], back[i] == back[j]);
            }
        }
        prop_assert_eq!(a.noise_count(), b.noise_count());
    }
}

#[test]
fn subset_leaves_unsampled_rows_unlabeled() {
    let c = generate(&SynthConfig::default()).unwrap();
    let set = c.train_embed();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = cluster_intra(&set, Modality::Visible, &ClusterConfig::default(), &mut rng).unwrap();
    let src = a.source_indices.clone().unwrap();
    assert_eq!(src.len(), 500);
    let parent = a.parent_labels(set.len()).unwrap();
    for i in 0..set.len() {
        if !src.contains(&i) {
            assert_eq!(parent[i], NOISE);
        }
    }
    assert!(src.iter().all(|&i| set.modality()[i] == Modality::Visible));
}

#[test]
fn successive_subsets_differ() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let a = subset_sample(1000, 0.5, &mut rng).unwrap();
        let b = subset_sample(1000, 0.5, &mut rng).unwrap();
        assert_ne!(a, b);
    }
}

fn truth(set: &crossmodal::embed_store::EmbeddingSet, a: &ClusterAssignment) -> Vec<u32> {
    let ids = set.true_ids().unwrap();
    match &a.source_indices {
        Some(src) => src.iter().map(|&i| ids[i]).collect(),
        None => ids.to_vec(),
    }
}

#[test]
fn infrared_clusters_track_identities() {
    let mut total = 0.0;
    for seed in 0..3 {
        let c = generate(&SynthConfig { seed, ..Default::default() }).unwrap();
        let set = c.train_embed();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = cluster_intra(&set, Modality::Infrared, &ClusterConfig::default(), &mut rng).unwrap();
        total += ari(&a, &truth(&set, &a)).unwrap();
    }
    assert!(total / 3.0 > 0.5, "{}", total / 3.0);
}

#[test]
fn rectified_global_clustering_wins_with_gap() {
    let c = generate(&SynthConfig::default()).unwrap();
    let set = c.train_embed();
    let cfg = ClusterConfig::default();
    let v = cluster_global(&set, &cfg, JaccardMode::Vanilla).unwrap();
    let m = cluster_global(&set, &cfg, JaccardMode::ModalityAware).unwrap();
    let ids = set.true_ids().unwrap();
    assert!(ari(&m, ids).unwrap() > ari(&v, ids).unwrap());
    assert!(mixed_cluster_rate(&m, set.modality()) > mixed_cluster_rate(&v, set.modality()));
}

#[test]
fn modes_agree_without_gap() {
    let c = generate(&SynthConfig { modality_gap: 0.0, ..Default::default() }).unwrap();
    let set = c.train_embed();
    let cfg = ClusterConfig::default();
    let ids = set.true_ids().unwrap();
    let v = ari(&cluster_global(&set, &cfg, JaccardMode::Vanilla).unwrap(), ids).unwrap();
    let m = ari(&cluster_global(&set, &cfg, JaccardMode::ModalityAware).unwrap(), ids).unwrap();
    assert!((v - m).abs() < 0.05, "{v} vs {m}");
}

#[test]
fn subset_clustering_curbs_over_clustering() {
    // Twice the visible images per identity, spread over sub-centers.
    let c = generate(&SynthConfig {
        imgs_per_id_vis: 40,
        modes_per_id: 2,
        mode_spread: 0.7,
        ..Default::default()
    })
    .unwrap();
    let set = c.train_embed();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = ClusterConfig { subset_ratio: 1.0, ..Default::default() };
    let half = ClusterConfig { subset_ratio: 0.5, ..Default::default() };
    let nf = cluster_intra(&set, Modality::Visible, &full, &mut rng).unwrap().num_clusters;
    let nh = cluster_intra(&set, Modality::Visible, &half, &mut rng).unwrap().num_clusters;
    assert!((nh as i64 - 50).abs() < (nf as i64 - 50).abs(), "full {nf} half {nh}");
}
