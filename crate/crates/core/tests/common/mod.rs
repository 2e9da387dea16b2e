#![allow(dead_code)]

use crossmodal::embed_store::{EmbeddingSet, Modality};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian rows, normalized, with `n_vis` visible rows followed by
/// `n_ir` infrared rows and a small per-modality shift.
pub fn random_set(seed: u64, n_vis: usize, n_ir: usize, dim: usize) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_vis + n_ir;
    let mut feats = Array2::<f32>::zeros((n, dim));
    for ((i, _), v) in feats.indexed_iter_mut() {
        let shift = if i < n_vis { 0.3 } else { -0.3 };
        *v = rng.sample::<f32, _>(StandardNormal) + shift;
    }
    let mut modality = vec![Modality::Visible; n_vis];
    modality.extend(vec![Modality::Infrared; n_ir]);
    EmbeddingSet::new(feats, modality).unwrap().l2_normalize().unwrap()
}

/// Rows with an identity structure: `ids` clusters, members jittered.
pub fn clustered_set(seed: u64, ids: usize, per_id: usize, dim: usize, jitter: f32) -> (Array2<f64>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..ids)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut out = Array2::<f64>::zeros((ids * per_id, dim));
    let mut labels = Vec::new();
    for k in 0..ids {
        for r in 0..per_id {
            for c in 0..dim {
                let e: f32 = rng.sample(StandardNormal);
                out[[k * per_id + r, c]] = (centers[k][c] + jitter * e) as f64;
            }
            labels.push(k as u32);
        }
    }
    (out, labels)
}

/// Central finite-difference check; returns the max relative error.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
