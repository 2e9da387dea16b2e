#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use crossmodal::embed_store::{EmbeddingSet, Modality};
use crossmodal::memory::{BankTag, PrototypeBank};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn xma(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xma"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("xma runs")
}

/// Runs `xma` and panics with its stderr unless it exits 0.
pub fn xma_ok(dir: &Path, args: &[&str]) -> Output {
    let out = xma(dir, args);
    assert!(
        out.status.success(),
        "xma {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Normalized uniform rows with a shift separating the modalities.
pub fn random_set(seed: u64, n_vis: usize, n_ir: usize, dim: usize) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_vis + n_ir;
    let feats = Array2::from_shape_fn((n, dim), |(i, _)| {
        let shift = if i < n_vis { 0.4 } else { -0.4 };
        rng.random_range(-1.0f32..1.0) + shift
    });
    let mut modality = vec![Modality::Visible; n_vis];
    modality.extend(vec![Modality::Infrared; n_ir]);
    EmbeddingSet::new(feats, modality).unwrap().l2_normalize().unwrap()
}

fn ranked(d: &Array2<f64>, i: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut c: Vec<usize> = (0..d.nrows()).filter(|&j| j != i && keep(j)).collect();
    c.sort_by(|&a, &b| d[[i, a]].partial_cmp(&d[[i, b]]).unwrap().then(a.cmp(&b)));
    c
}

/// Jaccard distance evaluated densely from the definitions: k-reciprocal
/// sets, two-thirds expansion, `exp(-2 d)` weights, query expansion over
/// `[self] + neighbors`, then one minus the min/max overlap.
pub fn jaccard_oracle(set: &EmbeddingSet, k1: usize, k2: usize, aware: bool) -> Array2<f64> {
    let x = set.features_f64();
    let m = set.modality();
    let n = x.nrows();
    let d = Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return 0.0;
        }
        let (a, b) = (i.min(j), i.max(j));
        let s: f64 = (0..x.ncols()).map(|c| x[[a, c]] * x[[b, c]]).sum();
        (1.0 - s).clamp(0.0, 2.0)
    });
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            if aware {
                let mut l = ranked(&d, i, |j| m[j] == m[i])[..k1 / 2].to_vec();
                l.extend_from_slice(&ranked(&d, i, |j| m[j] != m[i])[..k1 / 2]);
                l.sort_by(|&a, &b| d[[i, a]].partial_cmp(&d[[i, b]]).unwrap().then(a.cmp(&b)));
                l
            } else {
                ranked(&d, i, |_| true)[..k1].to_vec()
            }
        })
        .collect();
    let forward = |i: usize, k: usize| {
        let mut f = vec![i];
        f.extend_from_slice(&lists[i][..k]);
        f
    };
    let reciprocal = |i: usize, k: usize| -> Vec<usize> {
        forward(i, k).into_iter().filter(|&j| forward(j, k).contains(&i)).collect()
    };
    let mut v = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let base = reciprocal(i, k1);
        let mut members = base.clone();
        for &c in &base {
            let cand = reciprocal(c, k1 / 2);
            let overlap = cand.iter().filter(|j| base.contains(j)).count();
            if 3 * overlap > 2 * cand.len() {
                members.extend(cand);
            }
        }
        members.sort_unstable();
        members.dedup();
        let total: f64 = members.iter().map(|&j| (-2.0 * d[[i, j]]).exp()).sum();
        for &j in &members {
            v[[i, j]] = (-2.0 * d[[i, j]]).exp() / total;
        }
    }
    let mut vq = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut group = vec![i];
        if aware {
            group.extend_from_slice(&ranked(&d, i, |j| m[j] == m[i])[..k2 / 2 - 1]);
            group.extend_from_slice(&ranked(&d, i, |j| m[j] != m[i])[..k2 / 2]);
        } else {
            group.extend_from_slice(&ranked(&d, i, |_| true)[..k2 - 1]);
        }
        for &g in &group {
            for c in 0..n {
                vq[[i, c]] += v[[g, c]] / group.len() as f64;
            }
        }
    }
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, 0.0);
        for c in 0..n {
            lo += vq[[i, c]].min(vq[[j, c]]);
            hi += vq[[i, c]].max(vq[[j, c]]);
        }
        1.0 - lo / hi
    })
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f64..1.0));
    for mut r in m.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    m
}

/// `clusters` clusters; the first `mixed` carry a visible and an infrared
/// prototype, the rest a visible one.
pub fn random_bank(rng: &mut ChaCha8Rng, clusters: usize, mixed: usize, d: usize) -> PrototypeBank {
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

pub fn central_differences(x: &Array2<f64>, loss: impl Fn(&Array2<f64>) -> f64) -> Vec<f64> {
    const STEP: f64 = 1e-4;
    (0..x.len())
        .map(|idx| {
            let at = (idx / x.ncols(), idx % x.ncols());
            let mut up = x.clone();
            up[at] += STEP;
            let mut down = x.clone();
            down[at] -= STEP;
            (loss(&up) - loss(&down)) / (2.0 * STEP)
        })
        .collect()
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Largest numeric difference between two text outputs that agree on
/// every non-numeric token; `None` when the structure differs.
pub fn text_numeric_diff(a: &str, b: &str) -> Option<f64> {
    let split = |s: &str| -> Vec<String> {
        s.split(|c: char| c.is_whitespace() || ",:[]{}\"".contains(c))
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect()
    };
    let (ta, tb) = (split(a), split(b));
    if ta.len() != tb.len() {
        return None;
    }
    let mut worst = 0.0f64;
    for (x, y) in ta.iter().zip(&tb) {
        if x == y {
            continue;
        }
        match (x.parse::<f64>(), y.parse::<f64>()) {
            (Ok(u), Ok(v)) => worst = worst.max((u - v).abs()),
            _ => return None,
        }
    }
    Some(worst)
}

/// Largest difference between two `f32` payloads that share a header of
/// `header` bytes.
pub fn binary_numeric_diff(a: &[u8], b: &[u8], header: usize) -> Option<f64> {
    if a.len() != b.len() || a[..header] != b[..header] {
        return None;
    }
    let floats = |s: &[u8]| -> Vec<f32> {
        s.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    };
    let (fa, fb) = (floats(&a[header..]), floats(&b[header..]));
    Some(fa.iter().zip(&fb).fold(0.0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs())))
}
