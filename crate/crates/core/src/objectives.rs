//! Prototype contrastive losses with analytic gradients.
//!
//! Gradients are taken with respect to the (unit-norm) batch features; the
//! prototype bank is treated as a constant. Losses are summed over the batch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::memory::{hard_negatives, PrototypeBank};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `d value / d feature`, one row per batch row.
    pub grad: Array2<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param(format!("tau = {tau} must be positive")));
    }
    Ok(())
}

/// Loss and gradient of `logsumexp_S(s) - mean_P(s)` for one query, with
/// `s_j = <m_j, f> / tau` over prototype rows `support`; `positives` are
/// positions within `support`.
fn row_loss(
    vectors: ArrayView2<'_, f64>,
    f: ArrayView1<'_, f64>,
    support: &[usize],
    positives: &[usize],
    tau: f64,
) -> (f64, Array1<f64>) {
    let s: Vec<f64> = support.iter().map(|&j| vectors.row(j).dot(&f) / tau).collect();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let lse = max + z.ln();
    let pos_mean = positives.iter().map(|&p| s[p]).sum::<f64>() / positives.len() as f64;
    let mut grad = Array1::<f64>::zeros(f.len());
    for (k, &j) in support.iter().enumerate() {
        grad.scaled_add(exps[k] / z, &vectors.row(j));
    }
    let w = 1.0 / positives.len() as f64;
    for &p in positives {
        grad.scaled_add(-w, &vectors.row(support[p]));
    }
    grad /= tau;
    (lse - pos_mean, grad)
}

fn collect(rows: Vec<(f64, Array1<f64>)>, dim: usize, scale: f64) -> Result<LossOutput> {
    let mut grad = Array2::zeros((rows.len(), dim));
    let mut value = 0.0;
    for (i, (l, g)) in rows.into_iter().enumerate() {
        value += l;
        grad.row_mut(i).assign(&(g * scale));
    }
    value *= scale;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite loss or gradient".into()));
    }
    Ok(LossOutput { value, grad })
}

/// Prototypical InfoNCE against every prototype of `bank`:
/// `sum_i -log softmax(<M, f_i> / tau)[labels[i]]`.
pub fn intra_infonce(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    bank: &PrototypeBank,
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch("one label per batch row required".into()));
    }
    if features.ncols() != bank.dim() {
        return Err(Error::DimensionMismatch("feature and bank dimensions differ".into()));
    }
    let c = bank.len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::IndexOutOfRange { index: bad, len: c });
    }
    let all: Vec<usize> = (0..c).collect();
    let rows: Vec<(f64, Array1<f64>)> = features
        .axis_iter(Axis(0))
        .into_par_iter()
        .zip(labels.par_iter())
        .map(|(f, &y)| row_loss(bank.vectors.view(), f, &all, &[y], tau))
        .collect();
    collect(rows, features.ncols(), 1.0)
}

/// Multi-positive loss against a split global bank. Each query contrasts
/// all prototypes of its cluster (`bank.positives[z]`) and its `k_neg`
/// hardest negatives (fewer when the bank is smaller); the batch sum is
/// halved, averaging the per-modality sums.
pub fn multi_positive_global(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    bank: &PrototypeBank,
    tau: f64,
    k_neg: usize,
) -> Result<LossOutput> {
    check_tau(tau)?;
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch("one label per batch row required".into()));
    }
    if features.ncols() != bank.dim() {
        return Err(Error::DimensionMismatch("feature and bank dimensions differ".into()));
    }
    for &z in labels {
        match bank.positives.get(z) {
            Some(p) if !p.is_empty() => {}
            _ => return Err(Error::param(format!("cluster {z} has no positive prototype"))),
        }
    }
    let rows: Result<Vec<(f64, Array1<f64>)>> = features
        .axis_iter(Axis(0))
        .into_par_iter()
        .zip(labels.par_iter())
        .map(|(f, &z)| {
            let pos = &bank.positives[z];
            let k = k_neg.min(bank.len() - pos.len());
            let mut support = pos.clone();
            support.extend(hard_negatives(bank, f, pos, k)?);
            let positions: Vec<usize> = (0..pos.len()).collect();
            Ok(row_loss(bank.vectors.view(), f, &support, &positions, tau))
        })
        .collect();
    collect(rows?, features.ncols(), 0.5)
}

/// Chain rule through `x -> x / |x|`: `(g - <g, x_hat> x_hat) / |x|` per row.
pub fn grad_through_normalization(
    raw_grad: ArrayView2<'_, f64>,
    pre_norm: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if raw_grad.dim() != pre_norm.dim() {
        return Err(Error::DimensionMismatch("gradient and feature shapes differ".into()));
    }
    let mut out = Array2::zeros(raw_grad.dim());
    for (i, ((g, x), mut o)) in raw_grad
        .axis_iter(Axis(0))
        .zip(pre_norm.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
        .enumerate()
    {
        let n = x.dot(&x).sqrt();
        if !(n > 0.0) {
            return Err(Error::ZeroNorm(i));
        }
        let xh = &x / n;
        let along = g.dot(&xh);
        o.assign(&((&g - &(&xh * along)) / n));
    }
    Ok(out)
}
