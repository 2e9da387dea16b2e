use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::embed_store::Modality;
use crate::error::{Error, Result};

/// Per-query neighbor lists, ascending by distance (ties by index). The
/// query itself is never listed.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
    pub k: usize,
    /// Built from separate intra- and inter-modality halves.
    pub balanced: bool,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn of(&self, query: usize) -> &[usize] {
        &self.indices[query]
    }
}

#[inline]
fn by_distance<'a>(row: &'a ndarray::ArrayView1<'_, f64>) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b))
}

/// The `k` smallest of `candidates` under `(distance, index)` order, sorted.
fn k_smallest(row: &ndarray::ArrayView1<'_, f64>, mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    let cmp = by_distance(row);
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k, &cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(&cmp);
    candidates
}

fn assemble(d: &DistanceMatrix, indices: Vec<Vec<usize>>, k: usize, balanced: bool) -> NeighborList {
    let distances = indices
        .iter()
        .enumerate()
        .map(|(i, list)| list.iter().map(|&j| d.get(i, j)).collect())
        .collect();
    NeighborList {
        indices,
        distances,
        k,
        balanced,
    }
}

/// The `k` nearest non-self rows of every query.
pub fn knn(d: &DistanceMatrix, k: usize) -> Result<NeighborList> {
    let n = d.len();
    if k >= n {
        return Err(Error::param(format!("k = {k} must be below N = {n}")));
    }
    let indices: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = d.row(i);
            let candidates: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            k_smallest(&row, candidates, k)
        })
        .collect();
    Ok(assemble(d, indices, k, false))
}

/// Union of the `n_intra` nearest same-modality and `n_inter` nearest
/// other-modality rows (self excluded), merged ascending.
pub fn balanced_neighbors(
    d: &DistanceMatrix,
    modality: &[Modality],
    n_intra: usize,
    n_inter: usize,
) -> Result<NeighborList> {
    let n = d.len();
    if modality.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} modality tags for {n} rows",
            modality.len()
        )));
    }
    let by_mod: [Vec<usize>; 2] = Modality::ALL.map(|m| {
        (0..n).filter(|&i| modality[i] == m).collect::<Vec<_>>()
    });
    for (m, rows) in Modality::ALL.iter().zip(&by_mod) {
        let needed = n_intra.max(n_inter) + 1;
        if rows.len() < needed {
            return Err(Error::InsufficientRows(format!(
                "{m} has {} rows, balanced retrieval needs at least {needed}",
                rows.len()
            )));
        }
    }
    let indices: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = d.row(i);
            let own = modality[i].as_byte() as usize;
            let intra: Vec<usize> = by_mod[own].iter().copied().filter(|&j| j != i).collect();
            let inter = by_mod[1 - own].clone();
            let mut merged = k_smallest(&row, intra, n_intra);
            merged.extend(k_smallest(&row, inter, n_inter));
            merged.sort_unstable_by(by_distance(&row));
            merged
        })
        .collect();
    Ok(assemble(d, indices, n_intra + n_inter, true))
}

/// Rectified neighbor lists: `k1/2` intra-modality plus `k1/2`
/// inter-modality neighbors, sorted by distance to the query.
pub fn knn_modality_balanced(
    d: &DistanceMatrix,
    modality: &[Modality],
    k1: usize,
) -> Result<NeighborList> {
    if k1 == 0 || k1 % 2 != 0 {
        return Err(Error::param(format!("k1 = {k1} must be positive and even")));
    }
    balanced_neighbors(d, modality, k1 / 2, k1 / 2)
}

/// Share of inter-modality entries in each neighbor list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub per_query: Vec<f64>,
    pub mean: f64,
}

pub fn knn_composition(neighbors: &NeighborList, modality: &[Modality]) -> Composition {
    let per_query: Vec<f64> = neighbors
        .indices
        .iter()
        .enumerate()
        .map(|(i, list)| {
            if list.is_empty() {
                return 0.0;
            }
            let inter = list.iter().filter(|&&j| modality[j] != modality[i]).count();
            inter as f64 / list.len() as f64
        })
        .collect();
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().sum::<f64>() / per_query.len() as f64
    };
    Composition { per_query, mean }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::Metric;
    use ndarray::Array2;

    fn from_points(xs: &[f64]) -> DistanceMatrix {
        let n = xs.len();
        let v = Array2::from_shape_fn((n, n), |(i, j)| (xs[i] - xs[j]).abs());
        DistanceMatrix::new(v, Metric::Cosine, None).unwrap()
    }

    #[test]
    fn duplicate_is_nearest() {
        let d = from_points(&[0.0, 0.5, 0.0, 1.0]);
        let nl = knn(&d, 1).unwrap();
        assert_eq!(nl.of(0), &[2]);
        assert_eq!(nl.of(2), &[0]);
    }

    #[test]
    fn exhaustive_k() {
        let d = from_points(&[0.0, 0.3, 0.1, 0.7]);
        let nl = knn(&d, 3).unwrap();
        assert_eq!(nl.of(0), &[2, 1, 3]);
        assert!(knn(&d, 4).is_err());
    }

    #[test]
    fn ties_break_by_lower_index() {
        // rows 3 and 7 both at distance 0.5 from query 0
        let mut xs = vec![0.0, 2.0, 2.1, 0.5, 2.2, 2.3, 2.4, 0.5];
        xs[1] = 3.0;
        let d = from_points(&xs);
        let nl = knn(&d, 1).unwrap();
        assert_eq!(nl.of(0), &[3]);
        let nl = knn(&d, 2).unwrap();
        assert_eq!(nl.of(0), &[3, 7]);
    }

    #[test]
    fn balanced_takes_halves_then_sorts() {
        // query 0 is VIS; VIS rows at .1 .2 .3, IR rows at .5 .6 .7
        let xs = [0.0, 0.1, 0.2, 0.3, 0.5, 0.6, 0.7];
        let m = [
            Modality::Visible,
            Modality::Visible,
            Modality::Visible,
            Modality::Visible,
            Modality::Infrared,
            Modality::Infrared,
            Modality::Infrared,
        ];
        let d = from_points(&xs);
        let nl = knn_modality_balanced(&d, &m, 4).unwrap();
        assert_eq!(nl.of(0), &[1, 2, 4, 5]);
        assert!(nl.distances[0].windows(2).all(|w| w[0] <= w[1]));
        assert!(nl.balanced);
        let c = knn_composition(&nl, &m);
        assert_eq!(c.mean, 0.5);
    }

    #[test]
    fn balanced_rejects_odd_or_small() {
        let xs = [0.0, 0.1, 0.2, 0.3];
        let m = [
            Modality::Visible,
            Modality::Visible,
            Modality::Visible,
            Modality::Infrared,
        ];
        let d = from_points(&xs);
        assert!(knn_modality_balanced(&d, &m, 3).is_err());
        assert!(matches!(
            knn_modality_balanced(&d, &m, 2),
            Err(Error::InsufficientRows(_))
        ));
    }

    #[test]
    fn all_intra_composition_is_zero() {
        let d = from_points(&[0.0, 0.1, 5.0, 5.1]);
        let m = [
            Modality::Visible,
            Modality::Visible,
            Modality::Infrared,
            Modality::Infrared,
        ];
        let nl = knn(&d, 1).unwrap();
        assert_eq!(knn_composition(&nl, &m).mean, 0.0);
    }
}
