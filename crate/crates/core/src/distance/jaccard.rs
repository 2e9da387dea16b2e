use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    balanced_neighbors, cosine_distance, knn, knn_modality_balanced, DistanceMatrix, Metric,
    NeighborList,
};
use crate::embed_store::{EmbeddingSet, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JaccardMode {
    Vanilla,
    ModalityAware,
}

impl JaccardMode {
    pub fn metric(self) -> Metric {
        match self {
            JaccardMode::Vanilla => Metric::JaccardVanilla,
            JaccardMode::ModalityAware => Metric::JaccardModalityAware,
        }
    }
}

/// What local query expansion averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LqeTarget {
    /// Neighbor encodings (the standard re-ranking expansion).
    #[default]
    Encoding,
    /// Rows of the un-expanded Jaccard distance, symmetrized afterwards.
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JaccardParams {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the cosine distance mixed into the output; 0 gives pure
    /// Jaccard.
    pub mix_weight: f64,
    pub lqe_target: LqeTarget,
}

impl Default for JaccardParams {
    fn default() -> Self {
        Self {
            k1: 30,
            k2: 6,
            mix_weight: 0.0,
            lqe_target: LqeTarget::Encoding,
        }
    }
}

impl JaccardParams {
    pub fn new(k1: usize, k2: usize) -> Self {
        Self {
            k1,
            k2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k1 % 2 != 0 {
            return Err(Error::param(format!("k1 = {} must be positive and even", self.k1)));
        }
        if self.k2 == 0 || self.k2 % 2 != 0 {
            return Err(Error::param(format!("k2 = {} must be positive and even", self.k2)));
        }
        if self.k2 > self.k1 {
            return Err(Error::param("k2 must not exceed k1"));
        }
        if !(0.0..=1.0).contains(&self.mix_weight) {
            return Err(Error::param("mix_weight must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Expanded k-reciprocal neighbor set of every query, ascending indices.
/// Each set contains its query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReciprocalSet {
    pub sets: Vec<Vec<usize>>,
}

/// Sparse rows of L1-normalized non-negative weights, sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEncoding {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl NeighborEncoding {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.rows.len();
        let mut out = Array2::zeros((n, n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[[i, j]] = w;
            }
        }
        out
    }
}

/// `query` followed by its first `k` neighbors.
fn forward(nl: &NeighborList, query: usize, k: usize) -> impl Iterator<Item = usize> + '_ {
    std::iter::once(query).chain(nl.indices[query][..k].iter().copied())
}

fn in_forward(nl: &NeighborList, owner: usize, k: usize, target: usize) -> bool {
    owner == target || nl.indices[owner][..k].contains(&target)
}

/// Members `j` of `query`'s forward list whose own forward list holds `query`.
fn mutual(nl: &NeighborList, query: usize, k: usize) -> Vec<usize> {
    forward(nl, query, k)
        .filter(|&j| in_forward(nl, j, k, query))
        .collect()
}

/// k-reciprocal sets with half-size expansion.
///
/// A candidate `c` of `R(i, k1)` contributes its set `R(c, k1/2)` when more
/// than two thirds of that set already lies in `R(i, k1)`.
pub fn reciprocal_expand(neighbors: &NeighborList, k1: usize) -> Result<ReciprocalSet> {
    if k1 == 0 || k1 % 2 != 0 {
        return Err(Error::param(format!("k1 = {k1} must be positive and even")));
    }
    if neighbors.indices.iter().any(|l| l.len() < k1) {
        return Err(Error::param(format!(
            "neighbor lists shorter than k1 = {k1}"
        )));
    }
    let half = k1 / 2;
    let n = neighbors.len();
    let half_sets: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| mutual(neighbors, i, half))
        .collect();
    let sets = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = mutual(neighbors, i, k1);
            let mut expanded = base.clone();
            for &c in &base {
                let cand = &half_sets[c];
                let overlap = cand.iter().filter(|j| base.contains(j)).count();
                if 3 * overlap > 2 * cand.len() {
                    expanded.extend_from_slice(cand);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            expanded
        })
        .collect();
    Ok(ReciprocalSet { sets })
}

/// Weights `exp(-D[i][j])` over each reciprocal set, normalized to sum 1.
pub fn v_encode(d: &DistanceMatrix, reciprocal: &ReciprocalSet) -> NeighborEncoding {
    let rows = reciprocal
        .sets
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let min = set
                .iter()
                .map(|&j| d.get(i, j))
                .fold(f64::INFINITY, f64::min);
            let mut row: Vec<(usize, f64)> =
                set.iter().map(|&j| (j, (-(d.get(i, j) - min)).exp())).collect();
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            for (_, w) in row.iter_mut() {
                *w /= total;
            }
            row
        })
        .collect();
    NeighborEncoding { rows }
}

/// Mean of the encoding rows listed in each group.
fn average_rows(v: &NeighborEncoding, groups: &[Vec<usize>]) -> NeighborEncoding {
    let n = v.len();
    let rows = groups
        .par_iter()
        .map_init(
            || (vec![0.0f64; n], Vec::<usize>::new()),
            |(acc, touched), group| {
                for &g in group {
                    for &(c, w) in &v.rows[g] {
                        if acc[c] == 0.0 {
                            touched.push(c);
                        }
                        acc[c] += w;
                    }
                }
                touched.sort_unstable();
                touched.dedup();
                let scale = 1.0 / group.len() as f64;
                let row = touched
                    .iter()
                    .map(|&c| {
                        let w = acc[c] * scale;
                        acc[c] = 0.0;
                        (c, w)
                    })
                    .collect();
                touched.clear();
                row
            },
        )
        .collect();
    NeighborEncoding { rows }
}

/// Local query expansion over the query and its `k2 - 1` nearest neighbors.
pub fn lqe(v: &NeighborEncoding, neighbors: &NeighborList, k2: usize) -> Result<NeighborEncoding> {
    let groups = plain_groups(neighbors, k2)?;
    Ok(average_rows(v, &groups))
}

fn plain_groups(neighbors: &NeighborList, k2: usize) -> Result<Vec<Vec<usize>>> {
    if k2 == 0 || neighbors.indices.iter().any(|l| l.len() + 1 < k2) {
        return Err(Error::param(format!("k2 = {k2} exceeds neighbor list length + 1")));
    }
    Ok((0..neighbors.len())
        .map(|i| forward(neighbors, i, k2 - 1).collect())
        .collect())
}

/// Query plus its first `k2/2 - 1` intra- and `k2/2` inter-modality entries
/// of a balanced list.
fn balanced_groups(neighbors: &NeighborList, modality: &[Modality], k2: usize) -> Vec<Vec<usize>> {
    let half = k2 / 2;
    (0..neighbors.len())
        .map(|i| {
            let mut group = vec![i];
            let mut intra = 0;
            let mut inter = 0;
            for &j in &neighbors.indices[i] {
                if modality[j] == modality[i] {
                    if intra + 1 < half {
                        group.push(j);
                        intra += 1;
                    }
                } else if inter < half {
                    group.push(j);
                    inter += 1;
                }
            }
            group
        })
        .collect()
}

/// Balanced local query expansion: the mean of the encodings of the query,
/// its `k2/2 - 1` nearest same-modality rows and its `k2/2` nearest
/// other-modality rows (`k2` rows in total).
pub fn balanced_lqe(
    v: &NeighborEncoding,
    d: &DistanceMatrix,
    modality: &[Modality],
    k2: usize,
) -> Result<NeighborEncoding> {
    if k2 == 0 || k2 % 2 != 0 {
        return Err(Error::param(format!("k2 = {k2} must be positive and even")));
    }
    let nl = balanced_neighbors(d, modality, k2 / 2 - 1, k2 / 2)?;
    Ok(average_rows(v, &balanced_groups(&nl, modality, k2)))
}

/// Weighted Jaccard distance `1 - sum(min) / sum(max)` between encoding rows.
pub fn jaccard_from_v(v: &NeighborEncoding) -> Result<DistanceMatrix> {
    jaccard_with_metric(v, Metric::JaccardVanilla, None)
}

fn jaccard_with_metric(
    v: &NeighborEncoding,
    metric: Metric,
    params: Option<JaccardParams>,
) -> Result<DistanceMatrix> {
    let n = v.len();
    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut sums = vec![0.0f64; n];
    for (i, row) in v.rows.iter().enumerate() {
        for &(c, w) in row {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::param(format!("invalid weight {w} at ({i}, {c})")));
            }
            if c >= n {
                return Err(Error::IndexOutOfRange { index: c, len: n });
            }
            inverted[c].push((i, w));
            sums[i] += w;
        }
    }
    let mut values = Array2::<f64>::ones((n, n));
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each_init(
            || (vec![0.0f64; n], Vec::<usize>::new()),
            |(acc, touched), (i, mut out)| {
                // Columns ascending: (i, j) and (j, i) accumulate the same
                // terms in the same order.
                for &(c, wi) in &v.rows[i] {
                    for &(j, wj) in &inverted[c] {
                        if acc[j] == 0.0 {
                            touched.push(j);
                        }
                        acc[j] += wi.min(wj);
                    }
                }
                for &j in touched.iter() {
                    let min_sum = acc[j];
                    let max_sum = sums[i] + sums[j] - min_sum;
                    let sim = if max_sum > 0.0 { min_sum / max_sum } else { 0.0 };
                    out[j] = (1.0 - sim).clamp(0.0, 1.0);
                    acc[j] = 0.0;
                }
                touched.clear();
                out[i] = 0.0;
            },
        );
    Ok(DistanceMatrix::new_unchecked(values, metric, params))
}

/// Jaccard distance over a precomputed cosine distance matrix. Neighbor
/// weights are `exp(-2 D)`, the squared Euclidean distance of unit rows.
pub fn jaccard_from_cosine(
    cosine: &DistanceMatrix,
    modality: &[Modality],
    params: &JaccardParams,
    mode: JaccardMode,
) -> Result<DistanceMatrix> {
    params.validate()?;
    if modality.len() != cosine.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} modality tags for {} rows",
            modality.len(),
            cosine.len()
        )));
    }
    let (nl, groups) = match mode {
        JaccardMode::Vanilla => {
            let nl = knn(cosine, params.k1)?;
            let groups = plain_groups(&nl, params.k2)?;
            (nl, groups)
        }
        JaccardMode::ModalityAware => {
            let nl = knn_modality_balanced(cosine, modality, params.k1)?;
            // k2/2 <= k1/2, so the balanced k1 list already holds both halves.
            let groups = balanced_groups(&nl, modality, params.k2);
            (nl, groups)
        }
    };
    let reciprocal = reciprocal_expand(&nl, params.k1)?;
    // Weights use the squared Euclidean distance between unit vectors.
    let sq = DistanceMatrix::new_unchecked(cosine.values() * 2.0, Metric::Cosine, None);
    let v = v_encode(&sq, &reciprocal);
    let metric = mode.metric();
    let jaccard = match params.lqe_target {
        LqeTarget::Encoding => {
            let expanded = average_rows(&v, &groups);
            jaccard_with_metric(&expanded, metric, Some(params.clone()))?
        }
        LqeTarget::Distance => {
            let base = jaccard_with_metric(&v, metric, Some(params.clone()))?;
            average_distance_rows(&base, &groups)
        }
    };
    if params.mix_weight > 0.0 {
        jaccard.mix_with(cosine, params.mix_weight)
    } else {
        Ok(jaccard)
    }
}

fn average_distance_rows(d: &DistanceMatrix, groups: &[Vec<usize>]) -> DistanceMatrix {
    let n = d.len();
    let mut avg = Array2::<f64>::zeros((n, n));
    for (i, group) in groups.iter().enumerate() {
        let mut row = avg.row_mut(i);
        for &g in group {
            row += &d.row(g);
        }
        row /= group.len() as f64;
    }
    let mut values = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (avg[[i, j]] + avg[[j, i]]);
            values[[i, j]] = s;
            values[[j, i]] = s;
        }
    }
    DistanceMatrix::new_unchecked(values, d.metric(), d.params().cloned())
}

/// Full Jaccard pipeline on an embedding set.
pub fn jaccard_distance(
    set: &EmbeddingSet,
    params: &JaccardParams,
    mode: JaccardMode,
) -> Result<DistanceMatrix> {
    params.validate()?;
    let cosine = cosine_distance(set)?;
    jaccard_from_cosine(&cosine, set.modality(), params, mode)
}
