//! Density clustering over precomputed distances.
//!
//! [`dbscan`] labels core points (at least `min_samples` rows within `eps`,
//! the row itself included) by connected component, attaches each border
//! point to the cluster of its lowest-index core neighbor and marks the rest
//! as noise (`-1`). Clusters are numbered in order of their lowest-index core
//! point, so labels are contiguous from 0 and reproducible.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{jaccard_distance, DistanceMatrix, JaccardMode, JaccardParams};
use crate::embed_store::{EmbeddingSet, Modality};
use crate::error::{Error, Result};

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub eps: f64,
    pub min_samples: usize,
    /// Fraction of visible rows clustered per call of [`cluster_intra`].
    pub subset_ratio: f64,
    pub seed: u64,
    pub jaccard: JaccardParams,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            eps: 0.6,
            min_samples: 4,
            subset_ratio: 0.5,
            seed: 0,
            jaccard: JaccardParams::default(),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::param(format!("eps = {} must be positive", self.eps)));
        }
        if self.min_samples == 0 {
            return Err(Error::param("min_samples must be positive"));
        }
        if !(self.subset_ratio > 0.0 && self.subset_ratio <= 1.0) {
            return Err(Error::param(format!(
                "subset_ratio = {} must lie in (0, 1]",
                self.subset_ratio
            )));
        }
        self.jaccard.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// `NOISE` or a cluster id in `0..num_clusters`.
    pub labels: Vec<i32>,
    pub num_clusters: usize,
    /// Member rows of each cluster, ascending.
    pub members: Vec<Vec<usize>>,
    /// Parent-set row of each labelled row, when clustering ran on a subset.
    pub source_indices: Option<Vec<usize>>,
}

impl ClusterAssignment {
    /// Builds an assignment from arbitrary integer labels (negative = noise),
    /// renumbering clusters by first appearance.
    pub fn from_labels(raw: &[i64]) -> Self {
        let mut map = std::collections::HashMap::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let labels = raw
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l < 0 {
                    return NOISE;
                }
                let id = *map.entry(l).or_insert_with(|| {
                    members.push(Vec::new());
                    members.len() - 1
                });
                members[id].push(i);
                id as i32
            })
            .collect();
        Self {
            labels,
            num_clusters: members.len(),
            members,
            source_indices: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// Labels spread over a parent set of `parent_len` rows; rows outside the
    /// subset get `NOISE`.
    pub fn parent_labels(&self, parent_len: usize) -> Result<Vec<i32>> {
        match &self.source_indices {
            None => {
                if parent_len != self.labels.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} labels for {parent_len} parent rows",
                        self.labels.len()
                    )));
                }
                Ok(self.labels.clone())
            }
            Some(src) => {
                let mut out = vec![NOISE; parent_len];
                for (&p, &l) in src.iter().zip(&self.labels) {
                    if p >= parent_len {
                        return Err(Error::IndexOutOfRange {
                            index: p,
                            len: parent_len,
                        });
                    }
                    out[p] = l;
                }
                Ok(out)
            }
        }
    }

    /// Members of every cluster as parent-set rows.
    pub fn parent_members(&self) -> Vec<Vec<usize>> {
        match &self.source_indices {
            None => self.members.clone(),
            Some(src) => self
                .members
                .iter()
                .map(|m| m.iter().map(|&i| src[i]).collect())
                .collect(),
        }
    }
}

pub fn dbscan(d: &DistanceMatrix, config: &ClusterConfig) -> Result<ClusterAssignment> {
    dbscan_values(d.values(), config.eps, config.min_samples)
}

/// DBSCAN over a square matrix given directly.
pub fn dbscan_values(
    d: &ndarray::Array2<f64>,
    eps: f64,
    min_samples: usize,
) -> Result<ClusterAssignment> {
    let (n, m) = d.dim();
    if n != m {
        return Err(Error::DimensionMismatch(format!(
            "dbscan needs a square matrix, got {n}x{m}"
        )));
    }
    if !(eps > 0.0) || min_samples == 0 {
        return Err(Error::param("eps and min_samples must be positive"));
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).filter(|&j| d[[i, j]] <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_samples).collect();

    let mut labels = vec![NOISE; n];
    let mut next = 0i32;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed] != NOISE {
            continue;
        }
        labels[seed] = next;
        stack.push(seed);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && labels[q] == NOISE {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            if let Some(&c) = neighbors[i].iter().find(|&&j| core[j]) {
                labels[i] = labels[c];
            }
        }
    }
    let mut members = vec![Vec::new(); next as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            members[l as usize].push(i);
        }
    }
    Ok(ClusterAssignment {
        labels,
        num_clusters: next as usize,
        members,
        source_indices: None,
    })
}

/// `ceil(ratio * n)` distinct indices drawn uniformly, ascending.
pub fn subset_sample<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param(format!("ratio = {ratio} must lie in (0, 1]")));
    }
    let m = ((ratio * n as f64).ceil() as usize).min(n);
    if m == n {
        return Ok((0..n).collect());
    }
    let mut idx = rand::seq::index::sample(rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Clusters the rows of `set` tagged `modality` under vanilla Jaccard
/// distance. Visible rows are subsampled first when `subset_ratio < 1`.
/// `source_indices` always maps back into `set`.
pub fn cluster_intra<R: Rng + ?Sized>(
    set: &EmbeddingSet,
    modality: Modality,
    config: &ClusterConfig,
    rng: &mut R,
) -> Result<ClusterAssignment> {
    config.validate()?;
    let mut rows = set.indices_of(modality);
    if rows.is_empty() {
        return Err(Error::InsufficientRows(format!("no {modality} rows to cluster")));
    }
    if modality == Modality::Visible && config.subset_ratio < 1.0 {
        let pick = subset_sample(rows.len(), config.subset_ratio, rng)?;
        rows = pick.into_iter().map(|k| rows[k]).collect();
    }
    let view = set.subset_view(&rows)?;
    let d = jaccard_distance(&view.set, &config.jaccard, JaccardMode::Vanilla)?;
    let mut out = dbscan(&d, config)?;
    out.source_indices = Some(view.parent_indices);
    Ok(out)
}

/// Clusters both modalities jointly under modality-aware (or, for
/// comparison, vanilla) Jaccard distance.
pub fn cluster_global(
    set: &EmbeddingSet,
    config: &ClusterConfig,
    mode: JaccardMode,
) -> Result<ClusterAssignment> {
    config.validate()?;
    let (vis, ir) = set.modality_counts();
    if vis == 0 || ir == 0 {
        return Err(Error::InsufficientRows(
            "global clustering needs both modalities".into(),
        ));
    }
    let d = jaccard_distance(set, &config.jaccard, mode)?;
    dbscan(&d, config)
}

/// Share of clusters holding rows of both modalities; 0 without clusters.
pub fn mixed_cluster_rate(assignment: &ClusterAssignment, modality: &[Modality]) -> f64 {
    let members = assignment.parent_members();
    if members.is_empty() {
        return 0.0;
    }
    let mixed = members
        .iter()
        .filter(|m| {
            let first = modality[m[0]];
            m.iter().any(|&i| modality[i] != first)
        })
        .count();
    mixed as f64 / members.len() as f64
}
