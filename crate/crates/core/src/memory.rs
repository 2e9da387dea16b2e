//! Prototype memories: one unit vector per (sub)cluster, moved by an
//! exponential moving average of the features assigned to it.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignment;
use crate::embed_store::{self, EmbeddingSet, Format, Modality};
use crate::error::{Error, Result};

/// Modality of a prototype; `None` for prototypes of unsplit mixed clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BankTag {
    #[serde(rename = "VIS")]
    Visible,
    #[serde(rename = "IR")]
    Infrared,
    #[serde(rename = "NONE")]
    None,
}

impl From<Modality> for BankTag {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Visible => BankTag::Visible,
            Modality::Infrared => BankTag::Infrared,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `C x d`, unit rows.
    pub vectors: Array2<f64>,
    pub modality_tag: Vec<BankTag>,
    /// Cluster that each prototype represents.
    pub owner_cluster: Vec<usize>,
    pub mu: f64,
    /// Prototype rows of every cluster (one or two entries each).
    pub positives: Vec<Vec<usize>>,
}

/// Metadata written next to a serialized bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSidecar {
    pub mu: f64,
    pub modality_tag: Vec<BankTag>,
    pub owner_cluster: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
}

fn unit(v: Array1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric("prototype with zero or non-finite norm".into()));
    }
    Ok(v / n)
}

fn mean_row(features: ArrayView2<'_, f64>, rows: &[usize]) -> Result<Array1<f64>> {
    assert!(!rows.is_empty(), "empty cluster");
    let mut acc = Array1::<f64>::zeros(features.ncols());
    for &r in rows {
        acc += &features.row(r);
    }
    unit(acc / rows.len() as f64)
}

fn check_mu(mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::param(format!("mu = {mu} must lie in [0, 1]")));
    }
    Ok(())
}

impl PrototypeBank {
    pub fn empty(dim: usize, mu: f64) -> Self {
        Self {
            vectors: Array2::zeros((0, dim)),
            modality_tag: Vec::new(),
            owner_cluster: Vec::new(),
            mu,
            positives: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Number of clusters (entries of `positives`).
    pub fn num_clusters(&self) -> usize {
        self.positives.len()
    }

    pub fn sidecar(&self) -> BankSidecar {
        BankSidecar {
            mu: self.mu,
            modality_tag: self.modality_tag.clone(),
            owner_cluster: self.owner_cluster.clone(),
            positives: self.positives.clone(),
        }
    }

    /// Writes the vectors as an embedding file at `path` and the metadata
    /// to `path` with a `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let modality = self
            .modality_tag
            .iter()
            .map(|t| match t {
                BankTag::Infrared => Modality::Infrared,
                _ => Modality::Visible,
            })
            .collect();
        let set = EmbeddingSet::new(self.vectors.mapv(|v| v as f32), modality)?;
        embed_store::save(&set, path, Format::Binary)?;
        let side = path.with_extension("json");
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let set = embed_store::load(path, Format::Binary)?;
        let side = path.with_extension("json");
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: BankSidecar = serde_json::from_str(&text)?;
        let bank = Self {
            vectors: set.features_f64(),
            modality_tag: meta.modality_tag,
            owner_cluster: meta.owner_cluster,
            mu: meta.mu,
            positives: meta.positives,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Checks row norms, tag/owner lengths and that `positives` partitions
    /// the prototype rows.
    pub fn validate(&self) -> Result<()> {
        check_mu(self.mu)?;
        let c = self.len();
        if self.modality_tag.len() != c || self.owner_cluster.len() != c {
            return Err(Error::DimensionMismatch("bank metadata length".into()));
        }
        let mut seen = vec![false; c];
        for (z, list) in self.positives.iter().enumerate() {
            if list.is_empty() || list.len() > 2 {
                return Err(Error::param(format!("cluster {z} has {} prototypes", list.len())));
            }
            for &p in list {
                if p >= c || seen[p] || self.owner_cluster[p] != z {
                    return Err(Error::param(format!("bad positive entry {p} for cluster {z}")));
                }
                seen[p] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::param("prototype not listed under its cluster"));
        }
        for (i, row) in self.vectors.axis_iter(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::Numeric(format!("prototype {i} has norm {n}")));
            }
        }
        Ok(())
    }
}

/// One prototype per cluster: the normalized mean of its members.
/// `features` rows are indexed like the assignment's parent set.
pub fn intra_bank_from_features(
    features: ArrayView2<'_, f64>,
    modality: &[Modality],
    assignment: &ClusterAssignment,
    mu: f64,
) -> Result<PrototypeBank> {
    check_mu(mu)?;
    let members = assignment.parent_members();
    if members.is_empty() {
        log::warn!("intra-modality bank built from an assignment without clusters");
        return Ok(PrototypeBank::empty(features.ncols(), mu));
    }
    let mut vectors = Array2::zeros((members.len(), features.ncols()));
    let mut modality_tag = Vec::with_capacity(members.len());
    for (c, rows) in members.iter().enumerate() {
        let m = modality[rows[0]];
        if rows.iter().any(|&r| modality[r] != m) {
            return Err(Error::param(format!("cluster {c} mixes modalities")));
        }
        vectors.row_mut(c).assign(&mean_row(features, rows)?);
        modality_tag.push(BankTag::from(m));
    }
    let c = members.len();
    Ok(PrototypeBank {
        vectors,
        modality_tag,
        owner_cluster: (0..c).collect(),
        mu,
        positives: (0..c).map(|k| vec![k]).collect(),
    })
}

pub fn build_intra_bank(
    set: &EmbeddingSet,
    assignment: &ClusterAssignment,
    mu: f64,
) -> Result<PrototypeBank> {
    intra_bank_from_features(set.features_f64().view(), set.modality(), assignment, mu)
}

/// Split-and-contrast bank: every global cluster gets one prototype per
/// modality it contains, visible first.
pub fn global_bank_from_features(
    features: ArrayView2<'_, f64>,
    modality: &[Modality],
    assignment: &ClusterAssignment,
    mu: f64,
) -> Result<PrototypeBank> {
    check_mu(mu)?;
    let members = assignment.parent_members();
    let mut rows_out = Vec::new();
    let mut modality_tag = Vec::new();
    let mut owner_cluster = Vec::new();
    let mut positives = Vec::with_capacity(members.len());
    for (z, rows) in members.iter().enumerate() {
        let mut list = Vec::with_capacity(2);
        for m in Modality::ALL {
            let sub: Vec<usize> = rows.iter().copied().filter(|&r| modality[r] == m).collect();
            if sub.is_empty() {
                continue;
            }
            list.push(rows_out.len());
            rows_out.push(mean_row(features, &sub)?);
            modality_tag.push(BankTag::from(m));
            owner_cluster.push(z);
        }
        positives.push(list);
    }
    Ok(assemble(features.ncols(), rows_out, modality_tag, owner_cluster, positives, mu))
}

pub fn build_global_bank_split(
    set: &EmbeddingSet,
    assignment: &ClusterAssignment,
    mu: f64,
) -> Result<PrototypeBank> {
    global_bank_from_features(set.features_f64().view(), set.modality(), assignment, mu)
}

/// One prototype per global cluster regardless of modality, tagged `None`
/// when the cluster is mixed.
pub fn unified_bank_from_features(
    features: ArrayView2<'_, f64>,
    modality: &[Modality],
    assignment: &ClusterAssignment,
    mu: f64,
) -> Result<PrototypeBank> {
    check_mu(mu)?;
    let members = assignment.parent_members();
    let mut rows_out = Vec::with_capacity(members.len());
    let mut modality_tag = Vec::with_capacity(members.len());
    for rows in &members {
        rows_out.push(mean_row(features, rows)?);
        let first = modality[rows[0]];
        modality_tag.push(if rows.iter().all(|&r| modality[r] == first) {
            BankTag::from(first)
        } else {
            BankTag::None
        });
    }
    let c = members.len();
    Ok(assemble(
        features.ncols(),
        rows_out,
        modality_tag,
        (0..c).collect(),
        (0..c).map(|k| vec![k]).collect(),
        mu,
    ))
}

fn assemble(
    dim: usize,
    rows: Vec<Array1<f64>>,
    modality_tag: Vec<BankTag>,
    owner_cluster: Vec<usize>,
    positives: Vec<Vec<usize>>,
    mu: f64,
) -> PrototypeBank {
    let mut vectors = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        vectors.row_mut(i).assign(r);
    }
    PrototypeBank {
        vectors,
        modality_tag,
        owner_cluster,
        mu,
        positives,
    }
}

/// `v <- mu * v + (1 - mu) * f`, then renormalized.
pub fn ema_update(bank: &mut PrototypeBank, index: usize, feature: ArrayView1<'_, f64>) -> Result<()> {
    if index >= bank.len() {
        return Err(Error::IndexOutOfRange {
            index,
            len: bank.len(),
        });
    }
    if feature.len() != bank.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature d = {}, bank d = {}",
            feature.len(),
            bank.dim()
        )));
    }
    let mu = bank.mu;
    let mixed = &bank.vectors.row(index) * mu + &feature * (1.0 - mu);
    bank.vectors.row_mut(index).assign(&unit(mixed)?);
    Ok(())
}

/// The `k_neg` prototypes most similar to `query` outside `exclude`, most
/// similar first (ties to the lower index).
pub fn hard_negatives(
    bank: &PrototypeBank,
    query: ArrayView1<'_, f64>,
    exclude: &[usize],
    k_neg: usize,
) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..bank.len()).filter(|j| !exclude.contains(j)).collect();
    if k_neg > candidates.len() {
        return Err(Error::param(format!(
            "k_neg = {k_neg} exceeds the {} available negatives",
            candidates.len()
        )));
    }
    let sims = bank.vectors.dot(&query);
    let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    if k_neg < candidates.len() {
        candidates.select_nth_unstable_by(k_neg, cmp);
        candidates.truncate(k_neg);
    }
    candidates.sort_unstable_by(cmp);
    Ok(candidates)
}
