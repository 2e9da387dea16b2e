//! Clustering and retrieval metrics plus CSV/JSON report emission.
//!
//! CSV schemas written by [`emit_report`]:
//!
//! | file | header |
//! |------|--------|
//! | `cmc.csv` | `rank,cmc` |
//! | `hist_<name>.csv` | `bin_lo,bin_hi,count,pair_type` |
//! | `epochs.csv` | `epoch,ari,clusters_vis,clusters_ir,clusters_global` |
//! | `loss.csv` | `step,loss` |

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignment;
use crate::distance::DistanceMatrix;
use crate::embed_store::{EmbeddingSet, Modality};
use crate::error::{Error, Result};

fn comb2(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index between two labelings. Negative labels are noise;
/// each noise point counts as its own singleton cluster. Returns 1 when
/// both partitions are trivial in the same way (the index is undefined).
pub fn ari_labels(pred: &[i64], truth: &[i64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    // Give every noise point a private label below any real one.
    let relabel = |labels: &[i64]| -> Vec<i64> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| if l < 0 { -(i as i64) - 1 } else { l })
            .collect()
    };
    let (p, t) = (relabel(pred), relabel(truth));
    let mut table: HashMap<(i64, i64), u64> = HashMap::new();
    let mut rows: HashMap<i64, u64> = HashMap::new();
    let mut cols: HashMap<i64, u64> = HashMap::new();
    for i in 0..n {
        *table.entry((p[i], t[i])).or_default() += 1;
        *rows.entry(p[i]).or_default() += 1;
        *cols.entry(t[i]).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

pub fn ari(pred: &ClusterAssignment, truth: &[u32]) -> Result<f64> {
    let p: Vec<i64> = pred.labels.iter().map(|&l| l as i64).collect();
    let t: Vec<i64> = truth.iter().map(|&l| l as i64).collect();
    ari_labels(&p, &t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub query: Modality,
    pub gallery: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `cmc[r]` is the match rate within the top `r + 1`.
    pub cmc: Vec<f64>,
    pub map_score: f64,
    pub protocol: Protocol,
    pub num_queries: usize,
    /// Queries whose identity never occurs in the gallery.
    pub excluded: usize,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

fn majority_modality(set: &EmbeddingSet) -> Modality {
    let (vis, ir) = set.modality_counts();
    if ir > vis {
        Modality::Infrared
    } else {
        Modality::Visible
    }
}

/// Cosine-distance retrieval of every query against the whole gallery.
pub fn cmc_map(query: &EmbeddingSet, gallery: &EmbeddingSet, max_rank: usize) -> Result<RetrievalResult> {
    if query.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query d = {}, gallery d = {}",
            query.dim(),
            gallery.dim()
        )));
    }
    if max_rank == 0 {
        return Err(Error::param("max_rank must be positive"));
    }
    let qid = query.true_ids().ok_or(Error::MissingIdentities)?;
    let gid = gallery.true_ids().ok_or(Error::MissingIdentities)?;
    let q = query.ensure_normalized()?.features_f64();
    let g = gallery.ensure_normalized()?.features_f64();
    let max_rank = max_rank.min(gallery.len());

    // (first match rank, average precision) per usable query
    let per_query: Vec<Option<(usize, f64)>> = (0..query.len())
        .into_par_iter()
        .map(|i| {
            let sims = g.dot(&q.row(i));
            let mut order: Vec<usize> = (0..gallery.len()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            let mut hits = 0usize;
            let mut precision_sum = 0.0;
            let mut first = None;
            for (r, &j) in order.iter().enumerate() {
                if gid[j] == qid[i] {
                    hits += 1;
                    precision_sum += hits as f64 / (r + 1) as f64;
                    first.get_or_insert(r);
                }
            }
            first.map(|f| (f, precision_sum / hits as f64))
        })
        .collect();

    let valid: Vec<(usize, f64)> = per_query.iter().flatten().copied().collect();
    let excluded = per_query.len() - valid.len();
    let mut cmc = vec![0.0; max_rank];
    let mut map_score = 0.0;
    if !valid.is_empty() {
        let mut counts = vec![0usize; max_rank];
        for &(first, ap) in &valid {
            if first < max_rank {
                counts[first] += 1;
            }
            map_score += ap;
        }
        let mut acc = 0usize;
        for r in 0..max_rank {
            acc += counts[r];
            cmc[r] = acc as f64 / valid.len() as f64;
        }
        map_score /= valid.len() as f64;
    }
    if excluded > 0 {
        log::warn!("{excluded} queries have no gallery match and were excluded");
    }
    Ok(RetrievalResult {
        cmc,
        map_score,
        protocol: Protocol {
            query: majority_modality(query),
            gallery: majority_modality(gallery),
        },
        num_queries: valid.len(),
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairType {
    #[serde(rename = "vis-vis")]
    VisVis,
    #[serde(rename = "ir-ir")]
    IrIr,
    #[serde(rename = "vis-ir")]
    VisIr,
}

impl PairType {
    pub const ALL: [PairType; 3] = [PairType::VisVis, PairType::IrIr, PairType::VisIr];

    pub fn of(a: Modality, b: Modality) -> Self {
        match (a, b) {
            (Modality::Visible, Modality::Visible) => PairType::VisVis,
            (Modality::Infrared, Modality::Infrared) => PairType::IrIr,
            _ => PairType::VisIr,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PairType::VisVis => "vis-vis",
            PairType::IrIr => "ir-ir",
            PairType::VisIr => "vis-ir",
        }
    }
}

/// Equal-width bins over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl BinSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || !(self.hi > self.lo) {
            return Err(Error::param("bins need bins > 0 and hi > lo"));
        }
        Ok(())
    }

    pub fn edges(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.bins as f64;
        (0..=self.bins).map(|k| self.lo + w * k as f64).collect()
    }

    /// Bin of `x`; values outside the range go to the first or last bin.
    pub fn bin_of(&self, x: f64) -> usize {
        let t = (x - self.lo) / (self.hi - self.lo) * self.bins as f64;
        (t.floor().max(0.0) as usize).min(self.bins - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub total: u64,
    pub sum: f64,
}

impl Histogram {
    fn new(bins: usize) -> Self {
        Self {
            counts: vec![0; bins],
            total: 0,
            sum: 0.0,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.total > 0).then(|| self.sum / self.total as f64)
    }

    fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.sum += other.sum;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBundle {
    pub spec: BinSpec,
    pub vis_vis: Histogram,
    pub ir_ir: Histogram,
    pub vis_ir: Histogram,
}

impl HistogramBundle {
    pub fn get(&self, pair: PairType) -> &Histogram {
        match pair {
            PairType::VisVis => &self.vis_vis,
            PairType::IrIr => &self.ir_ir,
            PairType::VisIr => &self.vis_ir,
        }
    }

    fn get_mut(&mut self, pair: PairType) -> &mut Histogram {
        match pair {
            PairType::VisVis => &mut self.vis_vis,
            PairType::IrIr => &mut self.ir_ir,
            PairType::VisIr => &mut self.vis_ir,
        }
    }

    /// Mean over all intra-modality pairs (both modalities pooled).
    pub fn intra_mean(&self) -> Option<f64> {
        let total = self.vis_vis.total + self.ir_ir.total;
        (total > 0).then(|| (self.vis_vis.sum + self.ir_ir.sum) / total as f64)
    }

    /// Cross-modality mean minus pooled intra-modality mean.
    pub fn gap(&self) -> Option<f64> {
        Some(self.vis_ir.mean()? - self.intra_mean()?)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum GroupBy<'a> {
    TrueClass,
    /// Cluster labels, one per row; negative rows are skipped.
    PredictedCluster(&'a [i32]),
}

/// Histograms of pairwise distances between rows of the same group, split
/// by pair type.
pub fn distance_distribution(
    set: &EmbeddingSet,
    d: &DistanceMatrix,
    group_by: GroupBy<'_>,
    spec: BinSpec,
) -> Result<HistogramBundle> {
    spec.validate()?;
    if d.len() != set.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows vs {}x{} distances",
            set.len(),
            d.len(),
            d.len()
        )));
    }
    let labels: Vec<i64> = match group_by {
        GroupBy::TrueClass => set
            .true_ids()
            .ok_or(Error::MissingIdentities)?
            .iter()
            .map(|&x| x as i64)
            .collect(),
        GroupBy::PredictedCluster(l) => {
            if l.len() != set.len() {
                return Err(Error::DimensionMismatch("one label per row required".into()));
            }
            l.iter().map(|&x| x as i64).collect()
        }
    };
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            groups.entry(l).or_default().push(i);
        }
    }
    let modality = set.modality();
    let empty = || HistogramBundle {
        spec,
        vis_vis: Histogram::new(spec.bins),
        ir_ir: Histogram::new(spec.bins),
        vis_ir: Histogram::new(spec.bins),
    };
    let parts: Vec<HistogramBundle> = groups
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|rows| {
            let mut b = empty();
            for (a, &i) in rows.iter().enumerate() {
                for &j in &rows[a + 1..] {
                    let x = d.get(i, j);
                    let h = b.get_mut(PairType::of(modality[i], modality[j]));
                    h.counts[spec.bin_of(x)] += 1;
                    h.total += 1;
                    h.sum += x;
                }
            }
            b
        })
        .collect();
    let mut out = empty();
    for p in &parts {
        for t in PairType::ALL {
            out.get_mut(t).merge(p.get(t));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub ari: f64,
    pub clusters_vis: usize,
    pub clusters_ir: usize,
    pub clusters_global: usize,
}

/// Everything [`emit_report`] can write. Empty parts produce no file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportArtifacts {
    pub summary: serde_json::Value,
    pub cmc: Option<Vec<f64>>,
    pub histograms: Vec<(String, HistogramBundle)>,
    pub epochs: Vec<EpochRow>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, body: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    files.push(path.to_path_buf());
    Ok(())
}

/// Formats a float so that it parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn cmc_csv(cmc: &[f64]) -> String {
    let mut s = String::from("rank,cmc\n");
    for (r, v) in cmc.iter().enumerate() {
        s.push_str(&format!("{},{}\n", r + 1, fmt_f64(*v)));
    }
    s
}

pub fn histogram_csv(bundle: &HistogramBundle) -> String {
    let edges = bundle.spec.edges();
    let mut s = String::from("bin_lo,bin_hi,count,pair_type\n");
    for t in PairType::ALL {
        for (k, c) in bundle.get(t).counts.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                fmt_f64(edges[k]),
                fmt_f64(edges[k + 1]),
                c,
                t.name()
            ));
        }
    }
    s
}

pub fn epochs_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from("epoch,ari,clusters_vis,clusters_ir,clusters_global\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            fmt_f64(r.ari),
            r.clusters_vis,
            r.clusters_ir,
            r.clusters_global
        ));
    }
    s
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (k, v) in losses.iter().enumerate() {
        s.push_str(&format!("{k},{}\n", fmt_f64(*v)));
    }
    s
}

/// Writes `summary.json` and one CSV per non-empty artifact into `out_dir`.
pub fn emit_report(artifacts: &ReportArtifacts, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let summary = serde_json::to_string_pretty(&artifacts.summary)?;
    write_file(&dir.join("summary.json"), &(summary + "\n"), &mut files)?;
    if let Some(cmc) = &artifacts.cmc {
        write_file(&dir.join("cmc.csv"), &cmc_csv(cmc), &mut files)?;
    }
    for (name, bundle) in &artifacts.histograms {
        write_file(&dir.join(format!("hist_{name}.csv")), &histogram_csv(bundle), &mut files)?;
    }
    if !artifacts.epochs.is_empty() {
        write_file(&dir.join("epochs.csv"), &epochs_csv(&artifacts.epochs), &mut files)?;
    }
    if !artifacts.losses.is_empty() {
        write_file(&dir.join("loss.csv"), &loss_csv(&artifacts.losses), &mut files)?;
    }
    Ok(Manifest { files })
}
