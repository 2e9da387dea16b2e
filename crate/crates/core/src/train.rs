//! Two-stage training of a linear encoder on synthetic raw features.
//!
//! Stage 1 clusters each modality on its own and contrasts samples against
//! per-modality prototypes. Stage 2 adds a global clustering of both
//! modalities and alternates an intra-modality step with a global step
//! against split (per-modality) prototypes of the global clusters.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_global, cluster_intra, ClusterAssignment, ClusterConfig};
use crate::distance::JaccardMode;
use crate::embed_store::{self, EmbeddingSet, Format, Modality};
use crate::error::{Error, Result};
use crate::eval::{ari, cmc_map, EpochRow, RetrievalResult};
use crate::memory::{
    ema_update, global_bank_from_features, intra_bank_from_features, unified_bank_from_features,
    BankTag, PrototypeBank,
};
use crate::objectives::{grad_through_normalization, intra_infonce, multi_positive_global};
use crate::synth::SynthCorpus;

/// Linear map followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    /// `embed_dim x raw_dim`.
    pub weight: Array2<f64>,
}

impl ToyEncoder {
    pub fn new(weight: Array2<f64>) -> Result<Self> {
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite encoder weight".into()));
        }
        Ok(Self { weight })
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn raw_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Un-normalized outputs `raw * W^T`.
    pub fn pre_norm(&self, raw: ArrayView2<'_, f64>) -> Array2<f64> {
        raw.dot(&self.weight.t())
    }

    pub fn forward(&self, raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        normalize_rows(self.pre_norm(raw))
    }

    /// Encodes a whole set, keeping modality and identities.
    pub fn encode(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.raw_dim() {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects d = {}, set has d = {}",
                self.raw_dim(),
                set.dim()
            )));
        }
        let out = self.pre_norm(set.features_f64().view());
        EmbeddingSet::from_f64_rows(&out, set.modality().to_vec(), set.true_ids().map(|i| i.to_vec()))
    }

    /// Stores the weight as an embedding file with one row per output unit.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let set = EmbeddingSet::new(
            self.weight.mapv(|w| w as f32),
            vec![Modality::Visible; self.embed_dim()],
        )?;
        embed_store::save(&set, path, Format::Binary)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let set = embed_store::load(path, Format::Binary)?;
        Self::new(set.features_f64())
    }
}

fn normalize_rows(mut m: Array2<f64>) -> Result<Array2<f64>> {
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numeric(format!("encoder output row {i} has norm {n}")));
        }
        row /= n;
    }
    Ok(m)
}

/// Components that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Cluster the full visible set every epoch.
    Subset,
    /// Global clustering under vanilla instead of modality-aware Jaccard.
    MaDist,
    /// One prototype per global cluster with a single-positive loss.
    GlobalLoss,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subset" => Ok(Ablation::Subset),
            "ma-dist" => Ok(Ablation::MaDist),
            "global-loss" => Ok(Ablation::GlobalLoss),
            other => Err(Error::param(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_per_stage: usize,
    pub iters_per_epoch: usize,
    /// Pseudo identities per batch.
    pub p: usize,
    /// Instances per pseudo identity.
    pub k: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_gamma` every `lr_step` epochs
    /// of a stage.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub mu: f64,
    pub tau: f64,
    pub k_neg: usize,
    pub cluster: ClusterConfig,
    pub ablate: Vec<Ablation>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_stage: 20,
            iters_per_epoch: 2,
            p: 8,
            k: 16,
            lr: 3.5e-3,
            lr_step: 20,
            lr_gamma: 0.1,
            mu: 0.1,
            tau: 0.05,
            k_neg: 50,
            cluster: ClusterConfig::default(),
            ablate: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.cluster.validate()?;
        if self.p == 0 || self.k == 0 {
            return Err(Error::param("p and k must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::param("lr must be finite and non-negative"));
        }
        if self.lr_step == 0 || !(self.lr_gamma > 0.0) {
            return Err(Error::param("lr_step and lr_gamma must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::param("mu must lie in [0, 1]"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::param("tau must be positive"));
        }
        Ok(())
    }

    pub fn ablated(&self, a: Ablation) -> bool {
        self.ablate.contains(&a)
    }

    pub fn lr_at(&self, stage_epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((stage_epoch / self.lr_step) as i32)
    }

    fn effective_cluster(&self) -> ClusterConfig {
        let mut c = self.cluster.clone();
        if self.ablated(Ablation::Subset) {
            c.subset_ratio = 1.0;
        }
        c
    }
}

/// `p` distinct clusters with `k` members each (drawn with replacement
/// from clusters smaller than `k`), as parent-set rows.
pub fn pk_sample<R: Rng + ?Sized>(
    assignment: &ClusterAssignment,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let members = assignment.parent_members();
    if members.len() < p {
        return Err(Error::InsufficientRows(format!(
            "{} clusters available, batch needs {p}",
            members.len()
        )));
    }
    let mut out = Vec::with_capacity(p * k);
    for c in sample(rng, members.len(), p).into_iter() {
        let rows = &members[c];
        if rows.len() >= k {
            out.extend(sample(rng, rows.len(), k).into_iter().map(|j| rows[j]));
        } else {
            out.extend((0..k).map(|_| rows[rng.random_range(0..rows.len())]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: u8,
    /// Epoch within the stage, from 0.
    pub epoch: usize,
    pub lr: f64,
    /// Mean intra-modality loss per step.
    pub loss_intra: f64,
    pub loss_global: Option<f64>,
    pub clusters_vis: usize,
    pub clusters_ir: usize,
    pub clusters_global: Option<usize>,
    pub ari_vis: f64,
    pub ari_ir: f64,
    pub ari_global: Option<f64>,
    pub mixed_rate: Option<f64>,
    /// Cross-modal retrieval after the epoch's updates.
    pub rank1: f64,
    pub map_score: f64,
}

impl EpochMetrics {
    pub fn row(&self, global_epoch: usize) -> EpochRow {
        EpochRow {
            epoch: global_epoch,
            ari: self.ari_global.unwrap_or(0.5 * (self.ari_vis + self.ari_ir)),
            clusters_vis: self.clusters_vis,
            clusters_ir: self.clusters_ir,
            clusters_global: self.clusters_global.unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    /// Per-step losses (intra and global steps interleaved in stage 2).
    pub losses: Vec<f64>,
    pub initial: RetrievalResult,
    pub stage1: RetrievalResult,
    pub stage2: RetrievalResult,
}

/// Mutable training state over a fixed corpus.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: ToyEncoder,
    raw: Array2<f64>,
    modality: Vec<Modality>,
    ids: Vec<u32>,
    query: EmbeddingSet,
    gallery: EmbeddingSet,
    rng: ChaCha8Rng,
    pub losses: Vec<f64>,
}

struct IntraState {
    assign: [ClusterAssignment; 2],
    banks: [PrototypeBank; 2],
    /// Parent row -> cluster label (or -1) per modality.
    labels: [Vec<i32>; 2],
}

struct GlobalState {
    assign: ClusterAssignment,
    bank: PrototypeBank,
    labels: Vec<i32>,
}

impl Trainer {
    /// Starts from the corpus projection as encoder weight.
    pub fn new(corpus: &SynthCorpus, config: TrainConfig) -> Result<Self> {
        Self::with_encoder(corpus, config, ToyEncoder::new(corpus.projection.clone())?)
    }

    pub fn with_encoder(corpus: &SynthCorpus, config: TrainConfig, encoder: ToyEncoder) -> Result<Self> {
        config.validate()?;
        let train = corpus.train_raw();
        let (vis, ir) = train.modality_counts();
        if config.p * config.k > vis.min(ir) {
            return Err(Error::param(format!(
                "batch of {} exceeds the smaller modality ({} rows)",
                config.p * config.k,
                vis.min(ir)
            )));
        }
        let ids = train.true_ids().ok_or(Error::MissingIdentities)?.to_vec();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            encoder,
            raw: train.features_f64(),
            modality: train.modality().to_vec(),
            ids,
            query: corpus.raw.subset_view(&corpus.split.query)?.set,
            gallery: corpus.raw.subset_view(&corpus.split.gallery)?.set,
            rng,
            losses: Vec::new(),
            config,
        })
    }

    /// IR queries against the visible gallery.
    pub fn evaluate(&self) -> Result<RetrievalResult> {
        let q = self.encoder.encode(&self.query)?;
        let g = self.encoder.encode(&self.gallery)?;
        cmc_map(&q, &g, 20)
    }

    fn features(&self) -> Result<Array2<f64>> {
        self.encoder.forward(self.raw.view())
    }

    fn feature_set(&self, f: &Array2<f64>) -> Result<EmbeddingSet> {
        EmbeddingSet::from_f64_rows(f, self.modality.clone(), Some(self.ids.clone()))
    }

    fn assignment_ari(&self, a: &ClusterAssignment, parent_rows: Option<&[usize]>) -> Result<f64> {
        let src: Vec<usize> = match (&a.source_indices, parent_rows) {
            (Some(s), Some(p)) => s.iter().map(|&i| p[i]).collect(),
            (Some(s), None) => s.clone(),
            (None, Some(p)) => p.to_vec(),
            (None, None) => (0..a.len()).collect(),
        };
        let truth: Vec<u32> = src.iter().map(|&i| self.ids[i]).collect();
        ari(a, &truth)
    }

    fn intra_state(&mut self, set: &EmbeddingSet, f: &Array2<f64>, cfg: &ClusterConfig) -> Result<IntraState> {
        let vis = cluster_intra(set, Modality::Visible, cfg, &mut self.rng)?;
        let ir = cluster_intra(set, Modality::Infrared, cfg, &mut self.rng)?;
        let n = self.raw.nrows();
        let banks = [
            intra_bank_from_features(f.view(), &self.modality, &vis, self.config.mu)?,
            intra_bank_from_features(f.view(), &self.modality, &ir, self.config.mu)?,
        ];
        let labels = [vis.parent_labels(n)?, ir.parent_labels(n)?];
        Ok(IntraState {
            assign: [vis, ir],
            banks,
            labels,
        })
    }

    /// One gradient step on the encoder for the given batch rows and
    /// feature-space gradient; returns the features used.
    fn step(&mut self, rows: &[usize], grad: ArrayView2<'_, f64>, pre: ArrayView2<'_, f64>, lr: f64) -> Result<()> {
        let g_pre = grad_through_normalization(grad, pre)?;
        let x = self.raw.select(Axis(0), rows);
        let dw = g_pre.t().dot(&x);
        self.encoder.weight.scaled_add(-lr, &dw);
        if self.encoder.weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("encoder weight diverged".into()));
        }
        Ok(())
    }

    fn batch_features(&self, rows: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        let x = self.raw.select(Axis(0), rows);
        let pre = self.encoder.pre_norm(x.view());
        let f = normalize_rows(pre.clone())?;
        Ok((pre, f))
    }

    /// Intra-modality step over one PK batch per modality; returns the loss.
    fn intra_step(&mut self, st: &mut IntraState, lr: f64) -> Result<Option<f64>> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut which = Vec::new();
        for m in 0..2 {
            if st.assign[m].num_clusters < self.config.p {
                continue;
            }
            let b = pk_sample(&st.assign[m], self.config.p, self.config.k, &mut self.rng)?;
            for &r in &b {
                labels.push(st.labels[m][r] as usize);
                which.push(m);
            }
            rows.extend(b);
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let (pre, f) = self.batch_features(&rows)?;
        let mut grad = Array2::zeros(f.dim());
        let mut value = 0.0;
        for m in 0..2 {
            let idx: Vec<usize> = (0..rows.len()).filter(|&i| which[i] == m).collect();
            if idx.is_empty() {
                continue;
            }
            let fm = f.select(Axis(0), &idx);
            let lm: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let out = intra_infonce(fm.view(), &lm, &st.banks[m], self.config.tau)?;
            value += out.value;
            for (k, &i) in idx.iter().enumerate() {
                grad.row_mut(i).assign(&out.grad.row(k));
            }
        }
        self.step(&rows, grad.view(), pre.view(), lr)?;
        for (i, &m) in which.iter().enumerate() {
            ema_update(&mut st.banks[m], labels[i], f.row(i))?;
        }
        Ok(Some(value))
    }

    fn global_step(&mut self, gs: &mut GlobalState, lr: f64) -> Result<Option<f64>> {
        if gs.assign.num_clusters < self.config.p {
            return Ok(None);
        }
        let rows = pk_sample(&gs.assign, self.config.p, self.config.k, &mut self.rng)?;
        let labels: Vec<usize> = rows.iter().map(|&r| gs.labels[r] as usize).collect();
        let (pre, f) = self.batch_features(&rows)?;
        let out = multi_positive_global(f.view(), &labels, &gs.bank, self.config.tau, self.config.k_neg)?;
        self.step(&rows, out.grad.view(), pre.view(), lr)?;
        for (i, (&r, &z)) in rows.iter().zip(&labels).enumerate() {
            let tag = BankTag::from(self.modality[r]);
            let pos = &gs.bank.positives[z];
            let target = pos
                .iter()
                .copied()
                .find(|&p| gs.bank.modality_tag[p] == tag)
                .unwrap_or(pos[0]);
            ema_update(&mut gs.bank, target, f.row(i))?;
        }
        Ok(Some(out.value))
    }

    pub fn stage1_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let cfg = self.config.effective_cluster();
        let lr = self.config.lr_at(epoch);
        let f = self.features()?;
        let set = self.feature_set(&f)?;
        let mut st = self.intra_state(&set, &f, &cfg)?;
        let mut total = 0.0;
        let mut steps = 0;
        for _ in 0..self.config.iters_per_epoch {
            if let Some(l) = self.intra_step(&mut st, lr)? {
                self.losses.push(l);
                total += l;
                steps += 1;
            }
        }
        let r = self.evaluate()?;
        Ok(EpochMetrics {
            stage: 1,
            epoch,
            lr,
            loss_intra: if steps > 0 { total / steps as f64 } else { 0.0 },
            loss_global: None,
            clusters_vis: st.assign[0].num_clusters,
            clusters_ir: st.assign[1].num_clusters,
            clusters_global: None,
            ari_vis: self.assignment_ari(&st.assign[0], None)?,
            ari_ir: self.assignment_ari(&st.assign[1], None)?,
            ari_global: None,
            mixed_rate: None,
            rank1: r.rank1(),
            map_score: r.map_score,
        })
    }

    pub fn stage2_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let cfg = self.config.effective_cluster();
        let lr = self.config.lr_at(epoch);
        let f = self.features()?;
        let set = self.feature_set(&f)?;
        let mut st = self.intra_state(&set, &f, &cfg)?;

        // Global clustering sees the same visible subset as the intra step.
        let mut rows: Vec<usize> = st.assign[0]
            .source_indices
            .clone()
            .unwrap_or_else(|| set.indices_of(Modality::Visible));
        rows.extend(set.indices_of(Modality::Infrared));
        rows.sort_unstable();
        let view = set.subset_view(&rows)?;
        let mode = if self.config.ablated(Ablation::MaDist) {
            JaccardMode::Vanilla
        } else {
            JaccardMode::ModalityAware
        };
        let mut ga = cluster_global(&view.set, &cfg, mode)?;
        ga.source_indices = Some(view.parent_indices.clone());
        let bank = if self.config.ablated(Ablation::GlobalLoss) {
            unified_bank_from_features(f.view(), &self.modality, &ga, self.config.mu)?
        } else {
            global_bank_from_features(f.view(), &self.modality, &ga, self.config.mu)?
        };
        let labels = ga.parent_labels(self.raw.nrows())?;
        let mut gs = GlobalState {
            assign: ga,
            bank,
            labels,
        };

        let (mut ti, mut ni, mut tg, mut ng) = (0.0, 0, 0.0, 0);
        for _ in 0..self.config.iters_per_epoch {
            if let Some(l) = self.intra_step(&mut st, lr)? {
                self.losses.push(l);
                ti += l;
                ni += 1;
            }
            if let Some(l) = self.global_step(&mut gs, lr)? {
                self.losses.push(l);
                tg += l;
                ng += 1;
            }
        }
        let r = self.evaluate()?;
        let mixed = crate::cluster::mixed_cluster_rate(&gs.assign, &self.modality);
        Ok(EpochMetrics {
            stage: 2,
            epoch,
            lr,
            loss_intra: if ni > 0 { ti / ni as f64 } else { 0.0 },
            loss_global: Some(if ng > 0 { tg / ng as f64 } else { 0.0 }),
            clusters_vis: st.assign[0].num_clusters,
            clusters_ir: st.assign[1].num_clusters,
            clusters_global: Some(gs.assign.num_clusters),
            ari_vis: self.assignment_ari(&st.assign[0], None)?,
            ari_ir: self.assignment_ari(&st.assign[1], None)?,
            ari_global: Some(self.assignment_ari(&gs.assign, None)?),
            mixed_rate: Some(mixed),
            rank1: r.rank1(),
            map_score: r.map_score,
        })
    }

    pub fn run_stage(&mut self, stage: u8) -> Result<Vec<EpochMetrics>> {
        (0..self.config.epochs_per_stage)
            .map(|e| {
                let m = if stage == 1 {
                    self.stage1_epoch(e)?
                } else {
                    self.stage2_epoch(e)?
                };
                log::info!(
                    "stage {stage} epoch {e}: rank1 {:.3} clusters {}/{}/{:?}",
                    m.rank1,
                    m.clusters_vis,
                    m.clusters_ir,
                    m.clusters_global
                );
                Ok(m)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stage1_encoder: ToyEncoder,
    pub encoder: ToyEncoder,
    pub report: TrainReport,
}

/// Stage 1 followed by stage 2, with retrieval measured before training and
/// after each stage.
pub fn train(corpus: &SynthCorpus, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(corpus, config.clone())?;
    let initial = t.evaluate()?;
    let mut epochs = t.run_stage(1)?;
    let stage1_encoder = t.encoder.clone();
    let stage1 = t.evaluate()?;
    epochs.extend(t.run_stage(2)?);
    let stage2 = t.evaluate()?;
    Ok(TrainOutcome {
        stage1_encoder,
        encoder: t.encoder.clone(),
        report: TrainReport {
            config: config.clone(),
            epochs,
            losses: t.losses.clone(),
            initial,
            stage1,
            stage2,
        },
    })
}
