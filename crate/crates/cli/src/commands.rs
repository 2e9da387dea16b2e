use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use crossmodal::cluster::{cluster_global, cluster_intra, dbscan, mixed_cluster_rate, ClusterAssignment};
use crossmodal::distance::{
    cosine_distance, jaccard_from_cosine, knn, knn_composition, knn_modality_balanced, DistanceMatrix,
    JaccardMode, LqeTarget, Metric,
};
use crossmodal::embed_store::{self, encode_binary, EmbeddingSet, Format, Modality};
use crossmodal::eval::{ari, cmc_map, distance_distribution, emit_report, BinSpec, GroupBy, ReportArtifacts};
use crossmodal::synth::{bias_report, generate, Split, SynthConfig, SynthCorpus};
use crossmodal::train::{train as run_training, Ablation, ToyEncoder, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::FileConfig;
use crate::{CliError, CliResult, GlobalOptions, MetricArg};

pub fn load_set(path: &Path) -> CliResult<EmbeddingSet> {
    Ok(embed_store::load(path, Format::from_path(path))?)
}

pub fn write_json(path: &Path, value: &Value) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| crossmodal::Error::Io { path: dir.into(), source: e })?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| crossmodal::Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| crossmodal::Error::Io { path: path.into(), source: e })?;
    Ok(serde_json::from_str(&text)?)
}

fn read_distance(path: &Path) -> CliResult<DistanceMatrix> {
    let bytes = fs::read(path).map_err(|e| crossmodal::Error::Io { path: path.into(), source: e })?;
    Ok(DistanceMatrix::from_bytes(&bytes)?)
}

pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Sidecar written next to a corpus file.
#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusSidecar {
    pub config: SynthConfig,
    pub rows: usize,
    pub split: Split,
    pub bias: Value,
}

/// Regenerates the corpus described by the sidecar of `path` and checks it
/// against the stored embeddings.
pub fn load_corpus(path: &Path) -> CliResult<SynthCorpus> {
    let side: CorpusSidecar = read_json(&sidecar(path))?;
    let corpus = generate(&side.config)?;
    let bytes = fs::read(path).map_err(|e| crossmodal::Error::Io { path: path.into(), source: e })?;
    if bytes != encode_binary(&corpus.oracle_embed) {
        return Err(CliError::Data(format!(
            "{} does not match the corpus described by its sidecar",
            path.display()
        )));
    }
    Ok(corpus)
}

fn class_gap(set: &EmbeddingSet, d: &DistanceMatrix) -> CliResult<Option<f64>> {
    if set.true_ids().is_none() {
        return Ok(None);
    }
    let (lo, hi) = d.metric().range();
    let spec = BinSpec { lo, hi, bins: 50 };
    Ok(distance_distribution(set, d, GroupBy::TrueClass, spec)?.gap())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub ids: Option<usize>,
    #[arg(long)]
    pub vis_per_id: Option<usize>,
    #[arg(long)]
    pub ir_per_id: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub raw_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Modality gap in [0, 1].
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Held-out identities for retrieval.
    #[arg(long)]
    pub test_ids: Option<usize>,
    #[arg(long)]
    pub modes: Option<usize>,
    #[arg(long)]
    pub mode_spread: Option<f64>,
    /// Embedding file; the sidecar goes next to it with a `.json` extension.
    #[arg(long, default_value = "corpus.xma")]
    pub out: PathBuf,
}

pub fn synth_config(g: &GlobalOptions, file: &FileConfig, a: &SynthArgs) -> SynthConfig {
    let mut c = file.synth.clone();
    c.seed = file.seed(g.seed, c.seed);
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(
            if let Some(v) = a.$flag { c.$field = v; }
        )*};
    }
    set!(ids => num_ids, vis_per_id => imgs_per_id_vis, ir_per_id => imgs_per_id_ir,
        latent_dim => latent_dim, raw_dim => raw_dim, embed_dim => embed_dim,
        gap => modality_gap, noise => intra_noise, test_ids => num_test_ids,
        modes => modes_per_id, mode_spread => mode_spread);
    c
}

pub fn synth(g: &GlobalOptions, file: &FileConfig, a: SynthArgs) -> CliResult {
    let config = synth_config(g, file, &a);
    let corpus = generate(&config)?;
    embed_store::save(&corpus.oracle_embed, &a.out, Format::Binary)?;
    let bias = bias_report(&corpus.train_embed())?;
    let side = CorpusSidecar {
        config,
        rows: corpus.oracle_embed.len(),
        split: corpus.split.clone(),
        bias: json!({
            "mean_intra": bias.mean_intra,
            "mean_inter": bias.mean_inter,
            "gap": bias.gap,
        }),
    };
    log::info!("wrote {} rows to {}", side.rows, a.out.display());
    write_json(&sidecar(&a.out), &serde_json::to_value(&side)?)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LqeArg {
    Encoding,
    Distance,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    #[arg(long, default_value = "corpus.xma")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::MaJaccard)]
    pub metric: MetricArg,
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long)]
    pub k2: Option<usize>,
    /// Weight of cosine distance mixed into a Jaccard result.
    #[arg(long)]
    pub mix_weight: Option<f64>,
    #[arg(long, value_enum)]
    pub lqe_target: Option<LqeArg>,
    #[arg(long, default_value = "distance.xmd")]
    pub out: PathBuf,
    /// Summary JSON; defaults to the output path with a `.json` extension.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

pub fn distance(_g: &GlobalOptions, file: &FileConfig, a: DistanceArgs) -> CliResult {
    let mut params = file.cluster.jaccard.clone();
    if let Some(k) = a.k1 {
        params.k1 = k;
    }
    if let Some(k) = a.k2 {
        params.k2 = k;
    }
    if let Some(w) = a.mix_weight {
        params.mix_weight = w;
    }
    if let Some(t) = a.lqe_target {
        params.lqe_target = match t {
            LqeArg::Encoding => LqeTarget::Encoding,
            LqeArg::Distance => LqeTarget::Distance,
        };
    }
    params.validate()?;
    let set = load_set(&a.input)?;
    let cos = cosine_distance(&set)?;
    let d = match a.metric {
        MetricArg::Cosine => cos.clone(),
        MetricArg::Jaccard => jaccard_from_cosine(&cos, set.modality(), &params, JaccardMode::Vanilla)?,
        MetricArg::MaJaccard => jaccard_from_cosine(&cos, set.modality(), &params, JaccardMode::ModalityAware)?,
    };
    let plain = knn_composition(&knn(&cos, params.k1)?, set.modality()).mean;
    let (lists, composition) = match a.metric {
        MetricArg::MaJaccard => (
            "balanced",
            knn_composition(&knn_modality_balanced(&cos, set.modality(), params.k1)?, set.modality()).mean,
        ),
        _ => ("plain", plain),
    };
    fs::write(&a.out, d.to_bytes()).map_err(|e| crossmodal::Error::Io { path: a.out.clone(), source: e })?;
    let n = d.len();
    let off_diag = if n > 1 { d.values().sum() / (n * (n - 1)) as f64 } else { 0.0 };
    let (vis, ir) = set.modality_counts();
    let summary = json!({
        "config": {
            "input": a.input,
            "metric": d.metric(),
            "jaccard": (a.metric != MetricArg::Cosine).then_some(&params),
        },
        "rows": n,
        "visible": vis,
        "infrared": ir,
        "composition": { "lists": lists, "k": params.k1, "mean": composition },
        "cosine_composition": plain,
        "mean_distance": off_diag,
        "class_gap": class_gap(&set, &d)?,
    });
    write_json(&a.summary.unwrap_or_else(|| sidecar(&a.out)), &summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Global,
    Visible,
    Infrared,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long, default_value = "corpus.xma")]
    pub input: PathBuf,
    /// Precomputed distances over the rows of `--input`; global scope only.
    #[arg(long)]
    pub distance: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scope::Global)]
    pub scope: Scope,
    /// Distance for global clustering.
    #[arg(long, value_enum, default_value_t = MetricArg::MaJaccard)]
    pub metric: MetricArg,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub min_samples: Option<usize>,
    /// Fraction of visible rows clustered in visible scope.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long)]
    pub k2: Option<usize>,
    #[arg(long, default_value = "clusters.json")]
    pub out: PathBuf,
}

/// Shape of the `cluster` output consumed by `eval`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterOutput {
    pub config: Value,
    pub num_clusters: usize,
    pub noise: usize,
    /// One label per input row; -1 for noise and rows left out.
    pub labels: Vec<i32>,
    /// Input rows that took part, when not all did.
    pub source_indices: Option<Vec<usize>>,
    pub ari: Option<f64>,
    pub mixed_rate: Option<f64>,
}

pub fn cluster(g: &GlobalOptions, file: &FileConfig, a: ClusterArgs) -> CliResult {
    let mut config = file.cluster.clone();
    config.seed = file.seed(g.seed, config.seed);
    if let Some(v) = a.eps {
        config.eps = v;
    }
    if let Some(v) = a.min_samples {
        config.min_samples = v;
    }
    if let Some(v) = a.ratio {
        config.subset_ratio = v;
    }
    if let Some(v) = a.k1 {
        config.jaccard.k1 = v;
    }
    if let Some(v) = a.k2 {
        config.jaccard.k2 = v;
    }
    config.validate()?;
    let set = load_set(&a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let assignment: ClusterAssignment = match (a.scope, &a.distance) {
        (Scope::Global, Some(path)) => {
            let d = read_distance(path)?;
            if d.len() != set.len() {
                return Err(CliError::Data(format!(
                    "{} has {} rows, {} has {}",
                    path.display(),
                    d.len(),
                    a.input.display(),
                    set.len()
                )));
            }
            dbscan(&d, &config)?
        }
        (_, Some(_)) => return Err(CliError::Usage("--distance needs --scope global".into())),
        (Scope::Global, None) => {
            let mode = match a.metric {
                MetricArg::Jaccard => JaccardMode::Vanilla,
                MetricArg::MaJaccard => JaccardMode::ModalityAware,
                MetricArg::Cosine => {
                    return Err(CliError::Usage("global clustering uses jaccard or ma-jaccard".into()))
                }
            };
            cluster_global(&set, &config, mode)?
        }
        (Scope::Visible, None) => cluster_intra(&set, Modality::Visible, &config, &mut rng)?,
        (Scope::Infrared, None) => cluster_intra(&set, Modality::Infrared, &config, &mut rng)?,
    };
    let labels = assignment.parent_labels(set.len())?;
    let rows: Vec<usize> = assignment
        .source_indices
        .clone()
        .unwrap_or_else(|| (0..set.len()).collect());
    let ari_value = match set.true_ids() {
        Some(ids) => Some(ari(&assignment, &rows.iter().map(|&r| ids[r]).collect::<Vec<_>>())?),
        None => None,
    };
    let sub_modality: Vec<Modality> = rows.iter().map(|&r| set.modality()[r]).collect();
    let out = ClusterOutput {
        config: json!({
            "input": a.input,
            "distance": a.distance,
            "scope": a.scope,
            "metric": match (a.scope, &a.distance) {
                (Scope::Global, None) => json!(a.metric.name()),
                (Scope::Global, Some(_)) => Value::Null,
                _ => json!("jaccard"),
            },
            "cluster": config,
        }),
        num_clusters: assignment.num_clusters,
        noise: assignment.noise_count(),
        labels,
        source_indices: (rows.len() != set.len()).then_some(rows),
        ari: ari_value,
        mixed_rate: (a.scope == Scope::Global).then(|| mixed_cluster_rate(&assignment, &sub_modality)),
    };
    log::info!("{} clusters, {} noise", out.num_clusters, out.noise);
    write_json(&a.out, &serde_json::to_value(&out)?)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "corpus.xma")]
    pub corpus: PathBuf,
    /// Epochs in each of the two stages.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Components to switch off: subset, ma-dist, global-loss.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    #[arg(long, default_value = "train_out")]
    pub out_dir: PathBuf,
}

/// Shape of `report.json` written by `train`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainOutput {
    pub config: Value,
    pub report: TrainReport,
}

pub fn train(g: &GlobalOptions, file: &FileConfig, a: TrainArgs) -> CliResult {
    let mut config = file.train.clone();
    config.seed = file.seed(g.seed, config.seed);
    if let Some(v) = a.epochs {
        config.epochs_per_stage = v;
    }
    if let Some(v) = a.iters {
        config.iters_per_epoch = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(v) = a.p {
        config.p = v;
    }
    if let Some(v) = a.k {
        config.k = v;
    }
    if !a.ablate.is_empty() {
        config.ablate = a
            .ablate
            .iter()
            .map(|s| s.parse::<Ablation>())
            .collect::<Result<_, _>>()?;
    }
    config.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let outcome = run_training(&corpus, &config)?;
    for m in &outcome.report.epochs {
        log::info!(
            "stage {} epoch {}: loss {:.4} rank-1 {:.3}",
            m.stage,
            m.epoch,
            m.loss_intra + m.loss_global.unwrap_or(0.0),
            m.rank1
        );
    }
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| crossmodal::Error::Io { path: dir.clone(), source: e })?;
    outcome.stage1_encoder.save(dir.join("encoder_stage1.xma"))?;
    outcome.encoder.save(dir.join("encoder.xma"))?;
    let out = TrainOutput {
        config: json!({ "corpus": a.corpus, "synth": corpus.config, "train": config }),
        report: outcome.report,
    };
    write_json(&dir.join("report.json"), &serde_json::to_value(&out)?)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, default_value = "corpus.xma")]
    pub corpus: PathBuf,
    /// Encoder checkpoint; without it the corpus embeddings are used.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub max_rank: usize,
    /// `cluster` output over the corpus rows.
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    /// Distance file over the corpus rows.
    #[arg(long)]
    pub distance: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, default_value = "eval_out")]
    pub out_dir: PathBuf,
}

pub fn eval(_g: &GlobalOptions, _file: &FileConfig, a: EvalArgs) -> CliResult {
    let corpus = load_corpus(&a.corpus)?;
    let set = match &a.encoder {
        Some(path) => ToyEncoder::load(path)?.encode(&corpus.raw)?,
        None => corpus.oracle_embed.clone(),
    };
    let query = set.subset_view(&corpus.split.query)?.set;
    let gallery = set.subset_view(&corpus.split.gallery)?.set;
    let retrieval = cmc_map(&query, &gallery, a.max_rank)?;
    let ids = set.true_ids().expect("corpus rows carry identities");
    let mut artifacts = ReportArtifacts { cmc: Some(retrieval.cmc.clone()), ..Default::default() };

    let ari_value = match &a.clusters {
        Some(path) => {
            let c: ClusterOutput = read_json(path)?;
            if c.labels.len() != set.len() {
                return Err(CliError::Data(format!(
                    "{} labels {} rows, corpus has {}",
                    path.display(),
                    c.labels.len(),
                    set.len()
                )));
            }
            let rows = c.source_indices.unwrap_or_else(|| (0..set.len()).collect());
            let pred: Vec<i64> = rows.iter().map(|&r| c.labels[r] as i64).collect();
            let truth: Vec<i64> = rows.iter().map(|&r| ids[r] as i64).collect();
            Some(crossmodal::eval::ari_labels(&pred, &truth)?)
        }
        None => None,
    };

    let gap = match &a.distance {
        Some(path) => {
            let d = read_distance(path)?;
            if d.len() != set.len() {
                return Err(CliError::Data(format!(
                    "{} has {} rows, corpus has {}",
                    path.display(),
                    d.len(),
                    set.len()
                )));
            }
            let (lo, hi) = d.metric().range();
            let bundle = distance_distribution(&set, &d, GroupBy::TrueClass, BinSpec { lo, hi, bins: a.bins })?;
            let gap = bundle.gap();
            artifacts.histograms.push((d.metric().name().to_string(), bundle));
            gap
        }
        None => None,
    };

    artifacts.summary = json!({
        "config": {
            "corpus": a.corpus,
            "encoder": a.encoder,
            "clusters": a.clusters,
            "distance": a.distance,
            "max_rank": a.max_rank,
            "bins": a.bins,
        },
        "rank1": retrieval.rank1(),
        "map": retrieval.map_score,
        "num_queries": retrieval.num_queries,
        "excluded": retrieval.excluded,
        "ari": ari_value,
        "class_gap": gap,
    });
    emit_report(&artifacts, &a.out_dir)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` written by `train`.
    #[arg(long)]
    pub train_report: Option<PathBuf>,
    /// Corpus whose training rows get distance histograms.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, default_value = "report_out")]
    pub out_dir: PathBuf,
}

pub fn report(_g: &GlobalOptions, file: &FileConfig, a: ReportArgs) -> CliResult {
    if a.train_report.is_none() && a.corpus.is_none() {
        return Err(CliError::Usage("report needs --train-report and/or --corpus".into()));
    }
    let mut artifacts = ReportArtifacts::default();
    let mut summary = serde_json::Map::new();
    summary.insert(
        "config".into(),
        json!({
            "train_report": a.train_report,
            "corpus": a.corpus,
            "bins": a.bins,
            "jaccard": file.cluster.jaccard,
        }),
    );
    if let Some(path) = &a.train_report {
        let t: TrainOutput = read_json(path)?;
        let r = &t.report;
        artifacts.epochs = r.epochs.iter().enumerate().map(|(i, m)| m.row(i)).collect();
        artifacts.losses = r.losses.clone();
        artifacts.cmc = Some(r.stage2.cmc.clone());
        summary.insert(
            "training".into(),
            json!({
                "initial": { "rank1": r.initial.rank1(), "map": r.initial.map_score },
                "stage1": { "rank1": r.stage1.rank1(), "map": r.stage1.map_score },
                "stage2": { "rank1": r.stage2.rank1(), "map": r.stage2.map_score },
                "epochs": r.epochs.len(),
            }),
        );
    }
    if let Some(path) = &a.corpus {
        let corpus = load_corpus(path)?;
        let set = corpus.train_embed();
        let cos = cosine_distance(&set)?;
        let params = &file.cluster.jaccard;
        let mut gaps = serde_json::Map::new();
        for d in [
            cos.clone(),
            jaccard_from_cosine(&cos, set.modality(), params, JaccardMode::Vanilla)?,
            jaccard_from_cosine(&cos, set.modality(), params, JaccardMode::ModalityAware)?,
        ] {
            let m: Metric = d.metric();
            let (lo, hi) = m.range();
            let bundle = distance_distribution(&set, &d, GroupBy::TrueClass, BinSpec { lo, hi, bins: a.bins })?;
            gaps.insert(m.name().into(), json!(bundle.gap()));
            artifacts.histograms.push((m.name().to_string(), bundle));
        }
        summary.insert("class_gap".into(), Value::Object(gaps));
    }
    artifacts.summary = Value::Object(summary);
    emit_report(&artifacts, &a.out_dir)?;
    Ok(())
}
