//! Scripted experiments over freshly generated corpora. Every table lands
//! in `--out-dir` as CSV, with a `summary.json` of means and the effective
//! configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use crossmodal::cluster::{cluster_global, cluster_intra, mixed_cluster_rate, ClusterConfig};
use crossmodal::distance::{
    cosine_distance, jaccard_from_cosine, knn, knn_composition, knn_modality_balanced, DistanceMatrix,
    JaccardMode,
};
use crossmodal::embed_store::Modality;
use crossmodal::eval::{ari, distance_distribution, fmt_f64, histogram_csv, BinSpec, GroupBy};
use crossmodal::synth::{generate, SynthConfig};
use crossmodal::train::{train, Ablation, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use crate::commands::write_json;
use crate::config::FileConfig;
use crate::{CliResult, GlobalOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// Inter-modality share of cosine and balanced neighbor lists.
    Composition,
    /// Within-class distance histograms per metric.
    Distributions,
    /// Global clustering quality, vanilla vs modality-aware Jaccard.
    Ari,
    /// Paired training runs with components switched off.
    Ablation,
    /// Subset ratio sweep on a corpus with twice the visible images.
    Ratio,
    All,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    #[arg(long, value_enum, default_value_t = Experiment::All)]
    pub experiment: Experiment,
    /// Seeds per experiment; by default 5, or 3 for ablation and ratio.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long, default_value = "repro_out")]
    pub out_dir: PathBuf,
}

/// Visible images per identity and sub-center layout of the ratio corpus.
pub const RATIO_VIS_PER_ID: usize = 40;
pub const RATIO_MODES: usize = 2;
pub const RATIO_MODE_SPREAD: f64 = 0.7;

struct Ctx<'a> {
    synth: SynthConfig,
    cluster: ClusterConfig,
    train: TrainConfig,
    base_seed: u64,
    seeds: Option<u64>,
    dir: &'a Path,
}

impl Ctx<'_> {
    fn seeds(&self, default: u64) -> impl Iterator<Item = u64> {
        let base = self.base_seed;
        (0..self.seeds.unwrap_or(default)).map(move |s| base + s)
    }

    fn corpus_config(&self, seed: u64) -> SynthConfig {
        SynthConfig { seed, ..self.synth.clone() }
    }

    fn write(&self, name: &str, body: &str) -> CliResult {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| crossmodal::Error::Io { path, source: e })?;
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn metrics(ctx: &Ctx<'_>, cos: &DistanceMatrix, modality: &[Modality]) -> CliResult<[DistanceMatrix; 3]> {
    let p = &ctx.cluster.jaccard;
    Ok([
        cos.clone(),
        jaccard_from_cosine(cos, modality, p, JaccardMode::Vanilla)?,
        jaccard_from_cosine(cos, modality, p, JaccardMode::ModalityAware)?,
    ])
}

fn composition(ctx: &Ctx<'_>) -> CliResult<Value> {
    let k = ctx.cluster.jaccard.k1;
    let mut csv = String::from("gap,seed,cosine,balanced\n");
    let mut summary = Map::new();
    for gap in [0.0, 0.4, 0.8] {
        let (mut plain, mut balanced) = (vec![], vec![]);
        for seed in ctx.seeds(5) {
            let corpus = generate(&SynthConfig { modality_gap: gap, ..ctx.corpus_config(seed) })?;
            let set = corpus.train_embed();
            let cos = cosine_distance(&set)?;
            let c = knn_composition(&knn(&cos, k)?, set.modality()).mean;
            let b = knn_composition(&knn_modality_balanced(&cos, set.modality(), k)?, set.modality()).mean;
            writeln!(csv, "{},{seed},{},{}", fmt_f64(gap), fmt_f64(c), fmt_f64(b)).unwrap();
            plain.push(c);
            balanced.push(b);
        }
        summary.insert(
            fmt_f64(gap),
            json!({ "cosine": mean(&plain), "balanced": mean(&balanced) }),
        );
    }
    ctx.write("composition.csv", &csv)?;
    Ok(Value::Object(summary))
}

fn distributions(ctx: &Ctx<'_>) -> CliResult<Value> {
    let mut csv = String::from("seed,metric,intra_mean,cross_mean,gap\n");
    let mut gaps: [Vec<f64>; 3] = Default::default();
    let mut names = [""; 3];
    for (s, seed) in ctx.seeds(5).enumerate() {
        let set = generate(&ctx.corpus_config(seed))?.train_embed();
        let cos = cosine_distance(&set)?;
        for (k, d) in metrics(ctx, &cos, set.modality())?.iter().enumerate() {
            let (lo, hi) = d.metric().range();
            let bundle = distance_distribution(&set, d, GroupBy::TrueClass, BinSpec { lo, hi, bins: 50 })?;
            let name = d.metric().name();
            names[k] = name;
            let (intra, cross, gap) = (bundle.intra_mean(), bundle.vis_ir.mean(), bundle.gap());
            let f = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
            writeln!(csv, "{seed},{name},{},{},{}", f(intra), f(cross), f(gap)).unwrap();
            gaps[k].extend(gap);
            if s == 0 {
                ctx.write(&format!("hist_{name}.csv"), &histogram_csv(&bundle))?;
            }
        }
    }
    ctx.write("distributions.csv", &csv)?;
    Ok(json!({
        "mean_gap": names.iter().zip(&gaps).map(|(n, g)| (n.to_string(), json!(mean(g)))).collect::<Map<_, _>>()
    }))
}

fn ari_experiment(ctx: &Ctx<'_>) -> CliResult<Value> {
    let mut csv = String::from("seed,metric,ari,clusters,mixed_rate\n");
    let mut summary = Map::new();
    let mut acc: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    let modes = [JaccardMode::Vanilla, JaccardMode::ModalityAware];
    for seed in ctx.seeds(5) {
        let set = generate(&ctx.corpus_config(seed))?.train_embed();
        let ids = set.true_ids().expect("synthetic rows carry identities").to_vec();
        for (k, mode) in modes.iter().enumerate() {
            let a = cluster_global(&set, &ctx.cluster, *mode)?;
            let score = ari(&a, &ids)?;
            let mixed = mixed_cluster_rate(&a, set.modality());
            let name = mode.metric().name();
            writeln!(csv, "{seed},{name},{},{},{}", fmt_f64(score), a.num_clusters, fmt_f64(mixed)).unwrap();
            acc[k].0.push(score);
            acc[k].1.push(mixed);
        }
    }
    for (k, mode) in modes.iter().enumerate() {
        summary.insert(
            mode.metric().name().into(),
            json!({ "ari": mean(&acc[k].0), "mixed_rate": mean(&acc[k].1) }),
        );
    }
    ctx.write("ari.csv", &csv)?;
    Ok(Value::Object(summary))
}

/// One row of the ablation grid: name, whether stage 2 runs, and the
/// components that stay switched on.
struct Variant {
    name: &'static str,
    global: bool,
    subset: bool,
    ma_dist: bool,
    multi_positive: bool,
}

const VARIANTS: [Variant; 6] = [
    Variant { name: "M1", global: false, subset: false, ma_dist: false, multi_positive: false },
    Variant { name: "M2", global: true, subset: false, ma_dist: false, multi_positive: false },
    Variant { name: "M3", global: true, subset: false, ma_dist: true, multi_positive: false },
    Variant { name: "M4", global: true, subset: true, ma_dist: true, multi_positive: false },
    Variant { name: "M5", global: true, subset: true, ma_dist: false, multi_positive: true },
    Variant { name: "M6", global: true, subset: true, ma_dist: true, multi_positive: true },
];

impl Variant {
    fn ablations(&self) -> Vec<Ablation> {
        let mut out = Vec::new();
        if !self.subset {
            out.push(Ablation::Subset);
        }
        if !self.ma_dist {
            out.push(Ablation::MaDist);
        }
        if !self.multi_positive {
            out.push(Ablation::GlobalLoss);
        }
        out
    }
}

fn ablation(ctx: &Ctx<'_>) -> CliResult<Value> {
    let mut runs = String::from("model,seed,rank1,map\n");
    let mut scores: Vec<(Vec<f64>, Vec<f64>)> = VARIANTS.iter().map(|_| Default::default()).collect();
    for seed in ctx.seeds(3) {
        let corpus = generate(&ctx.corpus_config(seed))?;
        // M1 is the stage-1 checkpoint of the M2 run, which shares its
        // (full-set) intra clustering.
        let mut stage1 = None;
        for (k, v) in VARIANTS.iter().enumerate().skip(1) {
            let config = TrainConfig { seed, ablate: v.ablations(), ..ctx.train.clone() };
            let report = train(&corpus, &config)?.report;
            log::info!("{} seed {seed}: rank-1 {:.3}", v.name, report.stage2.rank1());
            stage1.get_or_insert(report.stage1.clone());
            scores[k].0.push(report.stage2.rank1());
            scores[k].1.push(report.stage2.map_score);
        }
        let s1 = stage1.expect("at least one training run");
        scores[0].0.push(s1.rank1());
        scores[0].1.push(s1.map_score);
        for (k, v) in VARIANTS.iter().enumerate() {
            let (r, m) = (scores[k].0.last().unwrap(), scores[k].1.last().unwrap());
            writeln!(runs, "{},{seed},{},{}", v.name, fmt_f64(*r), fmt_f64(*m)).unwrap();
        }
    }
    let mut grid = String::from("model,global,subset,ma_dist,multi_positive,rank1,map\n");
    let mut summary = Map::new();
    for (k, v) in VARIANTS.iter().enumerate() {
        let (r, m) = (mean(&scores[k].0), mean(&scores[k].1));
        let b = |x: bool| x as u8;
        writeln!(
            grid,
            "{},{},{},{},{},{},{}",
            v.name,
            b(v.global),
            b(v.subset),
            b(v.ma_dist),
            b(v.multi_positive),
            fmt_f64(r),
            fmt_f64(m)
        )
        .unwrap();
        summary.insert(v.name.into(), json!({ "rank1": r, "map": m }));
    }
    ctx.write("ablation.csv", &grid)?;
    ctx.write("ablation_runs.csv", &runs)?;
    Ok(Value::Object(summary))
}

pub fn ratio_corpus(base: &SynthConfig, seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        imgs_per_id_vis: RATIO_VIS_PER_ID,
        modes_per_id: RATIO_MODES,
        mode_spread: RATIO_MODE_SPREAD,
        ..base.clone()
    }
}

fn ratio(ctx: &Ctx<'_>) -> CliResult<Value> {
    let ratios = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    let mut csv = String::from("ratio,seed,clusters,true_ids,ari\n");
    let mut acc: Vec<(Vec<f64>, Vec<f64>)> = ratios.iter().map(|_| Default::default()).collect();
    for seed in ctx.seeds(3) {
        let set = generate(&ratio_corpus(&ctx.synth, seed))?.train_embed();
        let ids = set.true_ids().expect("synthetic rows carry identities").to_vec();
        for (k, &r) in ratios.iter().enumerate() {
            let config = ClusterConfig { subset_ratio: r, ..ctx.cluster.clone() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cluster_intra(&set, Modality::Visible, &config, &mut rng)?;
            let rows = a.source_indices.as_deref().unwrap_or_default();
            let sub: Vec<u32> = rows.iter().map(|&i| ids[i]).collect();
            let score = ari(&a, &sub)?;
            let truth = sub.iter().collect::<std::collections::BTreeSet<_>>().len();
            writeln!(csv, "{},{seed},{},{truth},{}", fmt_f64(r), a.num_clusters, fmt_f64(score)).unwrap();
            acc[k].0.push(a.num_clusters as f64);
            acc[k].1.push(score);
        }
    }
    ctx.write("ratio.csv", &csv)?;
    Ok(Value::Object(
        ratios
            .iter()
            .zip(&acc)
            .map(|(r, (c, a))| (fmt_f64(*r), json!({ "clusters": mean(c), "ari": mean(a) })))
            .collect(),
    ))
}

pub fn run(g: &GlobalOptions, file: &FileConfig, a: ReproArgs) -> CliResult {
    fs::create_dir_all(&a.out_dir).map_err(|e| crossmodal::Error::Io { path: a.out_dir.clone(), source: e })?;
    let ctx = Ctx {
        synth: file.synth.clone(),
        cluster: file.cluster.clone(),
        train: file.train.clone(),
        base_seed: file.seed(g.seed, 0),
        seeds: a.seeds,
        dir: &a.out_dir,
    };
    ctx.cluster.validate()?;
    ctx.train.validate()?;
    let selected: Vec<Experiment> = match a.experiment {
        Experiment::All => vec![
            Experiment::Composition,
            Experiment::Distributions,
            Experiment::Ari,
            Experiment::Ablation,
            Experiment::Ratio,
        ],
        e => vec![e],
    };
    let mut results = Map::new();
    for e in selected {
        let (name, value) = match e {
            Experiment::Composition => ("composition", composition(&ctx)?),
            Experiment::Distributions => ("distributions", distributions(&ctx)?),
            Experiment::Ari => ("ari", ari_experiment(&ctx)?),
            Experiment::Ablation => ("ablation", ablation(&ctx)?),
            Experiment::Ratio => ("ratio", ratio(&ctx)?),
            Experiment::All => unreachable!(),
        };
        log::info!("{name} done");
        results.insert(name.into(), value);
    }
    let summary = json!({
        "config": {
            "base_seed": ctx.base_seed,
            "seeds": a.seeds,
            "synth": ctx.synth,
            "cluster": ctx.cluster,
            "train": ctx.train,
            "ratio_corpus": {
                "imgs_per_id_vis": RATIO_VIS_PER_ID,
                "modes_per_id": RATIO_MODES,
                "mode_spread": RATIO_MODE_SPREAD,
            },
        },
        "results": results,
    });
    write_json(&a.out_dir.join("summary.json"), &summary)
}
