//! Synthetic two-modality corpora with a controllable modality bias.
//!
//! Each identity `k` has a latent center `c_k` on the unit sphere. A sample
//! of modality `m` is `normalize(A_m c_k + b_m + noise)`, where the two
//! modality maps `A_VIS`, `A_IR` have column spaces separated by a principal
//! angle proportional to `modality_gap`, and the offsets `b_VIS = -b_IR`
//! grow linearly with it. At `modality_gap = 0` the two modalities are
//! statistically identical. The noise is isotropic with per-coordinate
//! standard deviation `intra_noise / sqrt(raw_dim)`.
//!
//! With `modes_per_id > 1` each identity gets several jittered sub-centers
//! per modality in place of `c_k`, mimicking pose or camera variation.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::cosine_similarity_f64;
use crate::embed_store::{EmbeddingSet, Modality};
use crate::error::{Error, Result};

/// Principal angle between the modality subspaces at `modality_gap = 1`.
pub const MAX_ROTATION: f64 = 1.3;
/// Norm of each modality offset at `modality_gap = 1`.
pub const MAX_OFFSET: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub imgs_per_id_vis: usize,
    pub imgs_per_id_ir: usize,
    pub latent_dim: usize,
    pub raw_dim: usize,
    pub embed_dim: usize,
    pub modality_gap: f64,
    pub intra_noise: f64,
    /// Extra held-out identities used only for query/gallery retrieval.
    pub num_test_ids: usize,
    /// Sub-centers per identity and modality; samples cycle through them.
    pub modes_per_id: usize,
    /// Scale of the latent jitter placing sub-centers around the identity
    /// center.
    pub mode_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 50,
            imgs_per_id_vis: 20,
            imgs_per_id_ir: 10,
            latent_dim: 16,
            raw_dim: 64,
            embed_dim: 32,
            modality_gap: 0.8,
            intra_noise: 0.1,
            num_test_ids: 20,
            modes_per_id: 1,
            mode_spread: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_ids", self.num_ids),
            ("imgs_per_id_vis", self.imgs_per_id_vis),
            ("imgs_per_id_ir", self.imgs_per_id_ir),
            ("latent_dim", self.latent_dim),
            ("raw_dim", self.raw_dim),
            ("modes_per_id", self.modes_per_id),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.raw_dim < self.latent_dim {
            return Err(Error::param("raw_dim must be at least latent_dim"));
        }
        if self.embed_dim < 2 || self.raw_dim < 2 {
            return Err(Error::param("embed_dim and raw_dim must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.modality_gap) {
            return Err(Error::param("modality_gap must lie in [0, 1]"));
        }
        if !(self.mode_spread >= 0.0) || !self.mode_spread.is_finite() {
            return Err(Error::param("mode_spread must be a finite non-negative number"));
        }
        if !(self.intra_noise >= 0.0) || !self.intra_noise.is_finite() {
            return Err(Error::param("intra_noise must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Row partitions of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Rows of the `num_ids` training identities.
    pub train: Vec<usize>,
    /// Infrared rows of the held-out identities.
    pub query: Vec<usize>,
    /// Visible rows of the held-out identities.
    pub gallery: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    /// Encoder inputs, `raw_dim` wide.
    pub raw: EmbeddingSet,
    /// `raw` pushed through [`SynthCorpus::projection`] and re-normalized.
    pub oracle_embed: EmbeddingSet,
    /// `embed_dim x raw_dim` random projection behind `oracle_embed`.
    pub projection: Array2<f64>,
    pub split: Split,
}

impl SynthCorpus {
    pub fn train_raw(&self) -> EmbeddingSet {
        self.raw
            .subset_view(&self.split.train)
            .expect("split indices are valid")
            .set
    }

    pub fn train_embed(&self) -> EmbeddingSet {
        self.oracle_embed
            .subset_view(&self.split.train)
            .expect("split indices are valid")
            .set
    }
}

/// Orthonormal columns from Gram-Schmidt on a Gaussian matrix.
fn random_orthonormal(rng: &mut ChaCha8Rng, dim: usize, cols: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((dim, cols));
    let mut j = 0;
    while j < cols {
        let mut v: Array1<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for p in 0..j {
            let col = q.column(p);
            let proj = col.dot(&v);
            v.scaled_add(-proj, &col);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        q.column_mut(j).assign(&(v / norm));
        j += 1;
    }
    q
}

struct ModalityMaps {
    vis: Array2<f64>,
    ir: Array2<f64>,
    offset_vis: Array1<f64>,
    offset_ir: Array1<f64>,
}

fn modality_maps(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> ModalityMaps {
    let (raw, lat) = (cfg.raw_dim, cfg.latent_dim);
    let basis = random_orthonormal(rng, raw, raw);
    let q1 = basis.slice(s![.., ..lat]).to_owned();
    // Columns rotated out of span(q1); fewer than `lat` when raw < 2*lat.
    let rot_cols = lat.min(raw - lat);
    let theta = cfg.modality_gap * MAX_ROTATION;
    let mut ir = q1.clone();
    for j in 0..rot_cols {
        let v = &q1.column(j) * theta.cos() + &basis.column(lat + j) * theta.sin();
        ir.column_mut(j).assign(&v);
    }
    let u: Array1<f64> = if raw > 2 * lat {
        basis.column(2 * lat).to_owned()
    } else {
        basis.column(raw - 1).to_owned()
    };
    let b = cfg.modality_gap * MAX_OFFSET;
    ModalityMaps {
        vis: q1,
        ir,
        offset_vis: &u * b,
        offset_ir: &u * (-b),
    }
}

/// Builds a corpus; a pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let maps = modality_maps(config, &mut rng);
    let total_ids = config.num_ids + config.num_test_ids;
    let centers: Vec<Array1<f64>> = (0..total_ids)
        .map(|_| {
            let v: Array1<f64> = (0..config.latent_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let n = v.dot(&v).sqrt().max(1e-12);
            v / n
        })
        .collect();
    let projection = Array2::from_shape_fn((config.embed_dim, config.raw_dim), |_| {
        rng.sample::<f64, _>(StandardNormal) / (config.embed_dim as f64).sqrt()
    });

    let per_id = config.imgs_per_id_vis + config.imgs_per_id_ir;
    // Expected noise norm is about `intra_noise`.
    let noise_std = config.intra_noise / (config.raw_dim as f64).sqrt();
    // One RNG stream per identity keeps generation order-independent.
    let blocks: Vec<Array2<f64>> = (0..total_ids)
        .into_par_iter()
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(k as u64 + 1);
            let mut block = Array2::<f64>::zeros((per_id, config.raw_dim));
            let nm = config.modes_per_id;
            let spread = config.mode_spread / (config.latent_dim as f64).sqrt();
            // Visible modes first, then infrared ones.
            let modes: Vec<Array1<f64>> = (0..2 * nm)
                .map(|_| {
                    let g: Array1<f64> = (0..config.latent_dim)
                        .map(|_| r.sample::<f64, _>(StandardNormal))
                        .collect();
                    let v = &centers[k] + &(g * spread);
                    let n = v.dot(&v).sqrt().max(1e-12);
                    v / n
                })
                .collect();
            for (row, mut out) in block.axis_iter_mut(Axis(0)).enumerate() {
                let (map, offset, mode) = if row < config.imgs_per_id_vis {
                    (&maps.vis, &maps.offset_vis, &modes[row % nm])
                } else {
                    let j = row - config.imgs_per_id_vis;
                    (&maps.ir, &maps.offset_ir, &modes[nm + j % nm])
                };
                let mut x = map.dot(mode) + offset;
                for v in x.iter_mut() {
                    *v += noise_std * r.sample::<f64, _>(StandardNormal);
                }
                out.assign(&x);
            }
            block
        })
        .collect();

    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let raw_rows = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let mut modality = Vec::with_capacity(total_ids * per_id);
    let mut ids = Vec::with_capacity(total_ids * per_id);
    for k in 0..total_ids {
        for row in 0..per_id {
            modality.push(if row < config.imgs_per_id_vis {
                Modality::Visible
            } else {
                Modality::Infrared
            });
            ids.push(k as u32);
        }
    }
    let raw = EmbeddingSet::from_f64_rows(&raw_rows, modality.clone(), Some(ids.clone()))?;
    let projected = raw.features_f64().dot(&projection.t());
    let oracle_embed = EmbeddingSet::from_f64_rows(&projected, modality.clone(), Some(ids))?;

    let n_train = config.num_ids * per_id;
    let split = Split {
        train: (0..n_train).collect(),
        query: (n_train..modality.len())
            .filter(|&i| modality[i] == Modality::Infrared)
            .collect(),
        gallery: (n_train..modality.len())
            .filter(|&i| modality[i] == Modality::Visible)
            .collect(),
    };
    Ok(SynthCorpus {
        config: config.clone(),
        raw,
        oracle_embed,
        projection,
        split,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBias {
    pub id: u32,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

/// Within-class cosine distance statistics split by modality pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub per_class: Vec<ClassBias>,
    pub mean_intra: Option<f64>,
    /// `None` when no class has both modalities.
    pub mean_inter: Option<f64>,
    /// `mean_inter - mean_intra`.
    pub gap: Option<f64>,
}

/// Per-class mean intra- and inter-modality cosine distance of `set`.
pub fn bias_report(set: &EmbeddingSet) -> Result<BiasReport> {
    let ids = set.true_ids().ok_or(Error::MissingIdentities)?;
    let set = set.ensure_normalized()?;
    let feats = set.features_f64();
    let modality = set.modality();
    let mut classes: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &id) in ids.iter().enumerate() {
        classes.entry(id).or_default().push(i);
    }
    let per_class: Vec<ClassBias> = classes
        .iter()
        .map(|(&id, rows)| {
            let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
            for (a, &i) in rows.iter().enumerate() {
                for &j in &rows[a + 1..] {
                    let d = 1.0 - cosine_similarity_f64(feats.row(i), feats.row(j));
                    if modality[i] == modality[j] {
                        intra += d;
                        n_intra += 1;
                    } else {
                        inter += d;
                        n_inter += 1;
                    }
                }
            }
            ClassBias {
                id,
                intra: (n_intra > 0).then(|| intra / n_intra as f64),
                inter: (n_inter > 0).then(|| inter / n_inter as f64),
            }
        })
        .collect();
    let mean_of = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let mean_intra = mean_of(per_class.iter().filter_map(|c| c.intra).collect());
    let mean_inter = mean_of(per_class.iter().filter_map(|c| c.inter).collect());
    let gap = match (mean_intra, mean_inter) {
        (Some(a), Some(e)) => Some(e - a),
        _ => None,
    };
    Ok(BiasReport {
        per_class,
        mean_intra,
        mean_inter,
        gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(gap: f64) -> SynthConfig {
        SynthConfig {
            num_ids: 10,
            imgs_per_id_vis: 6,
            imgs_per_id_ir: 4,
            num_test_ids: 3,
            modality_gap: gap,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small(0.8)).unwrap();
        let b = generate(&small(0.8)).unwrap();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.oracle_embed, b.oracle_embed);
        assert_eq!(a.split, b.split);
    }

    #[test]
    fn shapes_and_split() {
        let c = generate(&small(0.5)).unwrap();
        assert_eq!(c.raw.len(), 13 * 10);
        assert_eq!(c.raw.dim(), 64);
        assert_eq!(c.oracle_embed.dim(), 32);
        assert_eq!(c.oracle_embed.modality(), c.raw.modality());
        assert_eq!(c.split.train.len(), 100);
        assert!(c
            .split
            .query
            .iter()
            .all(|&i| c.raw.modality()[i] == Modality::Infrared));
        assert!(c
            .split
            .gallery
            .iter()
            .all(|&i| c.raw.modality()[i] == Modality::Visible));
        assert!(c.raw.is_normalized() && c.oracle_embed.is_normalized());
    }

    #[test]
    fn single_modality_bias_report_has_no_inter() {
        let c = generate(&small(0.8)).unwrap();
        let vis = c.oracle_embed.modality_view(Modality::Visible).unwrap().set;
        let r = bias_report(&vis).unwrap();
        assert!(r.mean_inter.is_none());
        assert!(r.gap.is_none());
        assert!(r.mean_intra.is_some());
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small(0.2);
        c.raw_dim = 8;
        c.latent_dim = 16;
        assert!(generate(&c).is_err());
        let mut c = small(1.5);
        c.modality_gap = 1.5;
        assert!(generate(&c).is_err());
    }
}
