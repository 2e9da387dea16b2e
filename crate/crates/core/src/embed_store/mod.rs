//! Embedding data model shared by every other module.
//!
//! An [`EmbeddingSet`] is an `N x d` feature matrix in which every row
//! carries a [`Modality`] tag and, optionally, a ground-truth identity and a
//! camera id. Sets are immutable once built; operations return new sets.

mod io;

pub use io::{decode_binary, encode_binary, load, read_csv, save, write_csv, Format};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sensor domain of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "VIS")]
    Visible,
    #[serde(rename = "IR")]
    Infrared,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visible, Modality::Infrared];

    pub fn as_byte(self) -> u8 {
        match self {
            Modality::Visible => 0,
            Modality::Infrared => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Visible),
            1 => Some(Modality::Infrared),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Visible => Modality::Infrared,
            Modality::Infrared => Modality::Visible,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visible => "VIS",
            Modality::Infrared => "IR",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "VIS" | "vis" | "0" => Ok(Modality::Visible),
            "IR" | "ir" | "1" => Ok(Modality::Infrared),
            other => Err(other.to_string()),
        }
    }
}

/// Tolerance on row norms for a set flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// `N` feature rows of dimension `d` with per-row modality tags.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Array2<f32>,
    modality: Vec<Modality>,
    true_id: Option<Vec<u32>>,
    camera: Option<Vec<u32>>,
    normalized: bool,
}

impl EmbeddingSet {
    /// Builds a validated set. The normalized flag starts cleared; use
    /// [`EmbeddingSet::l2_normalize`] or [`EmbeddingSet::with_normalized_flag`].
    pub fn new(features: Array2<f32>, modality: Vec<Modality>) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(Error::EmptySet);
        }
        if d < 2 {
            return Err(Error::DimensionMismatch(format!(
                "feature dimension must be at least 2, got {d}"
            )));
        }
        if modality.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} modality tags for {n} rows",
                modality.len()
            )));
        }
        for (row, values) in features.outer_iter().enumerate() {
            if let Some(col) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, col });
            }
        }
        Ok(Self {
            features,
            modality,
            true_id: None,
            camera: None,
            normalized: false,
        })
    }

    pub fn with_true_ids(mut self, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} identities for {} rows",
                ids.len(),
                self.len()
            )));
        }
        self.true_id = Some(ids);
        Ok(self)
    }

    pub fn with_cameras(mut self, cameras: Vec<u32>) -> Result<Self> {
        if cameras.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} camera ids for {} rows",
                cameras.len(),
                self.len()
            )));
        }
        self.camera = Some(cameras);
        Ok(self)
    }

    /// Sets the normalized flag after checking every row is unit-norm.
    pub fn with_normalized_flag(mut self) -> Result<Self> {
        if let Some(row) = self.first_non_unit_row() {
            return Err(Error::Numeric(format!(
                "row {row} is not unit-norm; cannot flag set as normalized"
            )));
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.features.row(i)
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn true_ids(&self) -> Option<&[u32]> {
        self.true_id.as_deref()
    }

    pub fn cameras(&self) -> Option<&[u32]> {
        self.camera.as_deref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Row count per modality, `(visible, infrared)`.
    pub fn modality_counts(&self) -> (usize, usize) {
        let vis = self
            .modality
            .iter()
            .filter(|m| **m == Modality::Visible)
            .count();
        (vis, self.len() - vis)
    }

    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        self.modality
            .iter()
            .enumerate()
            .filter(|(_, m)| **m == modality)
            .map(|(i, _)| i)
            .collect()
    }

    fn first_non_unit_row(&self) -> Option<usize> {
        self.features.outer_iter().position(|row| {
            let norm = row_norm(row);
            (norm - 1.0).abs() > UNIT_NORM_TOL
        })
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    ///
    /// Rows already unit-norm at `f32` precision are left bit-identical, so
    /// the operation is idempotent.
    pub fn l2_normalize(&self) -> Result<Self> {
        let mut features = self.features.clone();
        for (i, mut row) in features.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row_norm(row.view());
            if norm == 0.0 {
                return Err(Error::ZeroNorm(i));
            }
            if (norm - 1.0).abs() <= 4.0 * f32::EPSILON as f64 {
                continue;
            }
            row.mapv_inplace(|v| (v as f64 / norm) as f32);
        }
        Ok(Self {
            features,
            modality: self.modality.clone(),
            true_id: self.true_id.clone(),
            camera: self.camera.clone(),
            normalized: true,
        })
    }

    /// Normalizes unless the flag is already set, logging a warning when
    /// work was needed.
    pub fn ensure_normalized(&self) -> Result<std::borrow::Cow<'_, Self>> {
        if self.normalized {
            Ok(std::borrow::Cow::Borrowed(self))
        } else {
            log::warn!(
                "embedding set of {} rows is not flagged normalized; normalizing",
                self.len()
            );
            Ok(std::borrow::Cow::Owned(self.l2_normalize()?))
        }
    }

    /// Rows at `indices`, in the given order.
    pub fn subset_view(&self, indices: &[usize]) -> Result<SubsetView> {
        if indices.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            if !seen.insert(i) {
                return Err(Error::DuplicateIndex(i));
            }
        }
        let set = EmbeddingSet {
            features: self.features.select(Axis(0), indices),
            modality: indices.iter().map(|&i| self.modality[i]).collect(),
            true_id: self
                .true_id
                .as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i]).collect()),
            camera: self
                .camera
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
            normalized: self.normalized,
        };
        Ok(SubsetView {
            set,
            parent_indices: indices.to_vec(),
        })
    }

    /// Rows of a single modality.
    pub fn modality_view(&self, modality: Modality) -> Result<SubsetView> {
        let idx = self.indices_of(modality);
        if idx.is_empty() {
            return Err(Error::InsufficientRows(format!("no {modality} rows")));
        }
        self.subset_view(&idx)
    }

    /// Feature rows widened to `f64`.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub(crate) fn from_parts(
        features: Array2<f32>,
        modality: Vec<Modality>,
        true_id: Option<Vec<u32>>,
        camera: Option<Vec<u32>>,
        normalized: bool,
    ) -> Result<Self> {
        let mut set = Self::new(features, modality)?;
        if let Some(ids) = true_id {
            set = set.with_true_ids(ids)?;
        }
        if let Some(c) = camera {
            set = set.with_cameras(c)?;
        }
        if normalized {
            set = set.with_normalized_flag()?;
        }
        Ok(set)
    }

    /// Builds a normalized set from `f64` rows (normalizing in `f64` first).
    pub fn from_f64_rows(
        features: &Array2<f64>,
        modality: Vec<Modality>,
        true_id: Option<Vec<u32>>,
    ) -> Result<Self> {
        let mut out = Array2::<f32>::zeros(features.dim());
        for (i, (src, mut dst)) in features
            .outer_iter()
            .zip(out.axis_iter_mut(Axis(0)))
            .enumerate()
        {
            let norm = src.dot(&src).sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm(i));
            }
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("row {i} has non-finite norm")));
            }
            dst.assign(&src.mapv(|v| (v / norm) as f32));
        }
        let mut set = Self::new(out, modality)?;
        if let Some(ids) = true_id {
            set = set.with_true_ids(ids)?;
        }
        // f32 rounding can leave norms a few ulps off 1; that is well within
        // UNIT_NORM_TOL.
        set.with_normalized_flag()
    }
}

/// A subset of a parent set plus the parent row of each subset row.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetView {
    pub set: EmbeddingSet,
    pub parent_indices: Vec<usize>,
}

pub(crate) fn row_norm(row: ArrayView1<'_, f32>) -> f64 {
    row.iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}
