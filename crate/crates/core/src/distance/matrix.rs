use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};

use super::JaccardParams;

pub const MAGIC: &[u8; 4] = b"XMD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "jaccard")]
    JaccardVanilla,
    #[serde(rename = "ma-jaccard")]
    JaccardModalityAware,
}

impl Metric {
    pub fn as_byte(self) -> u8 {
        match self {
            Metric::Cosine => 0,
            Metric::JaccardVanilla => 1,
            Metric::JaccardModalityAware => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Metric::Cosine),
            1 => Some(Metric::JaccardVanilla),
            2 => Some(Metric::JaccardModalityAware),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::JaccardVanilla => "jaccard",
            Metric::JaccardModalityAware => "ma-jaccard",
        }
    }

    /// Inclusive value range of the metric.
    pub fn range(self) -> (f64, f64) {
        match self {
            Metric::Cosine => (0.0, 2.0),
            _ => (0.0, 1.0),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "jaccard" => Ok(Metric::JaccardVanilla),
            "ma-jaccard" => Ok(Metric::JaccardModalityAware),
            other => Err(Error::param(format!("unknown metric {other:?}"))),
        }
    }
}

/// Dense symmetric `N x N` distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
    metric: Metric,
    params: Option<JaccardParams>,
}

impl DistanceMatrix {
    /// Wraps `values` after checking shape, symmetry (1e-6) and the zero
    /// diagonal.
    pub fn new(values: Array2<f64>, metric: Metric, params: Option<JaccardParams>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::DimensionMismatch(format!(
                "distance matrix must be square, got {r}x{c}"
            )));
        }
        for i in 0..r {
            if values[[i, i]] != 0.0 {
                return Err(Error::param(format!("non-zero diagonal at row {i}")));
            }
            for j in (i + 1)..r {
                let (a, b) = (values[[i, j]], values[[j, i]]);
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::Numeric(format!("non-finite distance at ({i}, {j})")));
                }
                if (a - b).abs() > 1e-6 {
                    return Err(Error::param(format!("asymmetric distance at ({i}, {j})")));
                }
            }
        }
        Ok(Self {
            values,
            metric,
            params,
        })
    }

    pub(crate) fn new_unchecked(
        values: Array2<f64>,
        metric: Metric,
        params: Option<JaccardParams>,
    ) -> Self {
        debug_assert_eq!(values.nrows(), values.ncols());
        Self {
            values,
            metric,
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn params(&self) -> Option<&JaccardParams> {
        self.params.as_ref()
    }

    /// `XMD1 | u32 N | u8 metric | N*N f32 row-major`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(9 + n * n * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.push(self.metric.as_byte());
        for v in self.values.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Parses [`DistanceMatrix::to_bytes`] output. Values come back at `f32`
    /// precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(Error::BadHeader("expected \"XMD1\" distance file".into()));
        }
        let n = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let metric = Metric::from_byte(bytes[8])
            .ok_or_else(|| Error::BadHeader(format!("unknown metric byte {}", bytes[8])))?;
        let body = &bytes[9..];
        if body.len() != n * n * 4 {
            return Err(Error::BadHeader(format!(
                "expected {} value bytes, found {}",
                n * n * 4,
                body.len()
            )));
        }
        let vals: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let values = Array2::from_shape_vec((n, n), vals)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Self::new(values, metric, None)
    }

    /// Convex mix `(1 - w) * self + w * other`, keeping this matrix's metric.
    pub fn mix_with(&self, other: &DistanceMatrix, weight: f64) -> Result<Self> {
        if other.len() != self.len() {
            return Err(Error::DimensionMismatch("mixing matrices of different size".into()));
        }
        let values = &self.values * (1.0 - weight) + &other.values * weight;
        Ok(Self::new_unchecked(values, self.metric, self.params.clone()))
    }
}

pub fn cosine_similarity_f64(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

/// `1 - <f_i, f_j>` over a normalized copy of `set`.
pub fn cosine_distance(set: &EmbeddingSet) -> Result<DistanceMatrix> {
    let set = set.ensure_normalized()?;
    let feats = set.features_f64();
    let n = feats.nrows();
    let mut values = Array2::<f64>::zeros((n, n));
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for j in 0..n {
                // Evaluate each unordered pair with the lower index first so
                // (i, j) and (j, i) are bit-identical.
                let (a, b) = if i <= j { (i, j) } else { (j, i) };
                let d = if i == j {
                    0.0
                } else {
                    1.0 - feats.row(a).dot(&feats.row(b))
                };
                row[j] = d.clamp(0.0, 2.0);
            }
        });
    Ok(DistanceMatrix::new_unchecked(values, Metric::Cosine, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_store::Modality;
    use ndarray::array;

    fn set(rows: Array2<f32>) -> EmbeddingSet {
        let n = rows.nrows();
        EmbeddingSet::new(rows, vec![Modality::Visible; n])
            .unwrap()
            .l2_normalize()
            .unwrap()
    }

    #[test]
    fn cosine_identity_orthogonal_antipodal() {
        let d = cosine_distance(&set(array![
            [1.0f32, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [-1.0, 0.0]
        ]))
        .unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        assert!((d.get(0, 2) - 1.0).abs() < 1e-12);
        assert!((d.get(0, 3) - 2.0).abs() < 1e-12);
        assert_eq!(d.get(2, 2), 0.0);
        assert_eq!(d.get(2, 0), d.get(0, 2));
    }

    #[test]
    fn unnormalized_input_is_normalized() {
        let s = EmbeddingSet::new(array![[2.0f32, 0.0], [0.0, 5.0]], vec![Modality::Visible; 2])
            .unwrap();
        let d = cosine_distance(&s).unwrap();
        assert!((d.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bytes_roundtrip() {
        let d = cosine_distance(&set(array![[1.0f32, 0.0], [0.6, 0.8], [0.0, 1.0]])).unwrap();
        let back = DistanceMatrix::from_bytes(&d.to_bytes()).unwrap();
        assert_eq!(back.metric(), Metric::Cosine);
        for (a, b) in d.values().iter().zip(back.values().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(DistanceMatrix::from_bytes(b"XMD2").is_err());
    }

    #[test]
    fn rejects_asymmetric() {
        let v = array![[0.0, 0.5], [0.4, 0.0]];
        assert!(DistanceMatrix::new(v, Metric::Cosine, None).is_err());
        let v = array![[0.0, 0.5, 0.1], [0.5, 0.0, 0.2]];
        assert!(DistanceMatrix::new(v, Metric::Cosine, None).is_err());
    }
}
