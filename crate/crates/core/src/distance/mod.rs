//! Pairwise distances: cosine, k-reciprocal Jaccard and its modality-aware
//! rectification.
//!
//! The Jaccard pipeline runs in five stages, each exposed on its own:
//!
//! 1. [`knn`] or [`knn_modality_balanced`] ranks neighbors under cosine
//!    distance.
//! 2. [`reciprocal_expand`] keeps mutual neighbors and expands the set with
//!    the half-size reciprocal sets of well-overlapping candidates.
//! 3. [`v_encode`] turns each set into a sparse, L1-normalized weight row
//!    with weights `exp(-d)`; the full pipeline feeds it `2 * cosine`,
//!    the squared Euclidean distance of unit rows.
//! 4. [`lqe`] / [`balanced_lqe`] average encodings over a small
//!    neighborhood (local query expansion).
//! 5. [`jaccard_from_v`] compares encodings with a weighted Jaccard
//!    distance, `1 - sum(min) / sum(max)`.
//!
//! All stages are parallel over rows and produce identical output for any
//! worker count.

mod jaccard;
mod knn;
mod matrix;

pub use jaccard::{
    balanced_lqe, jaccard_distance, jaccard_from_cosine, jaccard_from_v, lqe, reciprocal_expand,
    v_encode, JaccardMode, JaccardParams, LqeTarget, NeighborEncoding, ReciprocalSet,
};
pub use knn::{
    balanced_neighbors, knn, knn_composition, knn_modality_balanced, Composition, NeighborList,
};
pub use matrix::{cosine_distance, cosine_similarity_f64, DistanceMatrix, Metric};
