//! Unsupervised grouping of visible and infrared samples of the same
//! identity.
//!
//! - [`synth`]: synthetic two-modality corpora with a tunable modality gap.
//! - [`embed_store`]: embedding sets and their binary/CSV files.
//! - [`distance`]: cosine, Jaccard and modality-aware Jaccard distances.
//! - [`cluster`]: DBSCAN, subset clustering of the visible set, global
//!   clustering.
//! - [`memory`], [`objectives`]: prototype banks, EMA updates, contrastive
//!   losses with analytic gradients.
//! - [`train`]: two-stage training of a linear encoder.
//! - [`eval`]: ARI, CMC/mAP, distance histograms, CSV reports.
//!
//! ```
//! use crossmodal::cluster::{cluster_global, ClusterConfig};
//! use crossmodal::distance::JaccardMode;
//! use crossmodal::eval::ari;
//! use crossmodal::synth::{generate, SynthConfig};
//!
//! let set = generate(&SynthConfig { num_ids: 10, num_test_ids: 0, ..Default::default() })?.train_embed();
//! let clusters = cluster_global(&set, &ClusterConfig::default(), JaccardMode::ModalityAware)?;
//! let score = ari(&clusters, set.true_ids().unwrap())?;
//! assert!(score > 0.0);
//! # Ok::<(), crossmodal::Error>(())
//! ```

pub mod cluster;
pub mod distance;
pub mod embed_store;
pub mod error;
pub mod eval;
pub mod memory;
pub mod objectives;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
