use std::path::Path;

use crossmodal::cluster::ClusterConfig;
use crossmodal::synth::SynthConfig;
use crossmodal::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Contents of `--config`. Missing sections fall back to defaults; flags
/// override whatever is here.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    /// `--seed`, else the file's top-level seed, else `fallback`.
    pub fn seed(&self, flag: Option<u64>, fallback: u64) -> u64 {
        flag.or(self.seed).unwrap_or(fallback)
    }
}
