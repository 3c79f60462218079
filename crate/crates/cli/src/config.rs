//! The run configuration file.
//!
//! Everything that affects results lives in one JSON document; the command
//! line carries only paths, the thread cap, and verbosity. A run is fully
//! reproduced by the same config file and the same subcommand.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use affseg::classifier::FeatureConfig;
use affseg::em_trainer::EmConfig;
use affseg::synth::SynthConfig;

/// One experiment's settings. Unknown keys are rejected so a typo cannot
/// silently fall back to a default.
///
/// `seed` is the only random seed: loading overwrites the seeds of the
/// nested sections with it, and each stage then derives its own named
/// sub-streams from there. Setting `em.seed` or `synth.seed` in the file has
/// no effect.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Records in the `train/` half of a generated dataset.
    pub train_count: usize,
    /// Records in the `test/` half.
    pub test_count: usize,
    pub em: EmConfig,
    pub features: FeatureConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_count: 90,
            test_count: 45,
            em: EmConfig::default(),
            features: FeatureConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Push the top-level seed into every nested section.
    pub fn propagate_seed(&mut self) {
        self.em.seed = self.seed;
        self.em.train.seed = self.seed;
        self.synth.seed = self.seed;
    }
}

/// Read and parse a config file; the default when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("{}: invalid run config", p.display()))?
        }
        None => RunConfig::default(),
    };
    cfg.propagate_seed();
    Ok(cfg)
}
