//! Run configuration: one TOML file mirroring the training, pretraining,
//! contrastive, metric, and evaluation settings. Unknown keys are rejected;
//! a SHA-256 hash of the canonical serialization is recorded in every
//! output for provenance.

use crate::contrastive::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::evaluation::default_lambda_grid;
use crate::losses::MetricConfig;
use crate::training::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset manifest path (written by the synth command).
    pub manifest: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: "data/manifest.txt".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Folding budget in percent of voxels for optimal-lambda selection.
    pub fold_budget: f64,
    /// Regularization sweep grid; defaults to the 17-point grid.
    pub lambda_grid: Vec<f64>,
    /// Number of unordered test pairs (each evaluated in both directions).
    pub max_test_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fold_budget: 0.5,
            lambda_grid: default_lambda_grid(),
            max_test_pairs: 8,
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; all component seeds derive from it.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub contrastive: ContrastiveConfig,
    pub metrics: MetricConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagate the root seed into the component configs.
    pub fn resolve(&mut self) {
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.contrastive.validate()?;
        self.metrics.validate()?;
        if !(self.eval.fold_budget > 0.0) {
            return Err(Error::Config("eval.fold_budget must be > 0".into()));
        }
        if self.eval.lambda_grid.is_empty()
            || self
                .eval
                .lambda_grid
                .iter()
                .any(|&l| !(0.0..=1.0).contains(&l))
        {
            return Err(Error::Config(
                "eval.lambda_grid must be a nonempty subset of [0, 1]".into(),
            ));
        }
        if self.eval.max_test_pairs == 0 {
            return Err(Error::Config("eval.max_test_pairs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical serialization.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Write the resolved config and its hash into an output directory.
    pub fn record(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.resolved.toml"), self.to_toml())?;
        std::fs::write(out_dir.join("config.hash"), self.hash())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "seed = 1\nbogus_key = 2\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let path2 = dir.path().join("cfg2.toml");
        std::fs::write(&path2, "seed = 1\n[train]\nnot_a_field = true\n").unwrap();
        assert!(RunConfig::load(&path2).is_err());
    }

    #[test]
    fn root_seed_propagates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "seed = 99\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.pretrain.seed, 99);
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 123;
        assert_ne!(a.hash(), b.hash());
    }
}
