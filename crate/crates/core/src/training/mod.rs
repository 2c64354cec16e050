//! Training loops: autoencoder pretraining (self-supervised and
//! supervised), and hypernetwork-conditioned registration training for the
//! contrastive modes, their ablations, and the baseline similarity losses.

pub mod adam;
pub mod pretrain;
pub mod register;
pub mod state;

pub use adam::Adam;
pub use pretrain::{pretrain_autoencoder, supervised_pretrain, PretrainConfig, PretrainOutcome};
pub use register::{train_registration, RegModelBundle, TrainData, TrainLogRow, TrainSubject};
pub use state::{load_train_state, save_train_state};

use crate::error::{Error, Result};
use crate::losses::BaselineMetric;
use serde::{Deserialize, Serialize};

/// Benchmarked training modes: the contrastive family with its ablations,
/// and the baseline similarity losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Cr,
    Mcr,
    CrMi,
    CrExtnegs,
    CrMiExtnegs,
    CrSup,
    McrSup,
    McrRandae,
    Mi,
    LocalMi,
    Mind,
    Ngf,
}

impl Mode {
    pub const ALL: [Mode; 12] = [
        Mode::Cr,
        Mode::Mcr,
        Mode::CrMi,
        Mode::CrExtnegs,
        Mode::CrMiExtnegs,
        Mode::CrSup,
        Mode::McrSup,
        Mode::McrRandae,
        Mode::Mi,
        Mode::LocalMi,
        Mode::Mind,
        Mode::Ngf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Cr => "cr",
            Mode::Mcr => "mcr",
            Mode::CrMi => "cr-mi",
            Mode::CrExtnegs => "cr-extnegs",
            Mode::CrMiExtnegs => "cr-mi-extnegs",
            Mode::CrSup => "cr-sup",
            Mode::McrSup => "mcr-sup",
            Mode::McrRandae => "mcr-randae",
            Mode::Mi => "mi",
            Mode::LocalMi => "local-mi",
            Mode::Mind => "mind",
            Mode::Ngf => "ngf",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode `{s}`; expected one of {}",
                    Mode::ALL
                        .iter()
                        .map(|m| m.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }

    /// Contrastive-similarity family (as opposed to baseline metrics).
    pub fn is_contrastive(self) -> bool {
        self.baseline_metric().is_none()
    }

    /// Masked sampling (the foreground-union variant).
    pub fn masked(self) -> bool {
        matches!(self, Mode::Mcr | Mode::McrSup | Mode::McrRandae)
    }

    /// Adds the global MI term to the contrastive similarity.
    pub fn with_mi(self) -> bool {
        matches!(self, Mode::CrMi | Mode::CrMiExtnegs)
    }

    pub fn external_negatives(self) -> bool {
        matches!(self, Mode::CrExtnegs | Mode::CrMiExtnegs)
    }

    /// Uses randomly-initialized frozen extractors instead of pretrained ones.
    pub fn random_frozen_extractors(self) -> bool {
        matches!(self, Mode::McrRandae)
    }

    /// Expects checkpoints from supervised pretraining.
    pub fn supervised_pretrained(self) -> bool {
        matches!(self, Mode::CrSup | Mode::McrSup)
    }

    /// Requires pretrained autoencoder checkpoints.
    pub fn needs_pretrained_extractors(self) -> bool {
        self.is_contrastive() && !self.random_frozen_extractors()
    }

    pub fn baseline_metric(self) -> Option<BaselineMetric> {
        match self {
            Mode::Mi => Some(BaselineMetric::Mi),
            Mode::LocalMi => Some(BaselineMetric::LocalMi),
            Mode::Mind => Some(BaselineMetric::Mind),
            Mode::Ngf => Some(BaselineMetric::Ngf),
            _ => None,
        }
    }
}

/// Registration-training configuration.
///
/// Defaults are the desk-scale preset: 3000 iterations at 96^2; the
/// paper-scale preset keeps the same optimizer settings with 1e5
/// iterations. `ts = 5` matches the ch = 64 benchmark setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub seed: u64,
    pub mode: Mode,
    pub ts: u32,
    pub ch: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            batch: 1,
            seed: 0,
            mode: Mode::Mcr,
            ts: 5,
            ch: 64,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.ts < 1 {
            return Err(Error::Config("ts must be >= 1".into()));
        }
        if self.batch != 1 {
            return Err(Error::Config(
                "only batch = 1 (one pair per iteration) is supported".into(),
            ));
        }
        if self.ch == 0 {
            return Err(Error::Config("ch must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_strings_round_trip() {
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.as_str()).unwrap(), m);
        }
        assert!(Mode::parse("bogus").is_err());
    }

    #[test]
    fn mode_flags_are_consistent() {
        assert!(Mode::Mcr.masked() && Mode::Mcr.is_contrastive());
        assert!(!Mode::Cr.masked());
        assert!(Mode::CrMi.with_mi() && Mode::CrMiExtnegs.with_mi());
        assert!(Mode::McrRandae.random_frozen_extractors());
        assert!(!Mode::McrRandae.needs_pretrained_extractors());
        assert!(Mode::Mcr.needs_pretrained_extractors());
        assert_eq!(Mode::Mind.baseline_metric(), Some(BaselineMetric::Mind));
        assert!(Mode::Mi.baseline_metric().is_some() && !Mode::Mi.is_contrastive());
    }

    #[test]
    fn default_config_valid() {
        TrainConfig::default().validate().unwrap();
        let mut bad = TrainConfig::default();
        bad.ts = 0;
        assert!(bad.validate().is_err());
    }
}
