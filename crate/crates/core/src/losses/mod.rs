//! Differentiable baseline similarity metrics and reconstruction losses.
//!
//! All losses are scalar-valued with analytic gradients with respect to the
//! second (moving/warped) image, which is the direction the training loop
//! differentiates. Values are finite and NaN-free on constant, binary, and
//! noise images.

mod lncc;
mod mi;
mod mind;
mod ngf;

pub use lncc::{local_ncc_loss, local_ncc_loss_grad};
pub use mi::{
    local_mutual_information, local_mutual_information_grad, mutual_information,
    mutual_information_grad,
};
pub use mind::{mind_loss, mind_loss_grad};
pub use ngf::{ngf_loss, ngf_loss_grad};

use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Parameters for the baseline metrics.
///
/// Defaults: 48 histogram bins, Parzen kernel sigma of a quarter bin
/// (kernel support of about one bin spacing), local-MI patch 9, MIND
/// distance 2 / patch 3, NCC window 7, and a relative NGF epsilon of 1% of
/// the fixed image's mean gradient magnitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub mi_bins: usize,
    pub mi_parzen_sigma_bins: f64,
    pub lmi_patch: usize,
    pub mind_distance: usize,
    pub mind_patch: usize,
    pub ncc_window: usize,
    /// `None` selects the relative default per call.
    pub ngf_eps: Option<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            mi_bins: 48,
            mi_parzen_sigma_bins: 0.25,
            lmi_patch: 9,
            mind_distance: 2,
            mind_patch: 3,
            ncc_window: 7,
            ngf_eps: None,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mi_bins < 2 {
            return Err(Error::Config(format!(
                "mi_bins must be >= 2, got {}",
                self.mi_bins
            )));
        }
        if self.mi_parzen_sigma_bins <= 0.0 {
            return Err(Error::Config("mi_parzen_sigma_bins must be > 0".into()));
        }
        for (name, v) in [
            ("lmi_patch", self.lmi_patch),
            ("mind_patch", self.mind_patch),
            ("ncc_window", self.ncc_window),
        ] {
            if v < 3 || v % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and >= 3, got {v}")));
            }
        }
        if self.mind_distance == 0 {
            return Err(Error::Config("mind_distance must be >= 1".into()));
        }
        if let Some(eps) = self.ngf_eps {
            if !(eps > 0.0) {
                return Err(Error::Config(format!("ngf_eps must be > 0, got {eps}")));
            }
        }
        Ok(())
    }
}

/// Baseline similarity metric selector used by registration training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMetric {
    Mi,
    LocalMi,
    Mind,
    Ngf,
}

/// Loss and gradient with respect to `b` for the selected baseline metric.
pub fn baseline_loss_grad<F: Real>(
    metric: BaselineMetric,
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    cfg: &MetricConfig,
) -> Result<(F, ArrayD<F>)> {
    match metric {
        BaselineMetric::Mi => {
            mutual_information_grad(a, b, cfg.mi_bins, cfg.mi_parzen_sigma_bins)
        }
        BaselineMetric::LocalMi => local_mutual_information_grad(
            a,
            b,
            cfg.mi_bins,
            cfg.mi_parzen_sigma_bins,
            cfg.lmi_patch,
        ),
        BaselineMetric::Mind => mind_loss_grad(a, b, cfg.mind_distance, cfg.mind_patch),
        BaselineMetric::Ngf => ngf_loss_grad(a, b, cfg.ngf_eps),
    }
}

// -- shared helpers -----------------------------------------------------------

pub(crate) fn check_same_grid<F: Real>(a: &ArrayD<F>, b: &ArrayD<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "images {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        MetricConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = MetricConfig::default();
        cfg.mi_bins = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = MetricConfig::default();
        cfg.ncc_window = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = MetricConfig::default();
        cfg.ngf_eps = Some(0.0);
        assert!(cfg.validate().is_err());
    }
}
