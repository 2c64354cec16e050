//! Trainable networks: modality-specific autoencoders, projection heads,
//! the registration U-Net, and the FiLM hypernetwork conditioning it on the
//! regularization weight.
//!
//! Forward passes return explicit caches; backward passes consume them and
//! accumulate named parameter gradients into a [`ops::GradStore`].

pub mod autoencoder;
pub mod checkpoint;
pub mod ops;
pub mod projection;
pub mod regnet;

pub use autoencoder::{Autoencoder, AutoencoderSpec, FeatureStack};
pub use ops::{Film, GradStore};
pub use projection::{ProjectionBank, ProjectionHead};
pub use regnet::{HyperNet, HyperNetSpec, RegNet, RegNetSpec};

use crate::error::{Error, Result};
use crate::geometry::VelocityField;
use crate::real::Real;
use ndarray::ArrayD;

/// Validate a conditioning weight.
pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// Full conditioned registration forward pass: the hypernetwork maps
/// `lambda` to FiLM parameters, which modulate the U-Net prediction.
pub fn conditioned_forward<F: Real>(
    regnet: &RegNet<F>,
    hypernet: &HyperNet<F>,
    i1: &ArrayD<F>,
    i2: &ArrayD<F>,
    lambda: f64,
) -> Result<(VelocityField<F>, regnet::RegNetCache<F>, regnet::HyperCache<F>)> {
    check_lambda(lambda)?;
    let (films, hyper_cache) = hypernet.film(lambda);
    let (v, reg_cache) = regnet.forward(i1, i2, &films)?;
    Ok((v, reg_cache, hyper_cache))
}
