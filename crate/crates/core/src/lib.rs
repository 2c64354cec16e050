//! Unsupervised multi-modality deformable image registration.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`volume`] / [`io`] / [`synth`]: the data model, two on-disk formats
//!   (NIfTI-1 for 3D, a raw tensor container for 2D), and a synthetic
//!   cross-modality dataset generator.
//! - [`geometry`]: stationary-velocity-field integration by scaling and
//!   squaring, differentiable warping, and Jacobian determinant fields.
//! - [`losses`]: differentiable baseline similarity metrics (mutual
//!   information, local MI, MIND, normalized gradient fields) and
//!   reconstruction losses (L1, local NCC).
//! - [`nets`]: hand-rolled forward/backward for the modality-specific
//!   autoencoders, projection heads, registration U-Net, and the FiLM
//!   hypernetwork that conditions it on the regularization weight.
//! - [`contrastive`]: masked/unmasked index sampling and the multi-scale
//!   InfoNCE similarity used as the registration loss.
//! - [`training`]: autoencoder pretraining, hypernetwork-conditioned
//!   registration training, and checkpoint/resume.
//! - [`evaluation`]: Dice/Dice30, folding statistics, the 17-point
//!   regularization sweep, optimal-weight selection, and report emission.
//!
//! All numeric kernels are generic over [`real::Real`] (`f32`/`f64`);
//! training runs in `f32`, gradient-check oracles instantiate `f64`.
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to sequential execution
//! otherwise. Both paths produce bit-identical results.

pub mod config;
pub mod contrastive;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod nets;
pub mod par;
pub mod real;
pub mod rng;
pub mod synth;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
