//! Projection heads mapping autoencoder features onto the unit hypersphere.
//!
//! One 3-layer 256-wide ReLU MLP per feature layer per modality, applied
//! per spatial index, with L2 normalization of the outputs.

use super::ops::{
    l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward, GradStore, Linear,
    ParamFn,
};
use crate::error::Result;
use crate::real::Real;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

pub const EMBED_DIM: usize = 256;

pub struct ProjectionHead<F: Real> {
    l1: Linear<F>,
    l2: Linear<F>,
    l3: Linear<F>,
}

pub struct ProjCache<F: Real> {
    x: Array2<F>,
    a1: Array2<F>,
    r1: Array2<F>,
    a2: Array2<F>,
    r2: Array2<F>,
    normalized: Array2<F>,
    norms: Vec<F>,
}

impl<F: Real> ProjectionHead<F> {
    pub fn new(in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ProjectionHead {
            l1: Linear::new(in_dim, EMBED_DIM, rng),
            l2: Linear::new(EMBED_DIM, EMBED_DIM, rng),
            l3: Linear::new(EMBED_DIM, EMBED_DIM, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count() + self.l3.param_count()
    }

    /// Project rows of `[n, in_dim]` to unit-norm embeddings `[n, 256]`.
    pub fn forward(&self, x: &Array2<F>) -> Result<(Array2<F>, ProjCache<F>)> {
        let a1 = self.l1.forward(x);
        let r1 = relu(&a1);
        let a2 = self.l2.forward(&r1);
        let r2 = relu(&a2);
        let a3 = self.l3.forward(&r2);
        let (normalized, norms) = l2_normalize_rows(&a3)?;
        Ok((
            normalized.clone(),
            ProjCache {
                x: x.clone(),
                a1,
                r1,
                a2,
                r2,
                normalized,
                norms,
            },
        ))
    }

    /// Backward through normalization and the MLP; returns the gradient on
    /// the input features when `want_input` is set.
    pub fn backward(
        &self,
        cache: &ProjCache<F>,
        grad_emb: &Array2<F>,
        prefix: &str,
        mut grads: Option<&mut GradStore<F>>,
        want_input: bool,
    ) -> Option<Array2<F>> {
        let g3 = l2_normalize_rows_backward(&cache.normalized, &cache.norms, grad_emb);
        let g_r2 = self
            .l3
            .backward(&cache.r2, &g3, &format!("{prefix}.l3"), grads.as_deref_mut(), true)
            .expect("input gradient");
        let g_a2 = relu_backward(&cache.a2, &g_r2);
        let g_r1 = self
            .l2
            .backward(&cache.r1, &g_a2, &format!("{prefix}.l2"), grads.as_deref_mut(), true)
            .expect("input gradient");
        let g_a1 = relu_backward(&cache.a1, &g_r1);
        self.l1
            .backward(&cache.x, &g_a1, &format!("{prefix}.l1"), grads, want_input)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<F>) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
        self.l3.visit(&format!("{prefix}.l3"), f);
    }
}

/// One projection head per feature layer for one modality.
pub struct ProjectionBank<F: Real> {
    pub heads: Vec<ProjectionHead<F>>,
}

impl<F: Real> ProjectionBank<F> {
    pub fn new(layer_channels: &[usize], rng: &mut ChaCha8Rng) -> Self {
        ProjectionBank {
            heads: layer_channels
                .iter()
                .map(|&c| ProjectionHead::new(c, rng))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(|h| h.param_count()).sum()
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<F>) {
        for (k, head) in self.heads.iter_mut().enumerate() {
            head.visit(&format!("{prefix}.layer{k}"), f);
        }
    }
}

/// Gather rows of a channel-first feature map `[C, spatial...]` at flat
/// spatial indices, producing `[n, C]` for projection.
pub fn gather_features<F: Real>(features: &ndarray::ArrayD<F>, indices: &[u32]) -> Array2<F> {
    let ch = features.shape()[0];
    let s: usize = features.shape()[1..].iter().product();
    let fv = features.as_slice().expect("contiguous features");
    let mut out = Array2::zeros((indices.len(), ch));
    for (row, &idx) in indices.iter().enumerate() {
        for cidx in 0..ch {
            out[(row, cidx)] = fv[cidx * s + idx as usize];
        }
    }
    out
}

/// Scatter per-row feature gradients back into a channel-first map.
pub fn scatter_feature_grads<F: Real>(
    grad_rows: &Array2<F>,
    indices: &[u32],
    shape: &[usize],
) -> ndarray::ArrayD<F> {
    let ch = shape[0];
    let s: usize = shape[1..].iter().product();
    let mut out = vec![F::zero(); ch * s];
    for (row, &idx) in indices.iter().enumerate() {
        for cidx in 0..ch {
            out[cidx * s + idx as usize] += grad_rows[(row, cidx)];
        }
    }
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), out).expect("shape")
}
