//! Modality-specific convolutional autoencoder.
//!
//! Seven Conv-IN-LeakyReLU(0.2) blocks with three stride-2 downsampling and
//! three upsampling stages (filters 32-64-128-64-32-32-32) plus a final
//! 1-channel reconstruction convolution. The post-convolution
//! (pre-normalization) activations of the first six blocks form the
//! multi-scale feature stack sampled by the contrastive loss.

use super::ops::{
    leaky_relu, leaky_relu_backward, upsample2, upsample2_backward, Conv, ConvCache, GradStore,
    InstanceNorm, NormCache, ParamFn,
};
use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutoencoderSpec {
    /// Per-block output channels; length 7.
    pub block_filters: Vec<usize>,
    pub down_blocks: usize,
    pub up_blocks: usize,
    /// LeakyReLU negative slope numerator in thousandths (0.2 default).
    pub leaky_slope_milli: u32,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        AutoencoderSpec {
            block_filters: vec![32, 64, 128, 64, 32, 32, 32],
            down_blocks: 3,
            up_blocks: 3,
            leaky_slope_milli: 200,
        }
    }
}

impl AutoencoderSpec {
    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope_milli as f64 / 1000.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_filters.len() != 7 {
            return Err(Error::Config(format!(
                "block_filters must have 7 entries, got {}",
                self.block_filters.len()
            )));
        }
        if self.down_blocks != 3 || self.up_blocks != 3 {
            return Err(Error::Config(
                "resolution schedule requires 3 down and 3 up blocks".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count for dimensionality `d`:
    /// each block contributes `c_out (c_in k^d + 1)` conv parameters plus
    /// `2 c_out` norm parameters, and the final reconstruction conv adds
    /// `c_last k^d + 1`.
    pub fn param_count(&self, d: usize) -> usize {
        let k = 3usize.pow(d as u32);
        let mut c_in = 1;
        let mut total = 0;
        for &c_out in &self.block_filters {
            total += c_out * (c_in * k + 1) + 2 * c_out;
            c_in = c_out;
        }
        total + (c_in * k + 1)
    }

    /// Feature-layer spatial scale factors relative to the input
    /// (downsampling by 2 per encoder block, then recovery).
    pub fn layer_scales(&self) -> [usize; 6] {
        [2, 4, 8, 4, 2, 1]
    }

    pub fn layer_channels(&self) -> [usize; 6] {
        [
            self.block_filters[0],
            self.block_filters[1],
            self.block_filters[2],
            self.block_filters[3],
            self.block_filters[4],
            self.block_filters[5],
        ]
    }
}

/// Multi-scale feature maps `[C_k, spatial_k]`, layers ordered by block.
#[derive(Debug, Clone)]
pub struct FeatureStack<F: Real> {
    pub layers: Vec<ArrayD<F>>,
}

impl<F: Real> FeatureStack<F> {
    pub fn layer_spatial(&self, k: usize) -> &[usize] {
        &self.layers[k].shape()[1..]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

struct Block<F: Real> {
    conv: Conv<F>,
    norm: InstanceNorm<F>,
    upsample: bool,
}

pub struct Autoencoder<F: Real> {
    blocks: Vec<Block<F>>,
    final_conv: Conv<F>,
    pub spec: AutoencoderSpec,
    dim: usize,
}

pub struct AeBlockCache<F: Real> {
    conv_cache: ConvCache<F>,
    conv_out: ArrayD<F>,
    norm_cache: NormCache<F>,
    norm_out: ArrayD<F>,
    /// input shape of the upsample stage, when present
    up_in_shape: Option<Vec<usize>>,
}

pub struct AeCache<F: Real> {
    blocks: Vec<AeBlockCache<F>>,
    final_cache: ConvCache<F>,
}

pub struct AeForward<F: Real> {
    pub reconstruction: ArrayD<F>,
    pub features: FeatureStack<F>,
    pub cache: AeCache<F>,
}

impl<F: Real> Autoencoder<F> {
    pub fn new(spec: AutoencoderSpec, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidInput(format!("dim must be 2 or 3, got {dim}")));
        }
        let mut blocks = Vec::with_capacity(7);
        let mut c_in = 1;
        for (k, &c_out) in spec.block_filters.iter().enumerate() {
            let stride = if k < spec.down_blocks { 2 } else { 1 };
            let upsample = (3..6).contains(&k);
            blocks.push(Block {
                conv: Conv::new(c_in, c_out, 3, stride, dim, rng),
                norm: InstanceNorm::new(c_out),
                upsample,
            });
            c_in = c_out;
        }
        let final_conv = Conv::new(c_in, 1, 3, 1, dim, rng);
        Ok(Autoencoder {
            blocks,
            final_conv,
            spec,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.conv.param_count() + b.norm.param_count())
            .sum::<usize>()
            + self.final_conv.param_count()
    }

    fn check_input(&self, x: &ArrayD<F>) -> Result<()> {
        if x.ndim() != self.dim + 1 || x.shape()[0] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected [1, spatial...] with {} spatial dims, got {:?}",
                self.dim,
                x.shape()
            )));
        }
        let div = 1usize << self.spec.down_blocks;
        for &n in &x.shape()[1..] {
            if n % div != 0 {
                let pad = div - n % div;
                return Err(Error::InvalidInput(format!(
                    "spatial extent {n} not divisible by {div}; pad by {pad} voxels"
                )));
            }
        }
        Ok(())
    }

    /// Forward pass: reconstruction plus the 6-layer feature stack.
    pub fn forward(&self, x: &ArrayD<F>) -> Result<AeForward<F>> {
        self.check_input(x)?;
        let slope = self.spec.leaky_slope();
        let mut act = x.clone();
        let mut block_caches = Vec::with_capacity(7);
        let mut features = Vec::with_capacity(6);
        for (k, block) in self.blocks.iter().enumerate() {
            let up_in_shape = block.upsample.then(|| act.shape().to_vec());
            if block.upsample {
                act = upsample2(&act);
            }
            let (conv_out, conv_cache) = block.conv.forward(&act);
            let (norm_out, norm_cache) = block.norm.forward(&conv_out);
            act = leaky_relu(&norm_out, slope);
            if k < 6 {
                features.push(conv_out.clone());
            }
            block_caches.push(AeBlockCache {
                conv_cache,
                conv_out,
                norm_cache,
                norm_out,
                up_in_shape,
            });
        }
        let (recon, final_cache) = self.final_conv.forward(&act);
        Ok(AeForward {
            reconstruction: recon,
            features: FeatureStack { layers: features },
            cache: AeCache {
                blocks: block_caches,
                final_cache,
            },
        })
    }

    /// Backward pass. `grad_recon` enters at the reconstruction output;
    /// `grad_features[k]` enters at block `k`'s post-convolution tap.
    /// Parameter gradients are accumulated under `prefix` only when `grads`
    /// is supplied (frozen extractors never touch parameter gradients), and
    /// the input-image gradient is returned only when `want_input` is set.
    pub fn backward(
        &self,
        cache: &AeCache<F>,
        grad_recon: Option<&ArrayD<F>>,
        grad_features: &[Option<ArrayD<F>>],
        prefix: &str,
        mut grads: Option<&mut GradStore<F>>,
        want_input: bool,
    ) -> Option<ArrayD<F>> {
        let slope = self.spec.leaky_slope();
        let mut grad_act: Option<ArrayD<F>> = grad_recon.map(|g| {
            self.final_conv
                .backward(
                    &cache.final_cache,
                    g,
                    &format!("{prefix}.recon"),
                    grads.as_deref_mut(),
                    true,
                )
                .expect("input gradient requested")
        });
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[k];
            // through the activation and normalization
            let mut grad_conv_out = match grad_act.take() {
                Some(g) => {
                    let g = leaky_relu_backward(&bc.norm_out, &g, slope);
                    block.norm.backward(
                        &bc.norm_cache,
                        &g,
                        &format!("{prefix}.block{k}.norm"),
                        grads.as_deref_mut(),
                    )
                }
                None => ArrayD::zeros(IxDyn(bc.conv_out.shape())),
            };
            if let Some(Some(gf)) = grad_features.get(k) {
                grad_conv_out = &grad_conv_out + gf;
            }
            let need_below = want_input || k > 0 || grads.is_some();
            let g_in = block.conv.backward(
                &bc.conv_cache,
                &grad_conv_out,
                &format!("{prefix}.block{k}.conv"),
                grads.as_deref_mut(),
                need_below && (k > 0 || want_input),
            );
            grad_act = match (g_in, &bc.up_in_shape) {
                (Some(g), Some(shape)) => Some(upsample2_backward(&g, shape)),
                (g, _) => g,
            };
        }
        grad_act
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<F>) {
        for (k, block) in self.blocks.iter_mut().enumerate() {
            block.conv.visit(&format!("{prefix}.block{k}.conv"), f);
            block.norm.visit(&format!("{prefix}.block{k}.norm"), f);
        }
        self.final_conv.visit(&format!("{prefix}.recon"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn feature_resolutions_match_schedule() {
        let mut rng = substream(1, "ae-test", &[]);
        let ae = Autoencoder::<f32>::new(AutoencoderSpec::default(), 2, &mut rng).unwrap();
        let x = ArrayD::zeros(IxDyn(&[1, 96, 96]));
        let out = ae.forward(&x).unwrap();
        assert_eq!(out.reconstruction.shape(), &[1, 96, 96]);
        let expect = [
            (vec![32usize, 48, 48]),
            (vec![64, 24, 24]),
            (vec![128, 12, 12]),
            (vec![64, 24, 24]),
            (vec![32, 48, 48]),
            (vec![32, 96, 96]),
        ];
        assert_eq!(out.features.n_layers(), 6);
        for (k, shape) in expect.iter().enumerate() {
            assert_eq!(out.features.layers[k].shape(), shape.as_slice(), "layer {k}");
        }
    }

    #[test]
    fn zero_input_is_finite() {
        let mut rng = substream(2, "ae-test", &[]);
        let ae = Autoencoder::<f32>::new(AutoencoderSpec::default(), 2, &mut rng).unwrap();
        let x = ArrayD::zeros(IxDyn(&[1, 32, 32]));
        let out = ae.forward(&x).unwrap();
        assert!(out.reconstruction.iter().all(|v| v.is_finite()));
        for layer in &out.features.layers {
            assert!(layer.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn non_divisible_shape_reports_padding() {
        let mut rng = substream(3, "ae-test", &[]);
        let ae = Autoencoder::<f32>::new(AutoencoderSpec::default(), 2, &mut rng).unwrap();
        let x = ArrayD::zeros(IxDyn(&[1, 30, 32]));
        let msg = match ae.forward(&x) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected padding error"),
        };
        assert!(msg.contains("pad"), "diagnostic should name padding: {msg}");
    }

    #[test]
    fn param_count_matches_closed_form() {
        let mut rng = substream(4, "ae-test", &[]);
        let spec = AutoencoderSpec::default();
        for d in [2usize, 3] {
            let ae = Autoencoder::<f32>::new(spec.clone(), d, &mut rng).unwrap();
            assert_eq!(ae.param_count(), spec.param_count(d), "dim {d}");
            let mut walked = 0usize;
            let mut ae = ae;
            ae.visit("ae", &mut |_, p| walked += p.len());
            assert_eq!(walked, spec.param_count(d));
        }
    }

    #[test]
    fn backward_to_input_matches_fd() {
        let mut rng = substream(5, "ae-test", &[]);
        let ae = Autoencoder::<f64>::new(AutoencoderSpec::default(), 2, &mut rng).unwrap();
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 16, 16]), |_| {
            rand::Rng::gen_range(&mut rng, 0.0..1.0)
        });
        let out = ae.forward(&x).unwrap();
        // objective: weighted sum of layer-1 features plus reconstruction
        let w_feat = ArrayD::from_shape_fn(IxDyn(out.features.layers[1].shape()), |ix| {
            ((ix[0] + ix[1] + ix[2]) % 3) as f64 - 1.0
        });
        let w_rec = ArrayD::from_shape_fn(IxDyn(&[1, 16, 16]), |ix| {
            ((ix[1] * 7 + ix[2]) % 5) as f64 * 0.2 - 0.3
        });
        let mut grad_features: Vec<Option<ArrayD<f64>>> = vec![None; 6];
        grad_features[1] = Some(w_feat.clone());
        let gx = ae
            .backward(&out.cache, Some(&w_rec), &grad_features, "ae", None, true)
            .unwrap();
        let f = |xx: &ArrayD<f64>| {
            let o = ae.forward(xx).unwrap();
            (&o.reconstruction * &w_rec).sum() + (&o.features.layers[1] * &w_feat).sum()
        };
        let h = 1e-6;
        for idx in [0usize, 33, 128, 255] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4, "idx {idx}: fd {fd} vs {an}");
        }
    }
}
