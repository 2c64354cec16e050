//! Autoencoder pretraining.
//!
//! Self-supervised: L1 + local NCC reconstruction on augmented random
//! crops. Supervised: the same reconstruction terms on both modalities plus
//! a weighted contrastive alignment term on pixel-aligned pairs, training
//! autoencoders and projection heads jointly.

use super::Adam;
use crate::contrastive::{
    build_sample_plan, channelize, d12_with_grad, layer_valid_indices, ContrastiveConfig,
    D12Names, D12Nets, D12Options,
};
use crate::error::{Error, Result};
use crate::losses::local_ncc_loss_grad;
use crate::nets::{Autoencoder, AutoencoderSpec, ProjectionBank};
use crate::real::Real;
use crate::rng::substream;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Pretraining configuration. Crops are desk-scale; `flip` and the jitter
/// magnitudes implement the flipping plus brightness/contrast/gamma
/// augmentation (gamma stands in for saturation on single-channel data).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: u64,
    pub lr: f64,
    pub crop: Vec<usize>,
    pub flip: bool,
    /// Additive brightness jitter, uniform in `[-x, x]`.
    pub jitter_brightness: f64,
    /// Contrast scale jitter, uniform in `[1/(1+x), 1+x]` around the mean.
    pub jitter_contrast: f64,
    /// Gamma exponent jitter, uniform in `[1/(1+x), 1+x]`.
    pub jitter_gamma: f64,
    /// Supervised-pretraining weight on the contrastive alignment term.
    pub lambda_sp: f64,
    pub ncc_window: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 1200,
            lr: 1e-3,
            crop: vec![64, 64],
            flip: true,
            jitter_brightness: 0.1,
            jitter_contrast: 0.25,
            jitter_gamma: 0.25,
            lambda_sp: 0.1,
            ncc_window: 7,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, volume_shape: &[usize]) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.crop.len() != volume_shape.len() {
            return Err(Error::Config(format!(
                "crop rank {} does not match volume rank {}",
                self.crop.len(),
                volume_shape.len()
            )));
        }
        for (c, v) in self.crop.iter().zip(volume_shape.iter()) {
            if c > v {
                return Err(Error::Config(format!(
                    "crop {:?} does not fit volume {:?}",
                    self.crop, volume_shape
                )));
            }
            if c % 8 != 0 {
                return Err(Error::Config(format!(
                    "crop extents must be divisible by 8, got {:?}",
                    self.crop
                )));
            }
        }
        for (name, x) in [
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
            ("jitter_gamma", self.jitter_gamma),
        ] {
            if !(0.0..=0.5).contains(&x) {
                return Err(Error::Config(format!("{name} must lie in [0, 0.5], got {x}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainLogRow {
    pub iteration: u64,
    pub loss: f64,
    pub l1: f64,
    pub ncc: f64,
}

pub struct PretrainOutcome {
    pub autoencoder: Autoencoder<f32>,
    pub log: Vec<PretrainLogRow>,
    /// Set when training hit a NaN; parameters are the last finite state.
    pub diverged_at: Option<u64>,
}

/// Deterministic crop + flip + intensity jitter for one iteration.
/// Geometry draws are shared across aligned modalities (same substream),
/// intensity draws are per-modality.
fn augment(
    vol: &ArrayD<f32>,
    crop: &[usize],
    flip: bool,
    jb: f64,
    jc: f64,
    jg: f64,
    geom_rng: &mut rand_chacha::ChaCha8Rng,
    intensity_rng: &mut rand_chacha::ChaCha8Rng,
) -> ArrayD<f32> {
    let shape = vol.shape();
    let d = shape.len();
    let origin: Vec<usize> = (0..d)
        .map(|ax| geom_rng.gen_range(0..=shape[ax] - crop[ax]))
        .collect();
    let flips: Vec<bool> = (0..d).map(|_| flip && geom_rng.gen::<bool>()).collect();
    let n: usize = crop.iter().product();
    let mut out = vec![0f32; n];
    let crop_strides = {
        let mut s = vec![1usize; d];
        for i in (0..d - 1).rev() {
            s[i] = s[i + 1] * crop[i + 1];
        }
        s
    };
    let vol_flat = vol.as_slice().expect("contiguous");
    let vol_strides = {
        let mut s = vec![1usize; d];
        for i in (0..d - 1).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    };
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0usize;
        for ax in 0..d {
            let mut cc = rem / crop_strides[ax];
            rem %= crop_strides[ax];
            if flips[ax] {
                cc = crop[ax] - 1 - cc;
            }
            src += (origin[ax] + cc) * vol_strides[ax];
        }
        *slot = vol_flat[src];
    }
    // intensity jitter
    let brightness = intensity_rng.gen_range(-jb..=jb) as f32;
    let c_hi = 1.0 + jc;
    let contrast = intensity_rng.gen_range(1.0 / c_hi..=c_hi) as f32;
    let g_hi = 1.0 + jg;
    let gamma = intensity_rng.gen_range(1.0 / g_hi..=g_hi) as f32;
    let mean: f32 = out.iter().sum::<f32>() / n as f32;
    for x in out.iter_mut() {
        let v = ((*x - mean) * contrast + mean + brightness).clamp(0.0, 1.0);
        *x = v.powf(gamma);
    }
    ArrayD::from_shape_vec(IxDyn(crop), out).expect("shape")
}

/// L1 reconstruction loss and gradient.
fn l1_loss_grad<F: Real>(recon: &ArrayD<F>, target: &ArrayD<F>) -> (f64, ArrayD<F>) {
    let n = recon.len() as f64;
    let mut loss = 0.0;
    let mut grad = recon.clone();
    for (g, (&r, &t)) in grad.iter_mut().zip(recon.iter().zip(target.iter())) {
        let diff = (r - t).as_f64();
        loss += diff.abs();
        *g = F::from_f64(diff.signum() / n);
    }
    (loss / n, grad)
}

/// Self-supervised pretraining of one modality's autoencoder.
pub fn pretrain_autoencoder(
    volumes: &[ArrayD<f32>],
    cfg: &PretrainConfig,
    modality_tag: u64,
) -> Result<PretrainOutcome> {
    if volumes.is_empty() {
        return Err(Error::InvalidInput("empty pretraining dataset".into()));
    }
    cfg.validate(volumes[0].shape())?;
    let dim = volumes[0].ndim();
    let mut init_rng = substream(cfg.seed, "pretrain/init", &[modality_tag]);
    let mut ae = Autoencoder::<f32>::new(AutoencoderSpec::default(), dim, &mut init_rng)?;
    let mut adam = Adam::new(cfg.lr, 0.9, 0.999);
    let mut log = Vec::with_capacity(cfg.iterations as usize);
    let mut last_good: Option<Vec<f32>> = None;
    for iter in 0..cfg.iterations {
        let mut pick = substream(cfg.seed, "pretrain/pick", &[modality_tag, iter]);
        let vol = &volumes[pick.gen_range(0..volumes.len())];
        let mut geom = substream(cfg.seed, "pretrain/aug-geom", &[iter]);
        let mut intens = substream(cfg.seed, "pretrain/aug-int", &[modality_tag, iter]);
        let crop = augment(
            vol,
            &cfg.crop,
            cfg.flip,
            cfg.jitter_brightness,
            cfg.jitter_contrast,
            cfg.jitter_gamma,
            &mut geom,
            &mut intens,
        );
        let target = channelize(&crop);
        let fwd = ae.forward(&target)?;
        let (l1, g_l1) = l1_loss_grad(&fwd.reconstruction, &target);
        let (ncc, g_ncc) = local_ncc_loss_grad(&target, &fwd.reconstruction, cfg.ncc_window)?;
        let total = l1 + ncc as f64;
        if !total.is_finite() {
            if let Some(snapshot) = last_good {
                restore_params(&mut ae, &snapshot);
            }
            return Ok(PretrainOutcome {
                autoencoder: ae,
                log,
                diverged_at: Some(iter),
            });
        }
        let grad_recon = &g_l1 + &g_ncc;
        let mut grads = crate::nets::ops::GradStore::new();
        let no_features: Vec<Option<ArrayD<f32>>> = vec![None; 6];
        ae.backward(
            &fwd.cache,
            Some(&grad_recon),
            &no_features,
            "ae",
            Some(&mut grads),
            false,
        );
        last_good = Some(snapshot_params(&mut ae));
        adam.step(&grads, 10.0, |f| ae.visit("ae", f));
        log.push(PretrainLogRow {
            iteration: iter,
            loss: total,
            l1,
            ncc: ncc as f64,
        });
    }
    Ok(PretrainOutcome {
        autoencoder: ae,
        log,
        diverged_at: None,
    })
}

/// Joint supervised pretraining of both autoencoders and projection heads
/// on pixel-aligned cross-modality pairs.
#[allow(clippy::type_complexity)]
pub fn supervised_pretrain(
    pairs: &[(ArrayD<f32>, ArrayD<f32>)],
    cfg: &PretrainConfig,
    contrastive_cfg: &ContrastiveConfig,
) -> Result<(
    Autoencoder<f32>,
    Autoencoder<f32>,
    ProjectionBank<f32>,
    ProjectionBank<f32>,
    Vec<PretrainLogRow>,
)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty pretraining dataset".into()));
    }
    cfg.validate(pairs[0].0.shape())?;
    contrastive_cfg.validate()?;
    let dim = pairs[0].0.ndim();
    let spec = AutoencoderSpec::default();
    let mut init_a = substream(cfg.seed, "pretrain/init", &[0]);
    let mut init_b = substream(cfg.seed, "pretrain/init", &[1]);
    let mut ae_a = Autoencoder::<f32>::new(spec.clone(), dim, &mut init_a)?;
    let mut ae_b = Autoencoder::<f32>::new(spec.clone(), dim, &mut init_b)?;
    let mut head_rng_a = substream(cfg.seed, "pretrain/heads", &[0]);
    let mut head_rng_b = substream(cfg.seed, "pretrain/heads", &[1]);
    let mut bank_a = ProjectionBank::<f32>::new(&spec.layer_channels(), &mut head_rng_a);
    let mut bank_b = ProjectionBank::<f32>::new(&spec.layer_channels(), &mut head_rng_b);
    let mut adam = Adam::new(cfg.lr, 0.9, 0.999);
    let mut log = Vec::with_capacity(cfg.iterations as usize);

    // layer shapes at crop resolution, for sampling plans
    let scales = spec.layer_scales();
    let layer_shapes: Vec<Vec<usize>> = (0..6)
        .map(|k| cfg.crop.iter().map(|&n| n / scales[k]).collect())
        .collect();

    for iter in 0..cfg.iterations {
        let mut pick = substream(cfg.seed, "pretrain/pick", &[0, iter]);
        let (va, vb) = &pairs[pick.gen_range(0..pairs.len())];
        let mut geom = substream(cfg.seed, "pretrain/aug-geom", &[iter]);
        let mut geom_b = geom.clone();
        let mut int_a = substream(cfg.seed, "pretrain/aug-int", &[0, iter]);
        let mut int_b = substream(cfg.seed, "pretrain/aug-int", &[1, iter]);
        let crop_a = augment(
            va,
            &cfg.crop,
            cfg.flip,
            cfg.jitter_brightness,
            cfg.jitter_contrast,
            cfg.jitter_gamma,
            &mut geom,
            &mut int_a,
        );
        let crop_b = augment(
            vb,
            &cfg.crop,
            cfg.flip,
            cfg.jitter_brightness,
            cfg.jitter_contrast,
            cfg.jitter_gamma,
            &mut geom_b,
            &mut int_b,
        );
        let ta = channelize(&crop_a);
        let tb = channelize(&crop_b);

        let mut grads = crate::nets::ops::GradStore::new();
        let mut l1_sum = 0.0;
        let mut ncc_sum = 0.0;
        // reconstruction terms on both modalities
        let fwd_a = ae_a.forward(&ta)?;
        let fwd_b = ae_b.forward(&tb)?;
        for (ae, fwd, target, prefix) in [
            (&ae_a, &fwd_a, &ta, "ae_a"),
            (&ae_b, &fwd_b, &tb, "ae_b"),
        ] {
            let (l1, g_l1) = l1_loss_grad(&fwd.reconstruction, target);
            let (ncc, g_ncc) = local_ncc_loss_grad(target, &fwd.reconstruction, cfg.ncc_window)?;
            l1_sum += l1;
            ncc_sum += ncc as f64;
            let grad_recon = &g_l1 + &g_ncc;
            let no_features: Vec<Option<ArrayD<f32>>> = vec![None; 6];
            ae.backward(
                &fwd.cache,
                Some(&grad_recon),
                &no_features,
                prefix,
                Some(&mut grads),
                false,
            );
        }
        // contrastive alignment term on the aligned crops
        let mut d12_val = 0.0;
        if cfg.lambda_sp > 0.0 {
            let valid = layer_valid_indices(None, &layer_shapes)?;
            let mut plan_rng = substream(cfg.seed, "pretrain/sample", &[iter]);
            let plan = build_sample_plan(&valid, contrastive_cfg, &mut plan_rng);
            let nets = D12Nets {
                ae_fixed: &ae_a,
                ae_moved: &ae_b,
                bank_fixed: &bank_a,
                bank_moved: &bank_b,
                names: D12Names {
                    ae_fixed: "ae_a".into(),
                    ae_moved: "ae_b".into(),
                    bank_fixed: "head_a".into(),
                    bank_moved: "head_b".into(),
                },
            };
            let out = d12_with_grad(
                &crop_a,
                &crop_b,
                &nets,
                contrastive_cfg,
                &plan,
                None,
                None,
                D12Options {
                    train_extractors: true,
                    want_moved_input_grad: false,
                },
            )?;
            d12_val = out.loss as f64;
            let mut d12_grads = out.grads;
            d12_grads.scale(cfg.lambda_sp as f32);
            grads.merge(d12_grads);
        }
        let total = l1_sum + ncc_sum + cfg.lambda_sp * d12_val;
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "supervised pretraining diverged at iteration {iter}"
            )));
        }
        adam.step(&grads, 10.0, |f| {
            ae_a.visit("ae_a", f);
            ae_b.visit("ae_b", f);
            bank_a.visit("head_a", f);
            bank_b.visit("head_b", f);
        });
        log.push(PretrainLogRow {
            iteration: iter,
            loss: total,
            l1: l1_sum,
            ncc: ncc_sum,
        });
    }
    Ok((ae_a, ae_b, bank_a, bank_b, log))
}

fn snapshot_params(ae: &mut Autoencoder<f32>) -> Vec<f32> {
    let mut out = Vec::new();
    ae.visit("ae", &mut |_, p| out.extend_from_slice(p));
    out
}

fn restore_params(ae: &mut Autoencoder<f32>, snapshot: &[f32]) {
    let mut offset = 0usize;
    ae.visit("ae", &mut |_, p| {
        p.copy_from_slice(&snapshot[offset..offset + p.len()]);
        offset += p.len();
    });
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_subject;

    #[test]
    fn empty_dataset_rejected() {
        let cfg = PretrainConfig::default();
        assert!(pretrain_autoencoder(&[], &cfg, 0).is_err());
    }

    #[test]
    fn short_pretraining_reduces_loss() {
        let subjects: Vec<_> = (0..4)
            .map(|s| generate_subject(s, &[64, 64], 3).unwrap())
            .collect();
        let vols: Vec<ArrayD<f32>> = subjects
            .iter()
            .map(|s| s.modality_a.data.clone())
            .collect();
        let cfg = PretrainConfig {
            iterations: 60,
            crop: vec![32, 32],
            seed: 5,
            ..PretrainConfig::default()
        };
        let out = pretrain_autoencoder(&vols, &cfg, 0).unwrap();
        assert!(out.diverged_at.is_none());
        let first: f64 = out.log[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        let last: f64 = out.log[out.log.len() - 5..]
            .iter()
            .map(|r| r.loss)
            .sum::<f64>()
            / 5.0;
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn flip_invariance_of_reconstruction_loss() {
        // flipping a crop and its reconstruction together leaves the
        // reconstruction loss unchanged
        let subject = generate_subject(3, &[64, 64], 3).unwrap();
        let crop = subject
            .modality_a
            .data
            .slice(ndarray::s![0..32, 0..32])
            .to_owned()
            .into_dyn();
        let target = channelize(&crop);
        let mut rng = substream(1, "flip-test", &[]);
        let ae = Autoencoder::<f32>::new(AutoencoderSpec::default(), 2, &mut rng).unwrap();
        let recon = ae.forward(&target).unwrap().reconstruction;
        let flip = |x: &ArrayD<f32>| -> ArrayD<f32> {
            let mut v = x.clone();
            v.invert_axis(ndarray::Axis(1));
            v.invert_axis(ndarray::Axis(2));
            v.as_standard_layout().to_owned()
        };
        let (l1_orig, _) = l1_loss_grad(&recon, &target);
        let (l1_flip, _) = l1_loss_grad(&flip(&recon), &flip(&target));
        assert!((l1_orig - l1_flip).abs() < 1e-7);
        let ncc_orig = crate::losses::local_ncc_loss(&target, &recon, 7).unwrap();
        let ncc_flip = crate::losses::local_ncc_loss(&flip(&target), &flip(&recon), 7).unwrap();
        assert!(
            (ncc_orig - ncc_flip).abs() < 1e-5,
            "{ncc_orig} vs {ncc_flip}"
        );
    }
}
