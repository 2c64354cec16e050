//! Mutual information from a soft (Parzen) joint histogram.
//!
//! Each sample deposits a per-sample-normalized Gaussian profile over
//! nearby bin centers, so the joint histogram is differentiable in both
//! images. MI is reported in nats; the loss is `-MI`.

use super::check_same_grid;
use crate::error::{Error, Result};
use crate::real::{c, Real};
use ndarray::{ArrayD, IxDyn};

/// Per-sample soft bin assignment: window of bin indices and normalized
/// weights plus their derivatives with respect to the sample value.
struct SoftBins {
    start: usize,
    weights: Vec<f64>,
    dweights: Vec<f64>,
}

struct Binning {
    bins: usize,
    sigma: f64,
    half_window: usize,
}

impl Binning {
    fn new(bins: usize, sigma_bins: f64) -> Self {
        Binning {
            bins,
            sigma: sigma_bins / bins as f64,
            half_window: (4.0 * sigma_bins).ceil().max(1.0) as usize,
        }
    }

    fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.bins as f64
    }

    fn assign(&self, x: f64) -> SoftBins {
        let nearest = ((x * self.bins as f64 - 0.5).round() as isize)
            .clamp(0, self.bins as isize - 1) as usize;
        let start = nearest.saturating_sub(self.half_window);
        let end = (nearest + self.half_window).min(self.bins - 1);
        let m = end - start + 1;
        let mut w = Vec::with_capacity(m);
        let mut dw = Vec::with_capacity(m);
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let mut sum = 0.0;
        let mut dsum = 0.0;
        for k in start..=end {
            let z = x - self.center(k);
            let e = (-0.5 * z * z * inv_s2).exp();
            // d/dx exp(-(x-c)^2 / 2s^2) = -e (x-c)/s^2
            let de = -e * z * inv_s2;
            w.push(e);
            dw.push(de);
            sum += e;
            dsum += de;
        }
        // normalize: p = w/S, p' = (w' - p S')/S
        for i in 0..m {
            let p = w[i] / sum;
            dw[i] = (dw[i] - p * dsum) / sum;
            w[i] = p;
        }
        SoftBins {
            start,
            weights: w,
            dweights: dw,
        }
    }
}

/// Negative soft mutual information between two `[0, 1]` images.
pub fn mutual_information<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    bins: usize,
    sigma_bins: f64,
) -> Result<F> {
    let (loss, _) = mi_impl(a, b, bins, sigma_bins, false)?;
    Ok(loss)
}

/// Negative soft MI plus gradient with respect to `b`.
pub fn mutual_information_grad<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    bins: usize,
    sigma_bins: f64,
) -> Result<(F, ArrayD<F>)> {
    let (loss, grad) = mi_impl(a, b, bins, sigma_bins, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn mi_impl<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    bins: usize,
    sigma_bins: f64,
    want_grad: bool,
) -> Result<(F, Option<ArrayD<F>>)> {
    check_same_grid(a, b)?;
    if bins < 2 {
        return Err(Error::InvalidInput(format!("need >= 2 bins, got {bins}")));
    }
    let av = a.as_slice().expect("contiguous");
    let bv = b.as_slice().expect("contiguous");
    let (value, grad) = mi_on_samples(av, bv, bins, sigma_bins, want_grad);
    let grad = grad.map(|g| {
        ArrayD::from_shape_vec(IxDyn(b.shape()), g.into_iter().map(F::from_f64).collect())
            .expect("shape")
    });
    Ok((c::<F>(value), grad))
}

/// Core estimator on flat sample slices; returns `(-MI, grad wrt b)`.
/// Accumulation is in f64 for precision regardless of `F`.
fn mi_on_samples<F: Real>(
    a: &[F],
    b: &[F],
    bins: usize,
    sigma_bins: f64,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let n = a.len();
    let binning = Binning::new(bins, sigma_bins);
    let mut joint = vec![0f64; bins * bins];
    let mut assign_a = Vec::with_capacity(n);
    let mut assign_b = Vec::with_capacity(n);
    for i in 0..n {
        let pa = binning.assign(a[i].as_f64());
        let pb = binning.assign(b[i].as_f64());
        for (ka, &wa) in pa.weights.iter().enumerate() {
            let row = (pa.start + ka) * bins;
            for (kb, &wb) in pb.weights.iter().enumerate() {
                joint[row + pb.start + kb] += wa * wb;
            }
        }
        assign_a.push(pa);
        assign_b.push(pb);
    }
    let inv_n = 1.0 / n as f64;
    for p in joint.iter_mut() {
        *p *= inv_n;
    }
    let mut pa_marg = vec![0f64; bins];
    let mut pb_marg = vec![0f64; bins];
    for k in 0..bins {
        for l in 0..bins {
            pa_marg[k] += joint[k * bins + l];
            pb_marg[l] += joint[k * bins + l];
        }
    }
    let mut mi = 0.0;
    for k in 0..bins {
        for l in 0..bins {
            let p = joint[k * bins + l];
            if p > 0.0 {
                mi += p * (p / (pa_marg[k] * pb_marg[l])).ln();
            }
        }
    }
    if !want_grad {
        return (-mi, None);
    }
    // dMI/dP_kl = ln(P_kl) - ln(Pa_k) - ln(Pb_l) - 1; constants cancel since
    // per-sample profiles carry unit mass, but are kept for exactness.
    let mut dmi_dp = vec![0f64; bins * bins];
    for k in 0..bins {
        for l in 0..bins {
            let p = joint[k * bins + l];
            dmi_dp[k * bins + l] = if p > 0.0 {
                p.ln() - pa_marg[k].ln() - pb_marg[l].ln() - 1.0
            } else {
                0.0
            };
        }
    }
    let mut grad = vec![0f64; n];
    for i in 0..n {
        let pa = &assign_a[i];
        let pb = &assign_b[i];
        let mut acc = 0.0;
        for (ka, &wa) in pa.weights.iter().enumerate() {
            let row = (pa.start + ka) * bins;
            for (kb, &dwb) in pb.dweights.iter().enumerate() {
                acc += wa * dwb * dmi_dp[row + pb.start + kb];
            }
        }
        // loss = -MI
        grad[i] = -acc * inv_n;
    }
    (-mi, Some(grad))
}

/// Negative mean soft MI over non-overlapping patches of edge `patch`.
pub fn local_mutual_information<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    bins: usize,
    sigma_bins: f64,
    patch: usize,
) -> Result<F> {
    let (loss, _) = lmi_impl(a, b, bins, sigma_bins, patch, false)?;
    Ok(loss)
}

pub fn local_mutual_information_grad<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    bins: usize,
    sigma_bins: f64,
    patch: usize,
) -> Result<(F, ArrayD<F>)> {
    let (loss, grad) = lmi_impl(a, b, bins, sigma_bins, patch, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn lmi_impl<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    bins: usize,
    sigma_bins: f64,
    patch: usize,
    want_grad: bool,
) -> Result<(F, Option<ArrayD<F>>)> {
    check_same_grid(a, b)?;
    if patch % 2 == 0 {
        return Err(Error::InvalidInput(format!("patch must be odd, got {patch}")));
    }
    let shape = a.shape().to_vec();
    if shape.iter().any(|&n| n < patch) {
        return Err(Error::InvalidInput(format!(
            "patch {patch} larger than grid {shape:?}"
        )));
    }
    let d = shape.len();
    let tiles_per_axis: Vec<usize> = shape.iter().map(|&n| n / patch).collect();
    let n_tiles: usize = tiles_per_axis.iter().product();
    let strides = super::row_major_strides(&shape);
    let av = a.as_slice().expect("contiguous");
    let bv = b.as_slice().expect("contiguous");
    let patch_len = patch.pow(d as u32);

    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0f64; av.len()]);
    let mut pa_buf = vec![F::zero(); patch_len];
    let mut pb_buf = vec![F::zero(); patch_len];
    let mut flat_idx = vec![0usize; patch_len];
    for tile in 0..n_tiles {
        // tile origin in voxel coordinates
        let mut rem = tile;
        let mut origin = vec![0usize; d];
        for ax in 0..d {
            let t = tiles_per_axis[ax..].iter().skip(1).product::<usize>();
            origin[ax] = (rem / t) * patch;
            rem %= t;
        }
        for (pi, slot) in flat_idx.iter_mut().enumerate() {
            let mut rem = pi;
            let mut flat = 0usize;
            for ax in 0..d {
                let t = patch_len / patch.pow(ax as u32 + 1);
                flat += (origin[ax] + rem / t) * strides[ax];
                rem %= t;
            }
            *slot = flat;
        }
        for (k, &fi) in flat_idx.iter().enumerate() {
            pa_buf[k] = av[fi];
            pb_buf[k] = bv[fi];
        }
        let (v, g) = mi_on_samples(&pa_buf, &pb_buf, bins, sigma_bins, want_grad);
        total += v;
        if let (Some(grad), Some(g)) = (grad.as_mut(), g) {
            for (k, &fi) in flat_idx.iter().enumerate() {
                grad[fi] += g[k] / n_tiles as f64;
            }
        }
    }
    let loss = total / n_tiles as f64;
    let grad = grad.map(|g| {
        ArrayD::from_shape_vec(IxDyn(&shape), g.into_iter().map(F::from_f64).collect())
            .expect("shape")
    });
    Ok((c::<F>(loss), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn noise_image(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = substream(seed, "mi-test", &[]);
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn shuffled(img: &ArrayD<f64>, seed: u64) -> ArrayD<f64> {
        use rand::seq::SliceRandom;
        let mut vals: Vec<f64> = img.iter().copied().collect();
        vals.shuffle(&mut substream(seed, "shuffle", &[]));
        ArrayD::from_shape_vec(IxDyn(img.shape()), vals).unwrap()
    }

    #[test]
    fn identity_dominates_shuffle() {
        let a = noise_image(1, &[48, 48]);
        let mi_aa = -mutual_information(&a, &a, 48, 0.25).unwrap();
        let mi_sh = -mutual_information(&a, &shuffled(&a, 2), 48, 0.25).unwrap();
        assert!(mi_aa >= mi_sh, "MI(a,a)={mi_aa} < MI(a,shuffle)={mi_sh}");
    }

    #[test]
    fn independent_noise_matches_hard_binned_oracle() {
        let a = noise_image(3, &[96, 96]);
        let b = noise_image(4, &[96, 96]);
        let soft = -mutual_information(&a, &b, 48, 0.25).unwrap();
        // hard-binned plug-in MI on the same samples
        let bins = 48;
        let mut joint = vec![0f64; bins * bins];
        for (&x, &y) in a.iter().zip(b.iter()) {
            let k = ((x * bins as f64) as usize).min(bins - 1);
            let l = ((y * bins as f64) as usize).min(bins - 1);
            joint[k * bins + l] += 1.0;
        }
        let n = a.len() as f64;
        let mut pa = vec![0f64; bins];
        let mut pb = vec![0f64; bins];
        for k in 0..bins {
            for l in 0..bins {
                joint[k * bins + l] /= n;
                pa[k] += joint[k * bins + l];
                pb[l] += joint[k * bins + l];
            }
        }
        let mut hard = 0.0;
        for k in 0..bins {
            for l in 0..bins {
                let p = joint[k * bins + l];
                if p > 0.0 {
                    hard += p * (p / (pa[k] * pb[l])).ln();
                }
            }
        }
        assert!(
            (soft - hard).abs() < 0.05,
            "soft {soft} vs hard oracle {hard}"
        );
        assert!(soft < 0.2, "independent noise MI too high: {soft}");
    }

    #[test]
    fn quantized_ramp_identity_matches_entropy() {
        // values at the 48 bin centers, uniformly represented
        let bins = 48usize;
        let n = 96 * 96;
        let vals: Vec<f64> = (0..n).map(|i| ((i % bins) as f64 + 0.5) / bins as f64).collect();
        let a = ArrayD::from_shape_vec(IxDyn(&[96, 96]), vals).unwrap();
        let soft = -mutual_information(&a, &a, bins, 0.25).unwrap();
        let entropy = (bins as f64).ln();
        let rel = (soft - entropy).abs() / entropy;
        assert!(rel < 0.02, "soft MI {soft} vs entropy {entropy}, rel {rel}");
    }

    #[test]
    fn constant_image_yields_zero_mi() {
        let a = noise_image(5, &[32, 32]);
        let b = ArrayD::from_shape_vec(IxDyn(&[32, 32]), vec![0.5f64; 1024]).unwrap();
        let loss = mutual_information(&a, &b, 48, 0.25).unwrap();
        assert!(loss.abs() < 1e-9, "constant image MI {loss}");
    }

    #[test]
    fn symmetry() {
        let a = noise_image(6, &[32, 32]);
        let b = noise_image(7, &[32, 32]);
        let ab = mutual_information(&a, &b, 32, 0.25).unwrap();
        let ba = mutual_information(&b, &a, 32, 0.25).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn local_mi_single_patch_collapses_to_global() {
        let a = noise_image(8, &[9, 9]);
        let b = noise_image(9, &[9, 9]);
        let global = mutual_information(&a, &b, 16, 0.25).unwrap();
        let local = local_mutual_information(&a, &b, 16, 0.25, 9).unwrap();
        assert!((global - local).abs() < 1e-6);
    }

    #[test]
    fn local_mi_identity_dominates_shuffle() {
        let a = noise_image(10, &[36, 36]);
        let sh = shuffled(&a, 11);
        let aligned = local_mutual_information(&a, &a, 16, 0.25, 9).unwrap();
        let mixed = local_mutual_information(&a, &sh, 16, 0.25, 9).unwrap();
        assert!(aligned <= mixed);
    }

    #[test]
    fn local_mi_partial_alignment_sits_between_extremes() {
        // two-tile image: left tile aligned, right tile shuffled
        let a = noise_image(12, &[9, 18]);
        let sh = shuffled(&a, 13);
        let mut half = a.clone();
        for i in 0..9 {
            for j in 9..18 {
                half[[i, j]] = sh[[i, j]];
            }
        }
        let both_aligned = local_mutual_information(&a, &a, 16, 0.25, 9).unwrap();
        let both_shuffled = local_mutual_information(&a, &sh, 16, 0.25, 9).unwrap();
        let mixed = local_mutual_information(&a, &half, 16, 0.25, 9).unwrap();
        assert!(
            both_aligned < mixed && mixed < both_shuffled,
            "{both_aligned} < {mixed} < {both_shuffled} violated"
        );
    }

    #[test]
    fn local_mi_rejects_oversized_patch() {
        let a = noise_image(14, &[8, 8]);
        assert!(local_mutual_information(&a, &a, 16, 0.25, 9).is_err());
    }
}
