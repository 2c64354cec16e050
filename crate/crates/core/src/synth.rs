//! Synthetic multi-modality dataset generator.
//!
//! Subjects share a canonical anatomy (an elliptical body containing a ring
//! of structures) that is deformed per subject by a smooth random warp with
//! per-structure size jitter, so inter-subject registration is well-posed.
//! The two modalities are pixel-aligned views of the same anatomy with a
//! rank-permuted (non-monotone) class intensity ladder, an independent
//! smooth gamma field, and independent Gaussian noise, which reproduces the
//! "same anatomy, nonlinearly related appearance" regime.
//!
//! Everything is a pure function of `(seed, grid_shape, n_structures)`.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::substream;
use crate::volume::{foreground_mask, ImageVolume};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// A pixel-aligned cross-modality pair with shared labels.
#[derive(Debug, Clone)]
pub struct SyntheticSubject {
    pub modality_a: ImageVolume,
    pub modality_b: ImageVolume,
    pub labels: ArrayD<i32>,
    pub seed: u64,
}

/// Default foreground threshold (fraction of the image maximum).
pub const FOREGROUND_THRESHOLD: f64 = 0.05;

/// Desk-scale split sizes analogous to a large train/val/test partition.
pub fn split_counts(n_subjects: usize) -> (usize, usize, usize) {
    if n_subjects <= 3 {
        let test = usize::from(n_subjects >= 2);
        let val = usize::from(n_subjects >= 3);
        return (n_subjects - test - val, val, test);
    }
    let test = ((n_subjects * 16) / 88).max(1);
    let val = ((n_subjects * 8) / 88).max(1);
    (n_subjects - val - test, val, test)
}

/// Generate one subject. Deterministic in `seed`.
pub fn generate_subject(
    seed: u64,
    grid_shape: &[usize],
    n_structures: usize,
) -> Result<SyntheticSubject> {
    let d = grid_shape.len();
    if d != 2 && d != 3 {
        return Err(Error::InvalidInput(format!(
            "grid must be 2D or 3D, got {d}D"
        )));
    }
    if grid_shape.iter().any(|&n| n < 32) {
        return Err(Error::InvalidInput(format!(
            "every grid axis must be >= 32, got {grid_shape:?}"
        )));
    }
    if n_structures < 2 {
        return Err(Error::InvalidInput(format!(
            "need >= 2 structures, got {n_structures}"
        )));
    }

    let min_extent = *grid_shape.iter().min().unwrap() as f64;
    let center: Vec<f64> = grid_shape.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect();

    // canonical structure layout: ring of ellipsoids inside the body
    let ring_r = 0.22 * min_extent;
    let mut centers = Vec::with_capacity(n_structures);
    let mut radii = Vec::with_capacity(n_structures);
    let mut jitter_rng = substream(seed, "synth/jitter", &[]);
    for s in 0..n_structures {
        let theta = std::f64::consts::TAU * s as f64 / n_structures as f64 + 0.7;
        let mut cs = center.clone();
        cs[0] += ring_r * theta.cos();
        cs[1] += ring_r * theta.sin();
        if d == 3 {
            cs[2] += 0.08 * min_extent * if s % 2 == 0 { 1.0 } else { -1.0 };
        }
        let base_r = (0.09 + 0.025 * (s % 3) as f64) * min_extent;
        let jitter: f64 = 0.92 + 0.16 * jitter_rng.gen::<f64>();
        centers.push(cs);
        radii.push(base_r * jitter);
    }
    let body_semi: Vec<f64> = grid_shape.iter().map(|&n| 0.40 * n as f64).collect();

    // per-subject smooth random warp of the canonical anatomy
    let warp_amp = 0.05 * min_extent;
    let warp = smooth_random_field::<f64>(
        substream(seed, "synth/warp", &[]),
        grid_shape,
        6.0,
        warp_amp,
    );

    let n: usize = grid_shape.iter().product();
    let strides = row_major_strides(grid_shape);
    let mut labels = vec![0i32; n];
    for flat in 0..n {
        let coords = unravel(flat, &strides);
        let mut y = [0f64; 3];
        for ax in 0..d {
            y[ax] = coords[ax] as f64 + warp[flat * d + ax];
        }
        let mut best_s = None;
        let mut best_v = 0.0;
        for s in 0..n_structures {
            let mut q = 0.0;
            for ax in 0..d {
                let t = (y[ax] - centers[s][ax]) / radii[s];
                q += t * t;
            }
            let v = 1.0 - q;
            if v > 0.0 && v > best_v {
                best_v = v;
                best_s = Some(s);
            }
        }
        labels[flat] = if let Some(s) = best_s {
            s as i32 + 2
        } else {
            let mut q = 0.0;
            for ax in 0..d {
                let t = (y[ax] - center[ax]) / body_semi[ax];
                q += t * t;
            }
            i32::from(q < 1.0)
        };
    }

    // class intensity ladders: modality B uses a cyclic rank permutation of
    // modality A, which is non-monotone for >= 3 foreground classes
    let n_fg = n_structures + 1;
    let ladder: Vec<f64> = (0..n_fg)
        .map(|i| 0.35 + 0.60 * i as f64 / (n_fg - 1) as f64)
        .collect();
    let ladder_b: Vec<f64> = (0..n_fg).map(|i| ladder[(i + 1) % n_fg]).collect();

    let intensity_a = render_modality(
        seed,
        "synth/mod_a",
        grid_shape,
        &labels,
        &ladder,
        false,
    );
    let intensity_b = render_modality(
        seed,
        "synth/mod_b",
        grid_shape,
        &labels,
        &ladder_b,
        true,
    );

    let labels_arr = ArrayD::from_shape_vec(IxDyn(grid_shape), labels).expect("shape");
    let spacing = vec![1.0; d];
    let mut vol_a = ImageVolume::new(intensity_a, spacing.clone())?
        .with_labels(labels_arr.clone())?;
    let mut vol_b = ImageVolume::new(intensity_b, spacing)?.with_labels(labels_arr.clone())?;
    vol_a.foreground = Some(foreground_mask(&vol_a, FOREGROUND_THRESHOLD).mask);
    vol_b.foreground = Some(foreground_mask(&vol_b, FOREGROUND_THRESHOLD).mask);

    Ok(SyntheticSubject {
        modality_a: vol_a,
        modality_b: vol_b,
        labels: labels_arr,
        seed,
    })
}

fn render_modality(
    seed: u64,
    tag: &str,
    grid_shape: &[usize],
    labels: &[i32],
    ladder: &[f64],
    gamma_field: bool,
) -> ArrayD<f32> {
    let n: usize = grid_shape.iter().product();
    let mut img = vec![0f64; n];
    for (i, &l) in labels.iter().enumerate() {
        img[i] = if l > 0 { ladder[(l - 1) as usize] } else { 0.0 };
    }
    if gamma_field {
        // smooth exponent field in [0.85, 1.18]
        let g = smooth_scalar_noise(substream(seed, tag, &[0]), grid_shape, 10.0);
        for i in 0..n {
            let gamma = 1.0 + 0.165 * g[i] + 0.015;
            if img[i] > 0.0 {
                img[i] = img[i].powf(gamma.clamp(0.80, 1.25));
            }
        }
    } else {
        // mild smooth multiplicative modulation in [0.92, 1.08]
        let g = smooth_scalar_noise(substream(seed, tag, &[0]), grid_shape, 10.0);
        for i in 0..n {
            img[i] *= 1.0 + 0.08 * g[i];
        }
    }
    gaussian_blur_inplace(&mut img, grid_shape, 0.6);
    let mut noise_rng = substream(seed, tag, &[1]);
    for x in img.iter_mut() {
        let eps: f64 = noise_rng.sample(StandardNormal);
        *x = (*x + 0.02 * eps).clamp(0.0, 1.0);
    }
    ArrayD::from_shape_vec(IxDyn(grid_shape), img.iter().map(|&x| x as f32).collect())
        .expect("shape")
}

// -- smooth noise helpers (shared with the geometry test oracles) -------------

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn unravel(mut flat: usize, strides: &[usize]) -> Vec<usize> {
    strides
        .iter()
        .map(|&s| {
            let q = flat / s;
            flat %= s;
            q
        })
        .collect()
}

/// Gaussian-smoothed white noise rescaled to `[-1, 1]`.
fn smooth_scalar_noise(
    mut rng: rand_chacha::ChaCha8Rng,
    shape: &[usize],
    sigma: f64,
) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut field: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    gaussian_blur_inplace(&mut field, shape, sigma);
    let max = field.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
    for x in field.iter_mut() {
        *x /= max;
    }
    field
}

/// Smooth random vector field with maximum magnitude `amplitude` (voxels),
/// flattened as `[voxel][component]`.
pub fn smooth_random_field<F: Real>(
    mut rng: rand_chacha::ChaCha8Rng,
    shape: &[usize],
    sigma: f64,
    amplitude: f64,
) -> Vec<F> {
    let d = shape.len();
    let n: usize = shape.iter().product();
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(d);
    for _ in 0..d {
        let mut comp: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        gaussian_blur_inplace(&mut comp, shape, sigma);
        comps.push(comp);
    }
    let mut max_mag: f64 = 1e-12;
    for i in 0..n {
        let m: f64 = comps.iter().map(|cp| cp[i] * cp[i]).sum();
        max_mag = max_mag.max(m.sqrt());
    }
    let scale = amplitude / max_mag;
    let mut out = vec![F::zero(); n * d];
    for i in 0..n {
        for ax in 0..d {
            out[i * d + ax] = F::from_f64(comps[ax][i] * scale);
        }
    }
    out
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur_inplace(field: &mut [f64], shape: &[usize], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let strides = row_major_strides(shape);
    let n = field.len();
    let mut scratch = vec![0f64; n];
    for ax in 0..shape.len() {
        let len = shape[ax];
        let stride = strides[ax];
        for start in 0..n {
            // process each axis-aligned line exactly once
            let coord = (start / stride) % len;
            if coord != 0 {
                continue;
            }
            for i in 0..len {
                let mut acc = 0.0;
                for (ki, &kw) in kernel.iter().enumerate() {
                    let j = (i as isize + ki as isize - radius).clamp(0, len as isize - 1);
                    acc += kw * field[start + j as usize * stride];
                }
                scratch[start + i * stride] = acc;
            }
        }
        field.copy_from_slice(&scratch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::dice_binary;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_subject(11, &[48, 48], 3).unwrap();
        let b = generate_subject(11, &[48, 48], 3).unwrap();
        assert_eq!(a.modality_a.data, b.modality_a.data);
        assert_eq!(a.modality_b.data, b.modality_b.data);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn different_seeds_differ_on_over_one_percent() {
        let a = generate_subject(1, &[96, 96], 3).unwrap();
        let b = generate_subject(2, &[96, 96], 3).unwrap();
        let differing = a
            .labels
            .iter()
            .zip(b.labels.iter())
            .filter(|(x, y)| x != y)
            .count();
        let frac = differing as f64 / a.labels.len() as f64;
        assert!(frac > 0.01, "labels differ on only {:.3}%", frac * 100.0);
    }

    #[test]
    fn modality_foregrounds_overlap() {
        let s = generate_subject(5, &[96, 96], 3).unwrap();
        let fa = s.modality_a.foreground.as_ref().unwrap();
        let fb = s.modality_b.foreground.as_ref().unwrap();
        let dice = dice_binary(fa, fb);
        assert!(dice >= 0.95, "foreground dice {dice}");
    }

    #[test]
    fn mask_area_tracks_labeled_foreground() {
        let s = generate_subject(9, &[96, 96], 3).unwrap();
        let mask_area = s
            .modality_a
            .foreground
            .as_ref()
            .unwrap()
            .iter()
            .filter(|&&b| b)
            .count() as f64;
        let label_area = s.labels.iter().filter(|&&l| l > 0).count() as f64;
        let rel = (mask_area - label_area).abs() / label_area;
        assert!(rel <= 0.10, "relative area difference {rel}");
    }

    #[test]
    fn labels_cover_requested_structures() {
        let s = generate_subject(3, &[96, 96], 4).unwrap();
        for l in 0..=5 {
            assert!(
                s.labels.iter().any(|&x| x == l),
                "label {l} missing from subject"
            );
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(generate_subject(0, &[16, 96], 3).is_err());
        assert!(generate_subject(0, &[96], 3).is_err());
        assert!(generate_subject(0, &[96, 96], 1).is_err());
    }

    #[test]
    fn split_counts_desk_default() {
        assert_eq!(split_counts(88), (64, 8, 16));
        let (tr, va, te) = split_counts(12);
        assert_eq!(tr + va + te, 12);
        assert!(tr >= va && tr >= te && te >= 1 && va >= 1);
    }

    #[test]
    fn works_in_3d() {
        let s = generate_subject(2, &[32, 32, 32], 2).unwrap();
        assert_eq!(s.modality_a.shape(), &[32, 32, 32]);
        assert!(s.labels.iter().any(|&l| l == 3));
    }
}
