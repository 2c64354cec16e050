//! Modality-independent neighborhood descriptor loss.
//!
//! Per voxel, Gaussian-weighted patch SSDs to the axis neighbors at offset
//! `distance` are normalized by their local mean (the variance estimate),
//! exponentiated, and max-normalized. The loss is the mean squared
//! difference between the two images' descriptors — invariant to intensity
//! scaling and inversion by construction.

use super::{check_same_grid, row_major_strides};
use crate::error::{Error, Result};
use crate::real::{c, Real};
use ndarray::{ArrayD, IxDyn};

const VARIANCE_FLOOR: f64 = 1e-6;

struct MindGeometry {
    shape: Vec<usize>,
    strides: Vec<usize>,
    /// axis neighbor offsets, one per direction (2D -> 4, 3D -> 6)
    neighbor_offsets: Vec<Vec<isize>>,
    /// patch offsets with normalized Gaussian weights
    patch: Vec<(Vec<isize>, f64)>,
}

impl MindGeometry {
    fn new(shape: &[usize], distance: usize, patch: usize) -> Result<Self> {
        if patch % 2 == 0 || patch < 3 {
            return Err(Error::InvalidInput(format!(
                "patch must be odd and >= 3, got {patch}"
            )));
        }
        if distance == 0 {
            return Err(Error::InvalidInput("distance must be >= 1".into()));
        }
        let d = shape.len();
        let mut neighbor_offsets = Vec::with_capacity(2 * d);
        for ax in 0..d {
            for s in [-(distance as isize), distance as isize] {
                let mut o = vec![0isize; d];
                o[ax] = s;
                neighbor_offsets.push(o);
            }
        }
        let pr = (patch / 2) as isize;
        let sigma = (patch as f64 / 2.0) * 0.5;
        let mut offsets = vec![vec![0isize; d]];
        for ax in 0..d {
            let mut next = Vec::new();
            for base in offsets {
                for o in -pr..=pr {
                    let mut v = base.clone();
                    v[ax] = o;
                    next.push(v);
                }
            }
            offsets = next;
        }
        let mut patch_w: Vec<(Vec<isize>, f64)> = offsets
            .into_iter()
            .map(|o| {
                let r2: f64 = o.iter().map(|&x| (x * x) as f64).sum();
                let w = (-r2 / (2.0 * sigma * sigma)).exp();
                (o, w)
            })
            .collect();
        let wsum: f64 = patch_w.iter().map(|(_, w)| w).sum();
        for (_, w) in patch_w.iter_mut() {
            *w /= wsum;
        }
        Ok(MindGeometry {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            neighbor_offsets,
            patch: patch_w,
        })
    }

    #[inline]
    fn clamped_flat(&self, coords: &[usize], off_a: &[isize], off_b: &[isize]) -> usize {
        let mut flat = 0usize;
        for ax in 0..self.shape.len() {
            let p = (coords[ax] as isize + off_a[ax] + off_b[ax])
                .clamp(0, self.shape[ax] as isize - 1);
            flat += p as usize * self.strides[ax];
        }
        flat
    }

    fn coords(&self, mut flat: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|&s| {
                let q = flat / s;
                flat %= s;
                q
            })
            .collect()
    }
}

struct Descriptors {
    /// patch distances `[voxel][direction]`
    dist: Vec<f64>,
    /// clamped variance estimate per voxel
    variance: Vec<f64>,
    /// whether the variance floor was active
    clamped: Vec<bool>,
    /// normalized descriptors `[voxel][direction]`
    desc: Vec<f64>,
    /// argmin direction per voxel
    argmin: Vec<usize>,
}

fn descriptors<F: Real>(img: &[F], geo: &MindGeometry) -> Descriptors {
    let n: usize = geo.shape.iter().product();
    let m = geo.neighbor_offsets.len();
    let zero_off = vec![0isize; geo.shape.len()];
    let mut dist = vec![0f64; n * m];
    let mut variance = vec![0f64; n];
    let mut clamped = vec![false; n];
    let mut desc = vec![0f64; n * m];
    let mut argmin = vec![0usize; n];
    for flat in 0..n {
        let coords = geo.coords(flat);
        let mut vsum = 0.0;
        for (mi, roff) in geo.neighbor_offsets.iter().enumerate() {
            let mut ssd = 0.0;
            for (poff, w) in &geo.patch {
                let ia = geo.clamped_flat(&coords, poff, &zero_off);
                let ib = geo.clamped_flat(&coords, poff, roff);
                let diff = img[ia].as_f64() - img[ib].as_f64();
                ssd += w * diff * diff;
            }
            dist[flat * m + mi] = ssd;
            vsum += ssd;
        }
        let v_raw = vsum / m as f64;
        let v = v_raw.max(VARIANCE_FLOOR);
        variance[flat] = v;
        clamped[flat] = v_raw < VARIANCE_FLOOR;
        let mut dmin = f64::INFINITY;
        let mut amin = 0usize;
        for mi in 0..m {
            if dist[flat * m + mi] < dmin {
                dmin = dist[flat * m + mi];
                amin = mi;
            }
        }
        argmin[flat] = amin;
        for mi in 0..m {
            desc[flat * m + mi] = (-(dist[flat * m + mi] - dmin) / v).exp();
        }
    }
    Descriptors {
        dist,
        variance,
        clamped,
        desc,
        argmin,
    }
}

/// Mean squared MIND descriptor difference.
pub fn mind_loss<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    distance: usize,
    patch: usize,
) -> Result<F> {
    let (loss, _) = mind_impl(a, b, distance, patch, false)?;
    Ok(loss)
}

pub fn mind_loss_grad<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    distance: usize,
    patch: usize,
) -> Result<(F, ArrayD<F>)> {
    let (loss, grad) = mind_impl(a, b, distance, patch, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn mind_impl<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    distance: usize,
    patch: usize,
    want_grad: bool,
) -> Result<(F, Option<ArrayD<F>>)> {
    check_same_grid(a, b)?;
    let geo = MindGeometry::new(a.shape(), distance, patch)?;
    let av = a.as_slice().expect("contiguous");
    let bv = b.as_slice().expect("contiguous");
    let da = descriptors(av, &geo);
    let db = descriptors(bv, &geo);
    let n: usize = geo.shape.iter().product();
    let m = geo.neighbor_offsets.len();
    let norm = 1.0 / (n * m) as f64;
    let mut loss = 0.0;
    for i in 0..n * m {
        let diff = da.desc[i] - db.desc[i];
        loss += diff * diff;
    }
    loss *= norm;
    if !want_grad {
        return Ok((c::<F>(loss), None));
    }
    let zero_off = vec![0isize; geo.shape.len()];
    let mut grad = vec![0f64; n];
    for flat in 0..n {
        let coords = geo.coords(flat);
        let v = db.variance[flat];
        let amin = db.argmin[flat];
        // chain dloss/ddesc -> ddesc/ddist
        let mut g_dist = vec![0f64; m];
        for mi in 0..m {
            let g_desc = -2.0 * (da.desc[flat * m + mi] - db.desc[flat * m + mi]) * norm;
            if g_desc == 0.0 {
                continue;
            }
            let nm = db.desc[flat * m + mi];
            let dexc = db.dist[flat * m + mi] - db.dist[flat * m + amin];
            for k in 0..m {
                let mut dd = 0.0;
                if k == mi {
                    dd -= 1.0 / v;
                }
                if k == amin {
                    dd += 1.0 / v;
                }
                if !db.clamped[flat] {
                    dd += dexc / (v * v) / m as f64;
                }
                g_dist[k] += g_desc * nm * dd;
            }
        }
        // chain ddist/db with the same clamped reads as the forward pass
        for (k, roff) in geo.neighbor_offsets.iter().enumerate() {
            if g_dist[k] == 0.0 {
                continue;
            }
            for (poff, w) in &geo.patch {
                let ia = geo.clamped_flat(&coords, poff, &zero_off);
                let ib = geo.clamped_flat(&coords, poff, roff);
                let diff = bv[ia].as_f64() - bv[ib].as_f64();
                let contrib = g_dist[k] * 2.0 * w * diff;
                grad[ia] += contrib;
                grad[ib] -= contrib;
            }
        }
    }
    let grad = ArrayD::from_shape_vec(
        IxDyn(a.shape()),
        grad.into_iter().map(F::from_f64).collect(),
    )
    .expect("shape");
    Ok((c::<F>(loss), Some(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn noise_image(seed: u64, shape: &[usize]) -> ArrayD<f64> {
        let mut rng = substream(seed, "mind-test", &[]);
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identical_images_score_zero() {
        let a = noise_image(1, &[24, 24]);
        let loss = mind_loss(&a, &a, 2, 3).unwrap();
        assert!(loss.abs() < 1e-10, "loss {loss}");
    }

    #[test]
    fn intensity_inversion_beats_noise() {
        let a = noise_image(2, &[32, 32]);
        let inverted = a.mapv(|x| 1.0 - x);
        let noise = noise_image(3, &[32, 32]);
        let l_inv = mind_loss(&a, &inverted, 2, 3).unwrap();
        let l_noise = mind_loss(&a, &noise, 2, 3).unwrap();
        assert!(
            l_inv < l_noise,
            "inversion {l_inv} not below noise {l_noise}"
        );
        // squared differences are inversion-invariant, so descriptors match
        assert!(l_inv < 1e-10);
    }

    #[test]
    fn shifted_image_scores_positive() {
        let a = noise_image(4, &[32, 32]);
        let mut b = a.clone();
        for i in 0..32 {
            for j in 0..32 {
                b[[i, j]] = a[[(i + 3) % 32, j]];
            }
        }
        let loss = mind_loss(&a, &b, 2, 3).unwrap();
        assert!(loss > 1e-4, "loss {loss}");
    }

    #[test]
    fn finite_on_constant_images() {
        let a = ArrayD::from_shape_vec(IxDyn(&[16, 16]), vec![0.3f64; 256]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[16, 16]), vec![0.8f64; 256]).unwrap();
        let loss = mind_loss(&a, &b, 2, 3).unwrap();
        assert!(loss.is_finite());
    }
}
