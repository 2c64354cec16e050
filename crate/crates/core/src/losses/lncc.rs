//! Local normalized cross-correlation over sliding windows.
//!
//! `loss = 1 - mean(ncc^2)` where per window `ncc^2 = C^2 / (Va Vb + 1e-5)`
//! with window sums (not means) as in the usual registration formulation.
//! Windows are clipped at boundaries. Sums come from summed-area tables
//! accumulated in f64, and the gradient reuses the same tables, so the cost
//! is linear in the voxel count.

use super::{check_same_grid, row_major_strides};
use crate::error::{Error, Result};
use crate::real::{c, Real};
use ndarray::{ArrayD, IxDyn};

const STAB_EPS: f64 = 1e-5;

struct Sat {
    data: Vec<f64>,
    shape: Vec<usize>,
    strides_p1: Vec<usize>,
}

impl Sat {
    fn build(values: &[f64], shape: &[usize]) -> Sat {
        let d = shape.len();
        let shape_p1: Vec<usize> = shape.iter().map(|&n| n + 1).collect();
        let strides_p1 = row_major_strides(&shape_p1);
        let strides = row_major_strides(shape);
        let n_p1: usize = shape_p1.iter().product();
        let mut data = vec![0f64; n_p1];
        // copy with +1 offset on every axis, then prefix-sum each axis
        for flat in 0..values.len() {
            let mut rem = flat;
            let mut out = 0usize;
            for ax in 0..d {
                let coord = rem / strides[ax];
                rem %= strides[ax];
                out += (coord + 1) * strides_p1[ax];
            }
            data[out] = values[flat];
        }
        for ax in 0..d {
            let len = shape_p1[ax];
            let stride = strides_p1[ax];
            for start in 0..n_p1 {
                if (start / stride) % len != 0 {
                    continue;
                }
                let mut acc = 0.0;
                for i in 0..len {
                    acc += data[start + i * stride];
                    data[start + i * stride] = acc;
                }
            }
        }
        Sat {
            data,
            shape: shape.to_vec(),
            strides_p1,
        }
    }

    /// Inclusive box sum over `[lo, hi]`.
    fn box_sum(&self, lo: &[usize], hi: &[usize]) -> f64 {
        let d = self.shape.len();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut idx = 0usize;
            let mut sign = 1.0;
            for ax in 0..d {
                if (corner >> ax) & 1 == 1 {
                    idx += (hi[ax] + 1) * self.strides_p1[ax];
                } else {
                    idx += lo[ax] * self.strides_p1[ax];
                    sign = -sign;
                }
            }
            acc += sign * self.data[idx];
        }
        acc
    }
}

pub fn local_ncc_loss<F: Real>(a: &ArrayD<F>, b: &ArrayD<F>, window: usize) -> Result<F> {
    let (loss, _) = lncc_impl(a, b, window, false)?;
    Ok(loss)
}

pub fn local_ncc_loss_grad<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    window: usize,
) -> Result<(F, ArrayD<F>)> {
    let (loss, grad) = lncc_impl(a, b, window, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn lncc_impl<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    window: usize,
    want_grad: bool,
) -> Result<(F, Option<ArrayD<F>>)> {
    check_same_grid(a, b)?;
    if window % 2 == 0 || window < 3 {
        return Err(Error::InvalidInput(format!(
            "window must be odd and >= 3, got {window}"
        )));
    }
    let shape = a.shape().to_vec();
    let d = shape.len();
    let r = window / 2;
    let n: usize = shape.iter().product();
    let strides = row_major_strides(&shape);
    let av: Vec<f64> = a.iter().map(|x| x.as_f64()).collect();
    let bv: Vec<f64> = b.iter().map(|x| x.as_f64()).collect();
    let aa: Vec<f64> = av.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = bv.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
    let sat_a = Sat::build(&av, &shape);
    let sat_b = Sat::build(&bv, &shape);
    let sat_aa = Sat::build(&aa, &shape);
    let sat_bb = Sat::build(&bb, &shape);
    let sat_ab = Sat::build(&ab, &shape);

    let bounds = |flat: usize| {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut count = 1usize;
        let mut rem = flat;
        for ax in 0..d {
            let coord = rem / strides[ax];
            rem %= strides[ax];
            lo[ax] = coord.saturating_sub(r);
            hi[ax] = (coord + r).min(shape[ax] - 1);
            count *= hi[ax] - lo[ax] + 1;
        }
        (lo, hi, count)
    };

    let mut total = 0.0;
    // per-window scalars needed by the gradient
    let mut alpha = want_grad.then(|| vec![0f64; n]);
    let mut alpha_am = want_grad.then(|| vec![0f64; n]);
    let mut beta = want_grad.then(|| vec![0f64; n]);
    let mut beta_bm = want_grad.then(|| vec![0f64; n]);
    for flat in 0..n {
        let (lo, hi, count) = bounds(flat);
        let cn = count as f64;
        let sa = sat_a.box_sum(&lo[..d], &hi[..d]);
        let sb = sat_b.box_sum(&lo[..d], &hi[..d]);
        let saa = sat_aa.box_sum(&lo[..d], &hi[..d]);
        let sbb = sat_bb.box_sum(&lo[..d], &hi[..d]);
        let sab = sat_ab.box_sum(&lo[..d], &hi[..d]);
        let cross = sab - sa * sb / cn;
        let va = (saa - sa * sa / cn).max(0.0);
        let vb = (sbb - sb * sb / cn).max(0.0);
        let denom = va * vb + STAB_EPS;
        total += cross * cross / denom;
        if let (Some(alpha), Some(alpha_am), Some(beta), Some(beta_bm)) = (
            alpha.as_mut(),
            alpha_am.as_mut(),
            beta.as_mut(),
            beta_bm.as_mut(),
        ) {
            let al = 2.0 * cross / denom;
            let be = 2.0 * cross * cross * va / (denom * denom);
            alpha[flat] = al;
            alpha_am[flat] = al * sa / cn;
            beta[flat] = be;
            beta_bm[flat] = be * sb / cn;
        }
    }
    let loss = 1.0 - total / n as f64;
    if !want_grad {
        return Ok((c::<F>(loss), None));
    }
    // grad_b(j) = -(1/N) [ a_j S(alpha) - S(alpha a_mean) - b_j S(beta) + S(beta b_mean) ]
    let sat_alpha = Sat::build(&alpha.unwrap(), &shape);
    let sat_alpha_am = Sat::build(&alpha_am.unwrap(), &shape);
    let sat_beta = Sat::build(&beta.unwrap(), &shape);
    let sat_beta_bm = Sat::build(&beta_bm.unwrap(), &shape);
    let mut grad = vec![0f64; n];
    for flat in 0..n {
        let (lo, hi, _) = bounds(flat);
        let s_alpha = sat_alpha.box_sum(&lo[..d], &hi[..d]);
        let s_alpha_am = sat_alpha_am.box_sum(&lo[..d], &hi[..d]);
        let s_beta = sat_beta.box_sum(&lo[..d], &hi[..d]);
        let s_beta_bm = sat_beta_bm.box_sum(&lo[..d], &hi[..d]);
        grad[flat] =
            -(av[flat] * s_alpha - s_alpha_am - bv[flat] * s_beta + s_beta_bm) / n as f64;
    }
    let grad = ArrayD::from_shape_vec(
        IxDyn(&shape),
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
        let mut rng = substream(seed, "lncc-test", &[]);
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identical_textured_images_score_near_zero() {
        let a = noise_image(1, &[48, 48]);
        let loss = local_ncc_loss(&a, &a, 7).unwrap();
        assert!(loss < 1e-4, "loss {loss}");
    }

    #[test]
    fn affine_intensity_map_is_invariant() {
        let a = noise_image(2, &[48, 48]);
        let b = a.mapv(|x| 0.5 * x + 0.2);
        let loss = local_ncc_loss(&a, &b, 7).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn independent_noise_scores_high() {
        let a = noise_image(3, &[48, 48]);
        let b = noise_image(4, &[48, 48]);
        let loss = local_ncc_loss(&a, &b, 7).unwrap();
        assert!(loss > 0.8, "loss {loss}");
    }

    #[test]
    fn finite_on_constant_images() {
        let a = ArrayD::from_shape_vec(IxDyn(&[16, 16]), vec![0.5f64; 256]).unwrap();
        let loss = local_ncc_loss(&a, &a, 7).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn even_window_rejected() {
        let a = noise_image(5, &[16, 16]);
        assert!(local_ncc_loss(&a, &a, 6).is_err());
    }
}
