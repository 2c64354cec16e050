//! Normalized gradient field loss.
//!
//! `loss = 1 - mean <grad a, grad b>^2 / ((|grad a|^2 + eps^2)(|grad b|^2 + eps^2))`
//! with central differences in the interior and one-sided differences at
//! boundaries. When `eps` is not supplied it defaults to 1% of the mean
//! gradient magnitude of the fixed image (floored to stay positive).

use super::{check_same_grid, row_major_strides};
use crate::error::Result;
use crate::real::{c, Real};
use ndarray::{ArrayD, IxDyn};

const EPS_FLOOR: f64 = 1e-8;

/// Gradient field as `[voxel][axis]`, plus the stencil bounds needed for the
/// adjoint scatter.
fn gradient_field<F: Real>(img: &[F], shape: &[usize]) -> Vec<f64> {
    let d = shape.len();
    let strides = row_major_strides(shape);
    let n: usize = shape.iter().product();
    let mut g = vec![0f64; n * d];
    for flat in 0..n {
        let mut rem = flat;
        for ax in 0..d {
            let coord = rem / strides[ax];
            rem %= strides[ax];
            let (lo, hi, scale) = stencil(coord, shape[ax], flat, strides[ax]);
            g[flat * d + ax] = (img[hi].as_f64() - img[lo].as_f64()) * scale;
        }
    }
    g
}

#[inline]
fn stencil(coord: usize, len: usize, flat: usize, stride: usize) -> (usize, usize, f64) {
    if coord == 0 {
        (flat, flat + stride, 1.0)
    } else if coord == len - 1 {
        (flat - stride, flat, 1.0)
    } else {
        (flat - stride, flat + stride, 0.5)
    }
}

fn auto_eps(grad_a: &[f64], d: usize) -> f64 {
    let n = grad_a.len() / d;
    let mut sum = 0.0;
    for i in 0..n {
        let mut m = 0.0;
        for ax in 0..d {
            m += grad_a[i * d + ax] * grad_a[i * d + ax];
        }
        sum += m.sqrt();
    }
    (0.01 * sum / n as f64).max(EPS_FLOOR)
}

pub fn ngf_loss<F: Real>(a: &ArrayD<F>, b: &ArrayD<F>, eps: Option<f64>) -> Result<F> {
    let (loss, _) = ngf_impl(a, b, eps, false)?;
    Ok(loss)
}

pub fn ngf_loss_grad<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    eps: Option<f64>,
) -> Result<(F, ArrayD<F>)> {
    let (loss, grad) = ngf_impl(a, b, eps, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn ngf_impl<F: Real>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    eps: Option<f64>,
    want_grad: bool,
) -> Result<(F, Option<ArrayD<F>>)> {
    check_same_grid(a, b)?;
    let shape = a.shape().to_vec();
    let d = shape.len();
    let n: usize = shape.iter().product();
    let av = a.as_slice().expect("contiguous");
    let bv = b.as_slice().expect("contiguous");
    let ga = gradient_field(av, &shape);
    let gb = gradient_field(bv, &shape);
    let eps = eps.unwrap_or_else(|| auto_eps(&ga, d));
    let eps2 = eps * eps;
    let mut mean_ratio = 0.0;
    let mut dloss_dgb = want_grad.then(|| vec![0f64; n * d]);
    for i in 0..n {
        let mut dot = 0.0;
        let mut na = eps2;
        let mut nb = eps2;
        for ax in 0..d {
            let x = ga[i * d + ax];
            let y = gb[i * d + ax];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let denom = na * nb;
        mean_ratio += dot * dot / denom;
        if let Some(dg) = dloss_dgb.as_mut() {
            // d ratio / d gb = 2 dot ga / (na nb) - dot^2 2 gb / (na nb^2)
            for ax in 0..d {
                let x = ga[i * d + ax];
                let y = gb[i * d + ax];
                let dr = 2.0 * dot * x / denom - 2.0 * dot * dot * y / (denom * nb);
                // loss = 1 - mean(ratio)
                dg[i * d + ax] = -dr / n as f64;
            }
        }
    }
    let loss = 1.0 - mean_ratio / n as f64;
    let grad = dloss_dgb.map(|dg| {
        // adjoint of the finite-difference stencil
        let strides = row_major_strides(&shape);
        let mut grad = vec![0f64; n];
        for flat in 0..n {
            let mut rem = flat;
            for ax in 0..d {
                let coord = rem / strides[ax];
                rem %= strides[ax];
                let (lo, hi, scale) = stencil(coord, shape[ax], flat, strides[ax]);
                let v = dg[flat * d + ax] * scale;
                grad[hi] += v;
                grad[lo] -= v;
            }
        }
        ArrayD::from_shape_vec(IxDyn(&shape), grad.into_iter().map(F::from_f64).collect())
            .expect("shape")
    });
    Ok((c::<F>(loss), grad))
}
