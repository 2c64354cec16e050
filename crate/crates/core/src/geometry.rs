//! Deformation calculus: stationary-velocity-field integration, image
//! warping, and Jacobian determinant fields.
//!
//! Vector fields are dense arrays of shape `spatial + [D]` in voxel units;
//! a displacement `u` represents the map `phi(x) = x + u(x)`. Sampling uses
//! linear interpolation with edge replication; Jacobians use central
//! differences in the interior and one-sided differences at boundaries.
//!
//! Every differentiable operation has an explicit backward companion used
//! by the training loop.

use crate::error::{Error, Result};
use crate::par;
use crate::real::{c, Real};
use ndarray::{ArrayD, IxDyn};

/// Stationary velocity field `v`, voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField<F: Real> {
    pub data: ArrayD<F>,
}

/// Displacement field `u` with `phi(x) = x + u(x)`, voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField<F: Real> {
    pub data: ArrayD<F>,
}

fn validate_field<F: Real>(data: &ArrayD<F>) -> Result<()> {
    let nd = data.ndim();
    if nd < 3 || nd > 4 {
        return Err(Error::InvalidInput(format!(
            "vector field must have shape spatial+[D] with D in {{2,3}}, got {nd} axes"
        )));
    }
    let d = nd - 1;
    if data.shape()[nd - 1] != d {
        return Err(Error::ShapeMismatch(format!(
            "component axis has {} entries for {d} spatial dims",
            data.shape()[nd - 1]
        )));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite field entry".into()));
    }
    Ok(())
}

macro_rules! field_impl {
    ($name:ident) => {
        impl<F: Real> $name<F> {
            pub fn new(data: ArrayD<F>) -> Result<Self> {
                validate_field(&data)?;
                Ok(Self { data })
            }

            pub fn zeros(spatial: &[usize]) -> Self {
                let mut shape = spatial.to_vec();
                shape.push(spatial.len());
                Self {
                    data: ArrayD::zeros(IxDyn(&shape)),
                }
            }

            pub fn spatial_shape(&self) -> &[usize] {
                let s = self.data.shape();
                &s[..s.len() - 1]
            }

            pub fn spatial_ndim(&self) -> usize {
                self.data.ndim() - 1
            }

            pub fn n_voxels(&self) -> usize {
                self.spatial_shape().iter().product()
            }

            /// Maximum component-wise magnitude.
            pub fn max_abs(&self) -> f64 {
                self.data
                    .iter()
                    .map(|x| x.as_f64().abs())
                    .fold(0.0, f64::max)
            }

            /// Mean Euclidean magnitude over voxels.
            pub fn mean_magnitude(&self) -> f64 {
                let d = self.spatial_ndim();
                let flat = self.data.as_slice().expect("contiguous field");
                let n = self.n_voxels();
                let sum = par::sum_index_chunks(n, par::VOXEL_CHUNK, |s, e| {
                    let mut acc = 0.0;
                    for i in s..e {
                        let mut m = 0.0;
                        for ax in 0..d {
                            let x = flat[i * d + ax].as_f64();
                            m += x * x;
                        }
                        acc += m.sqrt();
                    }
                    acc
                });
                sum / n as f64
            }
        }
    };
}

field_impl!(VelocityField);
field_impl!(DisplacementField);

impl<F: Real> std::ops::Neg for &VelocityField<F> {
    type Output = VelocityField<F>;

    fn neg(self) -> VelocityField<F> {
        VelocityField {
            data: self.data.mapv(|x| -x),
        }
    }
}

/// Interpolation scheme for [`warp_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Linear,
    Nearest,
}

// -- grid helpers ------------------------------------------------------------

#[derive(Clone, Copy)]
struct Grid {
    ndim: usize,
    shape: [usize; 3],
    strides: [usize; 3],
    n: usize,
}

impl Grid {
    fn new(spatial: &[usize]) -> Self {
        let ndim = spatial.len();
        let mut shape = [1usize; 3];
        shape[..ndim].copy_from_slice(spatial);
        let mut strides = [0usize; 3];
        let mut acc = 1usize;
        for ax in (0..ndim).rev() {
            strides[ax] = acc;
            acc *= shape[ax];
        }
        Grid {
            ndim,
            shape,
            strides,
            n: acc,
        }
    }

    #[inline(always)]
    fn coords(&self, mut flat: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        for ax in 0..self.ndim {
            out[ax] = flat / self.strides[ax];
            flat %= self.strides[ax];
        }
        out
    }
}

/// Per-axis interpolation state: floor index, neighbor index, fraction, and
/// whether the continuous coordinate was clamped (derivative is zero there).
#[derive(Clone, Copy)]
struct AxisInterp<F> {
    i0: usize,
    i1: usize,
    frac: F,
    clamped: bool,
}

#[inline(always)]
fn axis_interp<F: Real>(pos: F, len: usize) -> AxisInterp<F> {
    let max = c::<F>((len - 1) as f64);
    let clamped = pos < F::zero() || pos > max;
    let p = pos.max(F::zero()).min(max);
    let mut i0 = p.floor().as_f64() as usize;
    if len > 1 && i0 > len - 2 {
        i0 = len - 2;
    }
    let i1 = (i0 + 1).min(len - 1);
    let frac = p - c::<F>(i0 as f64);
    AxisInterp {
        i0,
        i1,
        frac,
        clamped,
    }
}

// -- warping -----------------------------------------------------------------

fn check_grids(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "grid {a:?} does not match field grid {b:?}"
        )));
    }
    Ok(())
}

/// Warp a scalar grid by `phi(x) = x + u(x)`.
pub fn warp_image<F: Real>(
    vol: &ArrayD<F>,
    phi: &DisplacementField<F>,
    interp: Interp,
) -> Result<ArrayD<F>> {
    check_grids(vol.shape(), phi.spatial_shape())?;
    let grid = Grid::new(vol.shape());
    let d = grid.ndim;
    let vol_flat = vol.as_slice().expect("contiguous volume");
    let u = phi.data.as_slice().expect("contiguous field");
    let mut out = vec![F::zero(); grid.n];
    par::for_each_chunk_mut(&mut out, par::VOXEL_CHUNK, |chunk_idx, chunk| {
        let base = chunk_idx * par::VOXEL_CHUNK;
        for (k, o) in chunk.iter_mut().enumerate() {
            let flat = base + k;
            let x = grid.coords(flat);
            let mut pos = [F::zero(); 3];
            for ax in 0..d {
                pos[ax] = c::<F>(x[ax] as f64) + u[flat * d + ax];
            }
            *o = match interp {
                Interp::Linear => sample_linear(vol_flat, &grid, &pos),
                Interp::Nearest => sample_nearest(vol_flat, &grid, &pos),
            };
        }
    });
    Ok(ArrayD::from_shape_vec(IxDyn(vol.shape()), out).expect("shape preserved"))
}

/// Warp an integer label map with nearest-neighbor sampling.
pub fn warp_labels<F: Real>(
    labels: &ArrayD<i32>,
    phi: &DisplacementField<F>,
) -> Result<ArrayD<i32>> {
    check_grids(labels.shape(), phi.spatial_shape())?;
    let grid = Grid::new(labels.shape());
    let d = grid.ndim;
    let flat_labels = labels.as_slice().expect("contiguous labels");
    let u = phi.data.as_slice().expect("contiguous field");
    let mut out = vec![0i32; grid.n];
    par::for_each_chunk_mut(&mut out, par::VOXEL_CHUNK, |chunk_idx, chunk| {
        let base = chunk_idx * par::VOXEL_CHUNK;
        for (k, o) in chunk.iter_mut().enumerate() {
            let flat = base + k;
            let x = grid.coords(flat);
            let mut idx = 0usize;
            for ax in 0..d {
                let p = x[ax] as f64 + u[flat * d + ax].as_f64();
                let r = p.round().clamp(0.0, (grid.shape[ax] - 1) as f64) as usize;
                idx += r * grid.strides[ax];
            }
            *o = flat_labels[idx];
        }
    });
    Ok(ArrayD::from_shape_vec(IxDyn(labels.shape()), out).expect("shape preserved"))
}

#[inline(always)]
fn sample_linear<F: Real>(vol: &[F], grid: &Grid, pos: &[F; 3]) -> F {
    let d = grid.ndim;
    let mut ax_interp = [AxisInterp {
        i0: 0,
        i1: 0,
        frac: F::zero(),
        clamped: false,
    }; 3];
    for ax in 0..d {
        ax_interp[ax] = axis_interp(pos[ax], grid.shape[ax]);
    }
    let mut acc = F::zero();
    for corner in 0..(1usize << d) {
        let mut w = F::one();
        let mut idx = 0usize;
        for ax in 0..d {
            let hi = (corner >> ax) & 1 == 1;
            let a = &ax_interp[ax];
            w = w * if hi { a.frac } else { F::one() - a.frac };
            idx += if hi { a.i1 } else { a.i0 } * grid.strides[ax];
        }
        acc = acc + w * vol[idx];
    }
    acc
}

#[inline(always)]
fn sample_nearest<F: Real>(vol: &[F], grid: &Grid, pos: &[F; 3]) -> F {
    let mut idx = 0usize;
    for ax in 0..grid.ndim {
        let p = pos[ax].as_f64().round().clamp(0.0, (grid.shape[ax] - 1) as f64) as usize;
        idx += p * grid.strides[ax];
    }
    vol[idx]
}

/// Backward of [`warp_image`] (linear mode): returns gradients with respect
/// to the sampled volume and the displacement field.
pub fn warp_image_backward<F: Real>(
    vol: &ArrayD<F>,
    phi: &DisplacementField<F>,
    grad_out: &ArrayD<F>,
) -> Result<(ArrayD<F>, DisplacementField<F>)> {
    check_grids(vol.shape(), phi.spatial_shape())?;
    check_grids(vol.shape(), grad_out.shape())?;
    let grid = Grid::new(vol.shape());
    let d = grid.ndim;
    let vol_flat = vol.as_slice().expect("contiguous");
    let u = phi.data.as_slice().expect("contiguous");
    let g = grad_out.as_slice().expect("contiguous");
    let mut grad_vol = vec![F::zero(); grid.n];
    let mut grad_u = vec![F::zero(); grid.n * d];
    // scatter accumulation is sequential: conflicts across voxels are possible
    for flat in 0..grid.n {
        let go = g[flat];
        if go == F::zero() {
            continue;
        }
        let x = grid.coords(flat);
        let mut ax_interp = [AxisInterp {
            i0: 0,
            i1: 0,
            frac: F::zero(),
            clamped: false,
        }; 3];
        for ax in 0..d {
            let pos = c::<F>(x[ax] as f64) + u[flat * d + ax];
            ax_interp[ax] = axis_interp(pos, grid.shape[ax]);
        }
        for corner in 0..(1usize << d) {
            let mut w = F::one();
            let mut idx = 0usize;
            for ax in 0..d {
                let hi = (corner >> ax) & 1 == 1;
                let a = &ax_interp[ax];
                w = w * if hi { a.frac } else { F::one() - a.frac };
                idx += if hi { a.i1 } else { a.i0 } * grid.strides[ax];
            }
            grad_vol[idx] += go * w;
        }
        for ax in 0..d {
            if ax_interp[ax].clamped {
                continue;
            }
            let mut deriv = F::zero();
            for corner in 0..(1usize << d) {
                let mut w = F::one();
                let mut idx = 0usize;
                for a2 in 0..d {
                    let hi = (corner >> a2) & 1 == 1;
                    let a = &ax_interp[a2];
                    if a2 == ax {
                        w = w * if hi { F::one() } else { -F::one() };
                    } else {
                        w = w * if hi { a.frac } else { F::one() - a.frac };
                    }
                    idx += if hi { a.i1 } else { a.i0 } * grid.strides[a2];
                }
                deriv = deriv + w * vol_flat[idx];
            }
            grad_u[flat * d + ax] += go * deriv;
        }
    }
    let grad_vol = ArrayD::from_shape_vec(IxDyn(vol.shape()), grad_vol).expect("shape");
    let mut u_shape = vol.shape().to_vec();
    u_shape.push(d);
    let grad_u = DisplacementField {
        data: ArrayD::from_shape_vec(IxDyn(&u_shape), grad_u).expect("shape"),
    };
    Ok((grad_vol, grad_u))
}

/// Sample vector field `field` at positions `x + b(x)`; used by composition.
fn warp_vector<F: Real>(field: &[F], b: &[F], grid: &Grid, d: usize, out: &mut [F]) {
    par::for_each_chunk_mut(out, par::VOXEL_CHUNK * d, |chunk_idx, chunk| {
        let base = chunk_idx * par::VOXEL_CHUNK;
        for k in 0..chunk.len() / d {
            let flat = base + k;
            let x = grid.coords(flat);
            let mut pos = [F::zero(); 3];
            for ax in 0..d {
                pos[ax] = c::<F>(x[ax] as f64) + b[flat * d + ax];
            }
            let mut ax_interp = [AxisInterp {
                i0: 0,
                i1: 0,
                frac: F::zero(),
                clamped: false,
            }; 3];
            for ax in 0..d {
                ax_interp[ax] = axis_interp(pos[ax], grid.shape[ax]);
            }
            for comp in 0..d {
                let mut acc = F::zero();
                for corner in 0..(1usize << d) {
                    let mut w = F::one();
                    let mut idx = 0usize;
                    for ax in 0..d {
                        let hi = (corner >> ax) & 1 == 1;
                        let a = &ax_interp[ax];
                        w = w * if hi { a.frac } else { F::one() - a.frac };
                        idx += if hi { a.i1 } else { a.i0 } * grid.strides[ax];
                    }
                    acc = acc + w * field[idx * d + comp];
                }
                chunk[k * d + comp] = acc;
            }
        }
    });
}

/// Backward of [`warp_vector`]: accumulate gradients into `grad_field`
/// (sampled values) and `grad_b` (sampling positions).
fn warp_vector_backward<F: Real>(
    field: &[F],
    b: &[F],
    grid: &Grid,
    d: usize,
    grad_out: &[F],
    grad_field: &mut [F],
    grad_b: &mut [F],
) {
    for flat in 0..grid.n {
        let x = grid.coords(flat);
        let mut ax_interp = [AxisInterp {
            i0: 0,
            i1: 0,
            frac: F::zero(),
            clamped: false,
        }; 3];
        for ax in 0..d {
            let pos = c::<F>(x[ax] as f64) + b[flat * d + ax];
            ax_interp[ax] = axis_interp(pos, grid.shape[ax]);
        }
        for corner in 0..(1usize << d) {
            let mut w = F::one();
            let mut idx = 0usize;
            for ax in 0..d {
                let hi = (corner >> ax) & 1 == 1;
                let a = &ax_interp[ax];
                w = w * if hi { a.frac } else { F::one() - a.frac };
                idx += if hi { a.i1 } else { a.i0 } * grid.strides[ax];
            }
            for comp in 0..d {
                grad_field[idx * d + comp] += grad_out[flat * d + comp] * w;
            }
        }
        for ax in 0..d {
            if ax_interp[ax].clamped {
                continue;
            }
            let mut deriv = F::zero();
            for corner in 0..(1usize << d) {
                let mut w = F::one();
                let mut idx = 0usize;
                for a2 in 0..d {
                    let hi = (corner >> a2) & 1 == 1;
                    let a = &ax_interp[a2];
                    if a2 == ax {
                        w = w * if hi { F::one() } else { -F::one() };
                    } else {
                        w = w * if hi { a.frac } else { F::one() - a.frac };
                    }
                    idx += if hi { a.i1 } else { a.i0 } * grid.strides[a2];
                }
                let mut dot = F::zero();
                for comp in 0..d {
                    dot = dot + grad_out[flat * d + comp] * field[idx * d + comp];
                }
                deriv = deriv + w * dot;
            }
            grad_b[flat * d + ax] += deriv;
        }
    }
}

/// Compose displacements: result is `then(first(x))`, i.e.
/// `u(x) = u_first(x) + u_then(x + u_first(x))`.
pub fn compose<F: Real>(
    first: &DisplacementField<F>,
    then: &DisplacementField<F>,
) -> Result<DisplacementField<F>> {
    check_grids(first.spatial_shape(), then.spatial_shape())?;
    let grid = Grid::new(first.spatial_shape());
    let d = grid.ndim;
    let uf = first.data.as_slice().expect("contiguous");
    let ut = then.data.as_slice().expect("contiguous");
    let mut sampled = vec![F::zero(); grid.n * d];
    warp_vector(ut, uf, &grid, d, &mut sampled);
    for i in 0..sampled.len() {
        sampled[i] += uf[i];
    }
    Ok(DisplacementField {
        data: ArrayD::from_shape_vec(IxDyn(first.data.shape()), sampled).expect("shape"),
    })
}

/// Integrate a stationary velocity field with `ts` scaling-and-squaring
/// steps: `u_0 = v / 2^ts`, then `u <- u + u(x + u(x))` repeated `ts` times.
pub fn integrate_svf<F: Real>(v: &VelocityField<F>, ts: u32) -> Result<DisplacementField<F>> {
    Ok(integrate_svf_cached(v, ts)?.displacement())
}

/// Integrate `-v`, giving the inverse warp of [`integrate_svf`].
pub fn invert_svf<F: Real>(v: &VelocityField<F>, ts: u32) -> Result<DisplacementField<F>> {
    integrate_svf(&-v, ts)
}

/// Forward integration that retains per-step fields for the backward pass.
pub struct SvfCache<F: Real> {
    /// `steps[n]` is the field before composition step `n`; `steps[ts]` is final.
    steps: Vec<Vec<F>>,
    spatial: Vec<usize>,
    ts: u32,
}

pub fn integrate_svf_cached<F: Real>(v: &VelocityField<F>, ts: u32) -> Result<SvfCache<F>> {
    if ts < 1 {
        return Err(Error::InvalidInput(format!(
            "integration steps must be >= 1, got {ts}"
        )));
    }
    validate_field(&v.data)?;
    let grid = Grid::new(v.spatial_shape());
    let d = grid.ndim;
    let scale = c::<F>((0.5f64).powi(ts as i32));
    let mut u: Vec<F> = v
        .data
        .as_slice()
        .expect("contiguous")
        .iter()
        .map(|&x| x * scale)
        .collect();
    let mut steps = Vec::with_capacity(ts as usize + 1);
    let mut sampled = vec![F::zero(); u.len()];
    for _ in 0..ts {
        steps.push(u.clone());
        warp_vector(&u, &u, &grid, d, &mut sampled);
        for i in 0..u.len() {
            u[i] += sampled[i];
        }
    }
    steps.push(u);
    Ok(SvfCache {
        steps,
        spatial: v.spatial_shape().to_vec(),
        ts,
    })
}

impl<F: Real> SvfCache<F> {
    pub fn displacement(&self) -> DisplacementField<F> {
        let mut shape = self.spatial.clone();
        shape.push(self.spatial.len());
        DisplacementField {
            data: ArrayD::from_shape_vec(IxDyn(&shape), self.steps[self.ts as usize].clone())
                .expect("shape"),
        }
    }

    /// Backpropagate a gradient on the integrated displacement to the
    /// velocity field.
    pub fn backward(&self, grad_disp: &DisplacementField<F>) -> VelocityField<F> {
        let grid = Grid::new(&self.spatial);
        let d = grid.ndim;
        let mut g: Vec<F> = grad_disp.data.as_slice().expect("contiguous").to_vec();
        for n in (0..self.ts as usize).rev() {
            let u_n = &self.steps[n];
            let mut grad_field = vec![F::zero(); g.len()];
            let mut grad_b = vec![F::zero(); g.len()];
            warp_vector_backward(u_n, u_n, &grid, d, &g, &mut grad_field, &mut grad_b);
            for i in 0..g.len() {
                g[i] = g[i] + grad_field[i] + grad_b[i];
            }
        }
        let scale = c::<F>((0.5f64).powi(self.ts as i32));
        let mut shape = self.spatial.clone();
        shape.push(d);
        VelocityField {
            data: ArrayD::from_shape_vec(IxDyn(&shape), g.iter().map(|&x| x * scale).collect())
                .expect("shape"),
        }
    }
}

/// Jacobian determinant field `det(I + grad u)`.
pub fn jacobian_determinant<F: Real>(phi: &DisplacementField<F>) -> Result<ArrayD<F>> {
    let spatial = phi.spatial_shape().to_vec();
    if spatial.iter().any(|&n| n < 3) {
        return Err(Error::InvalidInput(format!(
            "jacobian requires >= 3 voxels per axis, got {spatial:?}"
        )));
    }
    let grid = Grid::new(&spatial);
    let d = grid.ndim;
    let u = phi.data.as_slice().expect("contiguous");
    let mut out = vec![F::zero(); grid.n];
    par::for_each_chunk_mut(&mut out, par::VOXEL_CHUNK, |chunk_idx, chunk| {
        let base = chunk_idx * par::VOXEL_CHUNK;
        for (k, o) in chunk.iter_mut().enumerate() {
            let flat = base + k;
            let x = grid.coords(flat);
            // jac[i][j] = d u_i / d x_j
            let mut jac = [[F::zero(); 3]; 3];
            for j in 0..d {
                let (lo, hi, scale) = if x[j] == 0 {
                    (flat, flat + grid.strides[j], F::one())
                } else if x[j] == grid.shape[j] - 1 {
                    (flat - grid.strides[j], flat, F::one())
                } else {
                    (flat - grid.strides[j], flat + grid.strides[j], c::<F>(0.5))
                };
                for i in 0..d {
                    jac[i][j] = (u[hi * d + i] - u[lo * d + i]) * scale;
                }
            }
            for i in 0..d {
                jac[i][i] += F::one();
            }
            *o = if d == 2 {
                jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]
            } else {
                jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                    - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                    + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
            };
        }
    });
    Ok(ArrayD::from_shape_vec(IxDyn(&spatial), out).expect("shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn const_field(spatial: &[usize], vec: &[f64]) -> VelocityField<f64> {
        let d = spatial.len();
        let mut shape = spatial.to_vec();
        shape.push(d);
        let n: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(vec);
        }
        VelocityField::new(ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()).unwrap()
    }

    #[test]
    fn zero_velocity_integrates_to_zero() {
        for ts in [1u32, 5, 16] {
            let v = VelocityField::<f64>::zeros(&[16, 16]);
            let u = integrate_svf(&v, ts).unwrap();
            assert!(u.data.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rejects_zero_steps() {
        let v = VelocityField::<f64>::zeros(&[8, 8]);
        assert!(integrate_svf(&v, 0).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let vol = ArrayD::from_shape_vec(
            IxDyn(&[8, 8]),
            (0..64).map(|i| (i as f64).sin()).collect(),
        )
        .unwrap();
        let phi = DisplacementField::<f64>::zeros(&[8, 8]);
        let out = warp_image(&vol, &phi, Interp::Linear).unwrap();
        assert_eq!(out, vol);
    }

    #[test]
    fn integer_shift_matches_index_shift() {
        let vol = ArrayD::from_shape_vec(
            IxDyn(&[16, 16]),
            (0..256).map(|i| (i as f64 * 0.37).cos()).collect(),
        )
        .unwrap();
        let phi = DisplacementField {
            data: const_field(&[16, 16], &[1.0, 0.0]).data,
        };
        let out = warp_image(&vol, &phi, Interp::Linear).unwrap();
        for i in 0..15 {
            for j in 0..16 {
                let diff: f64 = out[[i, j]] - vol[[i + 1, j]];
                assert!(diff.abs() < 1e-12, "interior shift mismatch at ({i},{j})");
            }
        }
    }

    #[test]
    fn warp_is_linear_in_volume() {
        let a = ArrayD::from_shape_vec(
            IxDyn(&[12, 12]),
            (0..144).map(|i| (i as f64 * 0.11).sin()).collect(),
        )
        .unwrap();
        let b = ArrayD::from_shape_vec(
            IxDyn(&[12, 12]),
            (0..144).map(|i| (i as f64 * 0.29).cos()).collect(),
        )
        .unwrap();
        let mut phi = DisplacementField::<f64>::zeros(&[12, 12]);
        for (i, x) in phi.data.iter_mut().enumerate() {
            *x = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
        }
        let combo = &a * 2.5 + &b * (-1.25);
        let w_combo = warp_image(&combo, &phi, Interp::Linear).unwrap();
        let w_a = warp_image(&a, &phi, Interp::Linear).unwrap();
        let w_b = warp_image(&b, &phi, Interp::Linear).unwrap();
        let recon = &w_a * 2.5 + &w_b * (-1.25);
        for (x, y) in w_combo.iter().zip(recon.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_of_identity_is_one() {
        let phi = DisplacementField::<f64>::zeros(&[9, 9]);
        let j = jacobian_determinant(&phi).unwrap();
        assert!(j.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn jacobian_of_uniform_scaling() {
        // u(x) = 0.1 x  =>  J = 1.1^D
        let mut phi = DisplacementField::<f64>::zeros(&[16, 16]);
        for i in 0..16 {
            for j in 0..16 {
                phi.data[[i, j, 0]] = 0.1 * i as f64;
                phi.data[[i, j, 1]] = 0.1 * j as f64;
            }
        }
        let j = jacobian_determinant(&phi).unwrap();
        for &x in j.iter() {
            assert!((x - 1.21).abs() < 1e-9, "got {x}");
        }
    }

    #[test]
    fn jacobian_of_full_fold_is_negative_one() {
        // u(x) = (-2 x0, 0)  =>  J = -1 everywhere
        let mut phi = DisplacementField::<f64>::zeros(&[12, 12]);
        for i in 0..12 {
            for j in 0..12 {
                phi.data[[i, j, 0]] = -2.0 * i as f64;
            }
        }
        let j = jacobian_determinant(&phi).unwrap();
        for &x in j.iter() {
            assert!((x + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let vol = ArrayD::from_shape_vec(IxDyn(&[8, 8]), vec![0.0f64; 64]).unwrap();
        let phi = DisplacementField::<f64>::zeros(&[9, 9]);
        assert!(warp_image(&vol, &phi, Interp::Linear).is_err());
    }
}
