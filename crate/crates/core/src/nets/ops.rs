//! Primitive network operations with explicit forward caches and backward
//! passes: convolution (im2col + GEMM), instance normalization, FiLM
//! modulation, leaky ReLU, nearest-neighbor upsampling, dense layers, and
//! row-wise L2 normalization.
//!
//! Activations are channel-first `[C, spatial...]`; dense layers operate on
//! `[rows, features]` matrices. All results are deterministic.

use crate::error::{Error, Result};
use crate::real::{c, Real};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Named gradient accumulator keyed by parameter path.
#[derive(Debug, Default)]
pub struct GradStore<F: Real> {
    map: std::collections::HashMap<String, Vec<F>>,
}

impl<F: Real> GradStore<F> {
    pub fn new() -> Self {
        GradStore {
            map: std::collections::HashMap::new(),
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: &[F]) {
        match self.map.get_mut(name) {
            Some(slot) => {
                debug_assert_eq!(slot.len(), grad.len(), "grad shape changed for {name}");
                for (s, g) in slot.iter_mut().zip(grad.iter()) {
                    *s += *g;
                }
            }
            None => {
                self.map.insert(name.to_string(), grad.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[F]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.map.keys().map(|s| s.as_str()).collect();
        names.sort_unstable();
        names
    }

    pub fn merge(&mut self, other: GradStore<F>) {
        for (name, grad) in other.map {
            self.accumulate(&name, &grad);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for grad in self.map.values_mut() {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    /// Global L2 norm across every stored gradient.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for name in self.names() {
            for &g in self.map[name].iter() {
                let x = g.as_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Parameter visitor callback: `(path, values)`.
pub type ParamFn<'a, F> = dyn FnMut(&str, &mut [F]) + 'a;

/// Accumulate a 2D gradient regardless of its memory layout (`dot` on
/// transposed views can yield column-major results).
fn accumulate_any<F: Real>(store: &mut GradStore<F>, name: &str, arr: &Array2<F>) {
    match arr.as_slice() {
        Some(s) => store.accumulate(name, s),
        None => {
            let v: Vec<F> = arr.iter().copied().collect();
            store.accumulate(name, &v);
        }
    }
}

// -- convolution ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv<F: Real> {
    /// `[c_out, c_in * k^d]`
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<F: Real> Conv<F> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * kernel.pow(d as u32);
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((c_out, fan_in), |_| {
            c::<F>(rng.gen_range(-bound..bound))
        });
        let b = Array1::from_shape_fn(c_out, |_| c::<F>(rng.gen_range(-bound..bound)));
        Conv {
            w,
            b,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    /// Zero-initialized variant (velocity head).
    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, d: usize) -> Self {
        let fan_in = c_in * kernel.pow(d as u32);
        Conv {
            w: Array2::zeros((c_out, fan_in)),
            b: Array1::zeros(c_out),
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn out_spatial(&self, spatial: &[usize]) -> Vec<usize> {
        let k = self.kernel;
        let pad = k / 2;
        spatial
            .iter()
            .map(|&n| (n + 2 * pad - k) / self.stride + 1)
            .collect()
    }

    pub fn forward(&self, x: &ArrayD<F>) -> (ArrayD<F>, ConvCache<F>) {
        let spatial = &x.shape()[1..];
        debug_assert_eq!(x.shape()[0], self.c_in);
        let out_spatial = self.out_spatial(spatial);
        let cols = im2col(x, self.kernel, self.stride);
        let mut out = self.w.dot(&cols);
        for (mut row, &bias) in out.rows_mut().into_iter().zip(self.b.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let mut shape = vec![self.c_out];
        shape.extend_from_slice(&out_spatial);
        let out_nd = ArrayD::from_shape_vec(IxDyn(&shape), out.into_raw_vec_and_offset().0)
            .expect("conv output shape");
        let cache = ConvCache {
            cols,
            in_shape: x.shape().to_vec(),
            out_spatial,
        };
        (out_nd, cache)
    }

    /// Backward pass; returns the input gradient when `want_input` is set
    /// and writes parameter gradients under `prefix` when `grads` is given.
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        grad_out: &ArrayD<F>,
        prefix: &str,
        grads: Option<&mut GradStore<F>>,
        want_input: bool,
    ) -> Option<ArrayD<F>> {
        let n_out: usize = cache.out_spatial.iter().product();
        let g = Array2::from_shape_vec(
            (self.c_out, n_out),
            grad_out.iter().copied().collect(),
        )
        .expect("grad shape");
        if let Some(store) = grads {
            let grad_w = g.dot(&cache.cols.t());
            let grad_b = g.sum_axis(ndarray::Axis(1));
            accumulate_any(store, &format!("{prefix}.w"), &grad_w);
            store.accumulate(
                &format!("{prefix}.b"),
                grad_b.as_slice().expect("contiguous"),
            );
        }
        if !want_input {
            return None;
        }
        let grad_cols = self.w.t().dot(&g);
        Some(col2im(
            &grad_cols,
            &cache.in_shape,
            self.kernel,
            self.stride,
        ))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<F>) {
        f(
            &format!("{prefix}.w"),
            self.w.as_slice_mut().expect("contiguous"),
        );
        f(
            &format!("{prefix}.b"),
            self.b.as_slice_mut().expect("contiguous"),
        );
    }
}

pub struct ConvCache<F: Real> {
    cols: Array2<F>,
    in_shape: Vec<usize>,
    out_spatial: Vec<usize>,
}

fn im2col<F: Real>(x: &ArrayD<F>, kernel: usize, stride: usize) -> Array2<F> {
    let c_in = x.shape()[0];
    let spatial = &x.shape()[1..];
    let d = spatial.len();
    let pad = (kernel / 2) as isize;
    let k_total = kernel.pow(d as u32);
    let out_spatial: Vec<usize> = spatial
        .iter()
        .map(|&n| (n + 2 * (pad as usize) - kernel) / stride + 1)
        .collect();
    let n_out: usize = out_spatial.iter().product();
    let xv = x.as_slice().expect("contiguous activation");
    let mut cols = Array2::<F>::zeros((c_in * k_total, n_out));
    let cols_slice = cols.as_slice_mut().expect("contiguous");
    // kernel offset decomposition per row
    if d == 2 {
        let (h, w) = (spatial[0], spatial[1]);
        let (oh, ow) = (out_spatial[0], out_spatial[1]);
        for ci in 0..c_in {
            let x_base = ci * h * w;
            for kz in 0..k_total {
                let ky = (kz / kernel) as isize - pad;
                let kx = (kz % kernel) as isize - pad;
                let row = (ci * k_total + kz) * n_out;
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = x_base + iy as usize * w;
                    let out_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols_slice[out_row + ox] = xv[in_row + ix as usize];
                    }
                }
            }
        }
    } else {
        let (dz, dy, dx) = (spatial[0], spatial[1], spatial[2]);
        let (oz, oy_n, ox_n) = (out_spatial[0], out_spatial[1], out_spatial[2]);
        for ci in 0..c_in {
            let x_base = ci * dz * dy * dx;
            for kz in 0..k_total {
                let koz = (kz / (kernel * kernel)) as isize - pad;
                let koy = ((kz / kernel) % kernel) as isize - pad;
                let kox = (kz % kernel) as isize - pad;
                let row = (ci * k_total + kz) * n_out;
                for o0 in 0..oz {
                    let i0 = (o0 * stride) as isize + koz;
                    if i0 < 0 || i0 >= dz as isize {
                        continue;
                    }
                    for o1 in 0..oy_n {
                        let i1 = (o1 * stride) as isize + koy;
                        if i1 < 0 || i1 >= dy as isize {
                            continue;
                        }
                        let in_row = x_base + (i0 as usize * dy + i1 as usize) * dx;
                        let out_row = row + (o0 * oy_n + o1) * ox_n;
                        for o2 in 0..ox_n {
                            let i2 = (o2 * stride) as isize + kox;
                            if i2 < 0 || i2 >= dx as isize {
                                continue;
                            }
                            cols_slice[out_row + o2] = xv[in_row + i2 as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(
    grad_cols: &Array2<F>,
    in_shape: &[usize],
    kernel: usize,
    stride: usize,
) -> ArrayD<F> {
    let c_in = in_shape[0];
    let spatial = &in_shape[1..];
    let d = spatial.len();
    let pad = (kernel / 2) as isize;
    let k_total = kernel.pow(d as u32);
    let out_spatial: Vec<usize> = spatial
        .iter()
        .map(|&n| (n + 2 * (pad as usize) - kernel) / stride + 1)
        .collect();
    let n_out: usize = out_spatial.iter().product();
    let gv = grad_cols.as_slice().expect("contiguous");
    let mut grad_x = vec![F::zero(); in_shape.iter().product()];
    if d == 2 {
        let (h, w) = (spatial[0], spatial[1]);
        let (oh, ow) = (out_spatial[0], out_spatial[1]);
        for ci in 0..c_in {
            let x_base = ci * h * w;
            for kz in 0..k_total {
                let ky = (kz / kernel) as isize - pad;
                let kx = (kz % kernel) as isize - pad;
                let row = (ci * k_total + kz) * n_out;
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = x_base + iy as usize * w;
                    let out_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride) as isize + kx;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        grad_x[in_row + ix as usize] += gv[out_row + ox];
                    }
                }
            }
        }
    } else {
        let (dz, dy, dx) = (spatial[0], spatial[1], spatial[2]);
        let (oz, oy_n, ox_n) = (out_spatial[0], out_spatial[1], out_spatial[2]);
        for ci in 0..c_in {
            let x_base = ci * dz * dy * dx;
            for kz in 0..k_total {
                let koz = (kz / (kernel * kernel)) as isize - pad;
                let koy = ((kz / kernel) % kernel) as isize - pad;
                let kox = (kz % kernel) as isize - pad;
                let row = (ci * k_total + kz) * n_out;
                for o0 in 0..oz {
                    let i0 = (o0 * stride) as isize + koz;
                    if i0 < 0 || i0 >= dz as isize {
                        continue;
                    }
                    for o1 in 0..oy_n {
                        let i1 = (o1 * stride) as isize + koy;
                        if i1 < 0 || i1 >= dy as isize {
                            continue;
                        }
                        let in_row = x_base + (i0 as usize * dy + i1 as usize) * dx;
                        let out_row = row + (o0 * oy_n + o1) * ox_n;
                        for o2 in 0..ox_n {
                            let i2 = (o2 * stride) as isize + kox;
                            if i2 < 0 || i2 >= dx as isize {
                                continue;
                            }
                            grad_x[in_row + i2 as usize] += gv[out_row + o2];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(in_shape), grad_x).expect("shape")
}

// -- instance normalization ----------------------------------------------------

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct InstanceNorm<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Real> InstanceNorm<F> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn forward(&self, x: &ArrayD<F>) -> (ArrayD<F>, NormCache<F>) {
        let ch = x.shape()[0];
        let s: usize = x.shape()[1..].iter().product();
        let xv = x.as_slice().expect("contiguous");
        let mut out = vec![F::zero(); xv.len()];
        let mut xhat = vec![F::zero(); xv.len()];
        let mut inv_std = vec![F::zero(); ch];
        for cidx in 0..ch {
            let seg = &xv[cidx * s..(cidx + 1) * s];
            let mut mean = F::zero();
            for &v in seg {
                mean += v;
            }
            mean /= c::<F>(s as f64);
            let mut var = F::zero();
            for &v in seg {
                let dv = v - mean;
                var += dv * dv;
            }
            var /= c::<F>(s as f64);
            let istd = F::one() / (var + c::<F>(NORM_EPS)).sqrt();
            inv_std[cidx] = istd;
            let (g, bta) = (self.gamma[cidx], self.beta[cidx]);
            for i in 0..s {
                let xh = (seg[i] - mean) * istd;
                xhat[cidx * s + i] = xh;
                out[cidx * s + i] = g * xh + bta;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(x.shape()), out).expect("shape");
        (
            out,
            NormCache {
                xhat,
                inv_std,
                channels: ch,
                spatial_len: s,
                shape: x.shape().to_vec(),
            },
        )
    }

    pub fn backward(
        &self,
        cache: &NormCache<F>,
        grad_out: &ArrayD<F>,
        prefix: &str,
        grads: Option<&mut GradStore<F>>,
    ) -> ArrayD<F> {
        let ch = cache.channels;
        let s = cache.spatial_len;
        let g = grad_out.as_slice().expect("contiguous");
        let mut grad_x = vec![F::zero(); g.len()];
        let mut grad_gamma = vec![F::zero(); ch];
        let mut grad_beta = vec![F::zero(); ch];
        let sn = c::<F>(s as f64);
        for cidx in 0..ch {
            let xh = &cache.xhat[cidx * s..(cidx + 1) * s];
            let gseg = &g[cidx * s..(cidx + 1) * s];
            let mut sum_g = F::zero();
            let mut sum_gx = F::zero();
            for i in 0..s {
                sum_g += gseg[i];
                sum_gx += gseg[i] * xh[i];
            }
            grad_gamma[cidx] = sum_gx;
            grad_beta[cidx] = sum_g;
            let coeff = self.gamma[cidx] * cache.inv_std[cidx];
            let mean_g = sum_g / sn;
            let mean_gx = sum_gx / sn;
            for i in 0..s {
                grad_x[cidx * s + i] = coeff * (gseg[i] - mean_g - xh[i] * mean_gx);
            }
        }
        if let Some(store) = grads {
            store.accumulate(&format!("{prefix}.gamma"), &grad_gamma);
            store.accumulate(&format!("{prefix}.beta"), &grad_beta);
        }
        ArrayD::from_shape_vec(IxDyn(&cache.shape), grad_x).expect("shape")
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<F>) {
        f(
            &format!("{prefix}.gamma"),
            self.gamma.as_slice_mut().expect("contiguous"),
        );
        f(
            &format!("{prefix}.beta"),
            self.beta.as_slice_mut().expect("contiguous"),
        );
    }
}

pub struct NormCache<F: Real> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    channels: usize,
    spatial_len: usize,
    shape: Vec<usize>,
}

// -- FiLM modulation -------------------------------------------------------------

/// Per-channel scale/shift produced by the hypernetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct Film<F: Real> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

impl<F: Real> Film<F> {
    pub fn identity(channels: usize) -> Self {
        Film {
            gamma: vec![F::one(); channels],
            beta: vec![F::zero(); channels],
        }
    }
}

pub fn film_forward<F: Real>(x: &ArrayD<F>, film: &Film<F>) -> (ArrayD<F>, FilmCache<F>) {
    let ch = x.shape()[0];
    let s: usize = x.shape()[1..].iter().product();
    let xv = x.as_slice().expect("contiguous");
    let mut out = vec![F::zero(); xv.len()];
    for cidx in 0..ch {
        let (g, b) = (film.gamma[cidx], film.beta[cidx]);
        for i in 0..s {
            out[cidx * s + i] = g * xv[cidx * s + i] + b;
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(x.shape()), out).expect("shape"),
        FilmCache {
            x: xv.to_vec(),
            channels: ch,
            spatial_len: s,
            shape: x.shape().to_vec(),
        },
    )
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn film_backward<F: Real>(
    cache: &FilmCache<F>,
    film: &Film<F>,
    grad_out: &ArrayD<F>,
) -> (ArrayD<F>, Vec<F>, Vec<F>) {
    let ch = cache.channels;
    let s = cache.spatial_len;
    let g = grad_out.as_slice().expect("contiguous");
    let mut grad_x = vec![F::zero(); g.len()];
    let mut grad_gamma = vec![F::zero(); ch];
    let mut grad_beta = vec![F::zero(); ch];
    for cidx in 0..ch {
        let fg = film.gamma[cidx];
        let mut sg = F::zero();
        let mut sgx = F::zero();
        for i in 0..s {
            let gi = g[cidx * s + i];
            grad_x[cidx * s + i] = gi * fg;
            sg += gi;
            sgx += gi * cache.x[cidx * s + i];
        }
        grad_gamma[cidx] = sgx;
        grad_beta[cidx] = sg;
    }
    (
        ArrayD::from_shape_vec(IxDyn(&cache.shape), grad_x).expect("shape"),
        grad_gamma,
        grad_beta,
    )
}

pub struct FilmCache<F: Real> {
    x: Vec<F>,
    channels: usize,
    spatial_len: usize,
    shape: Vec<usize>,
}

// -- activations -----------------------------------------------------------------

pub fn leaky_relu<F: Real>(x: &ArrayD<F>, slope: f64) -> ArrayD<F> {
    let a = c::<F>(slope);
    x.mapv(|v| if v > F::zero() { v } else { v * a })
}

/// Backward uses the forward *input* sign.
pub fn leaky_relu_backward<F: Real>(x: &ArrayD<F>, grad_out: &ArrayD<F>, slope: f64) -> ArrayD<F> {
    let a = c::<F>(slope);
    let mut g = grad_out.clone();
    for (gi, &xi) in g.iter_mut().zip(x.iter()) {
        if xi <= F::zero() {
            *gi *= a;
        }
    }
    g
}

// -- nearest-neighbor 2x upsampling ------------------------------------------------

pub fn upsample2<F: Real>(x: &ArrayD<F>) -> ArrayD<F> {
    let ch = x.shape()[0];
    let spatial = &x.shape()[1..];
    let d = spatial.len();
    let out_spatial: Vec<usize> = spatial.iter().map(|&n| n * 2).collect();
    let mut shape = vec![ch];
    shape.extend_from_slice(&out_spatial);
    let xv = x.as_slice().expect("contiguous");
    let n_in: usize = spatial.iter().product();
    let n_out: usize = out_spatial.iter().product();
    let mut out = vec![F::zero(); ch * n_out];
    if d == 2 {
        let (h, w) = (spatial[0], spatial[1]);
        for cidx in 0..ch {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[cidx * n_in + i * w + j];
                    let base = cidx * n_out + 2 * i * 2 * w + 2 * j;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + 2 * w] = v;
                    out[base + 2 * w + 1] = v;
                }
            }
        }
    } else {
        let (dz, dy, dx) = (spatial[0], spatial[1], spatial[2]);
        let (wy, wx) = (2 * dy, 2 * dx);
        for cidx in 0..ch {
            for z in 0..dz {
                for y in 0..dy {
                    for xx in 0..dx {
                        let v = xv[cidx * n_in + (z * dy + y) * dx + xx];
                        for oz in 0..2 {
                            for oy in 0..2 {
                                for ox in 0..2 {
                                    let idx = cidx * n_out
                                        + ((2 * z + oz) * wy + 2 * y + oy) * wx
                                        + 2 * xx
                                        + ox;
                                    out[idx] = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape")
}

pub fn upsample2_backward<F: Real>(grad_out: &ArrayD<F>, in_shape: &[usize]) -> ArrayD<F> {
    let ch = in_shape[0];
    let spatial = &in_shape[1..];
    let d = spatial.len();
    let g = grad_out.as_slice().expect("contiguous");
    let n_in: usize = spatial.iter().product();
    let n_out: usize = grad_out.shape()[1..].iter().product();
    let mut grad = vec![F::zero(); ch * n_in];
    if d == 2 {
        let (h, w) = (spatial[0], spatial[1]);
        for cidx in 0..ch {
            for i in 0..h {
                for j in 0..w {
                    let base = cidx * n_out + 2 * i * 2 * w + 2 * j;
                    grad[cidx * n_in + i * w + j] =
                        g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
                }
            }
        }
    } else {
        let (dz, dy, dx) = (spatial[0], spatial[1], spatial[2]);
        let (wy, wx) = (2 * dy, 2 * dx);
        for cidx in 0..ch {
            for z in 0..dz {
                for y in 0..dy {
                    for xx in 0..dx {
                        let mut acc = F::zero();
                        for oz in 0..2 {
                            for oy in 0..2 {
                                for ox in 0..2 {
                                    acc += g[cidx * n_out
                                        + ((2 * z + oz) * wy + 2 * y + oy) * wx
                                        + 2 * xx
                                        + ox];
                                }
                            }
                        }
                        grad[cidx * n_in + (z * dy + y) * dx + xx] = acc;
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(in_shape), grad).expect("shape")
}

// -- dense layer -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    /// `[out, in]`
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| c::<F>(rng.gen_range(-bound..bound))),
            b: Array1::from_shape_fn(out_dim, |_| c::<F>(rng.gen_range(-bound..bound))),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `x: [n, in] -> [n, out]`
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut out = x.dot(&self.w.t());
        for mut row in out.rows_mut() {
            row += &self.b;
        }
        out
    }

    /// Returns `grad_x`; parameter gradients accumulate under `prefix`.
    pub fn backward(
        &self,
        x: &Array2<F>,
        grad_out: &Array2<F>,
        prefix: &str,
        grads: Option<&mut GradStore<F>>,
        want_input: bool,
    ) -> Option<Array2<F>> {
        if let Some(store) = grads {
            let grad_w = grad_out.t().dot(x);
            let grad_b = grad_out.sum_axis(ndarray::Axis(0));
            accumulate_any(store, &format!("{prefix}.w"), &grad_w);
            store.accumulate(
                &format!("{prefix}.b"),
                grad_b.as_slice().expect("contiguous"),
            );
        }
        want_input.then(|| grad_out.dot(&self.w))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<F>) {
        f(
            &format!("{prefix}.w"),
            self.w.as_slice_mut().expect("contiguous"),
        );
        f(
            &format!("{prefix}.b"),
            self.b.as_slice_mut().expect("contiguous"),
        );
    }
}

pub fn relu<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Real>(x: &Array2<F>, grad_out: &Array2<F>) -> Array2<F> {
    let mut g = grad_out.clone();
    for (gi, &xi) in g.iter_mut().zip(x.iter()) {
        if xi <= F::zero() {
            *gi = F::zero();
        }
    }
    g
}

// -- row-wise L2 normalization ------------------------------------------------------

pub const L2_GUARD: f64 = 1e-12;

/// Normalize each row to unit norm. Rows with pre-normalization norm below
/// the guard are rejected (degenerate embedding contract).
pub fn l2_normalize_rows<F: Real>(x: &Array2<F>) -> Result<(Array2<F>, Vec<F>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mut sq = F::zero();
        for &v in row.iter() {
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm.as_f64() < L2_GUARD {
            return Err(Error::Numerical(
                "zero vector reached embedding normalization".into(),
            ));
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backward of row normalization: `grad_x = (g - y (y . g)) / norm`.
pub fn l2_normalize_rows_backward<F: Real>(
    normalized: &Array2<F>,
    norms: &[F],
    grad_out: &Array2<F>,
) -> Array2<F> {
    let mut grad = grad_out.clone();
    for ((mut grow, yrow), &norm) in grad
        .rows_mut()
        .into_iter()
        .zip(normalized.rows())
        .zip(norms.iter())
    {
        let mut dot = F::zero();
        for (&g, &y) in grow.iter().zip(yrow.iter()) {
            dot += g * y;
        }
        for (g, &y) in grow.iter_mut().zip(yrow.iter()) {
            *g = (*g - y * dot) / norm;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::IxDyn;

    fn fd_check(
        f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
        x: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        probes: &[usize],
        tol: f64,
    ) {
        let h = 1e-6;
        for &i in probes {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "probe {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn conv_backward_matches_fd() {
        let mut rng = substream(1, "conv-test", &[]);
        for stride in [1usize, 2] {
            let conv = Conv::<f64>::new(2, 3, 3, stride, 2, &mut rng);
            let x = ArrayD::from_shape_fn(IxDyn(&[2, 6, 6]), |_| {
                rand::Rng::gen_range(&mut rng, -1.0..1.0)
            });
            // scalar objective: weighted sum of outputs
            let (y, cache) = conv.forward(&x);
            let wsum = ArrayD::from_shape_fn(IxDyn(y.shape()), |ix| {
                ((ix[0] + 2 * ix[1] + 3 * ix[2]) % 5) as f64 * 0.25 - 0.4
            });
            let mut grads = GradStore::new();
            let gx = conv
                .backward(&cache, &wsum, "conv", Some(&mut grads), true)
                .unwrap();
            let mut f = |xx: &ArrayD<f64>| {
                let (yy, _) = conv.forward(xx);
                (&yy * &wsum).sum()
            };
            fd_check(&mut f, &x, &gx, &[0, 5, 17, 40, 71], 1e-5);
            // weight gradient via FD on one weight
            let (gw_name, idx) = ("conv.w", 7usize);
            let gw = grads.get(gw_name).unwrap()[idx];
            let mut cp = conv.clone();
            let h = 1e-6;
            cp.w.as_slice_mut().unwrap()[idx] += h;
            let (yp, _) = cp.forward(&x);
            cp.w.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let (ym, _) = cp.forward(&x);
            let fd = ((&yp * &wsum).sum() - (&ym * &wsum).sum()) / (2.0 * h);
            assert!((fd - gw).abs() / fd.abs().max(1e-8) < 1e-5, "fd {fd} vs {gw}");
        }
    }

    #[test]
    fn conv3d_shapes() {
        let mut rng = substream(2, "conv3d", &[]);
        let conv = Conv::<f32>::new(1, 4, 3, 2, 3, &mut rng);
        let x = ArrayD::<f32>::zeros(IxDyn(&[1, 8, 8, 8]));
        let (y, _) = conv.forward(&x);
        assert_eq!(y.shape(), &[4, 4, 4, 4]);
    }

    #[test]
    fn instance_norm_backward_matches_fd() {
        let mut rng = substream(3, "in-test", &[]);
        let norm = InstanceNorm::<f64>::new(3);
        let x = ArrayD::from_shape_fn(IxDyn(&[3, 5, 5]), |_| {
            rand::Rng::gen_range(&mut rng, -1.0..1.0)
        });
        let wsum = ArrayD::from_shape_fn(IxDyn(&[3, 5, 5]), |ix| {
            ((ix[0] + ix[1] * ix[2]) % 7) as f64 * 0.3 - 0.8
        });
        let (_, cache) = norm.forward(&x);
        let gx = norm.backward(&cache, &wsum, "in", None);
        let mut f = |xx: &ArrayD<f64>| {
            let (yy, _) = norm.forward(xx);
            (&yy * &wsum).sum()
        };
        fd_check(&mut f, &x, &gx, &[0, 11, 30, 62, 74], 1e-4);
    }

    #[test]
    fn film_identity_is_bit_exact() {
        let mut rng = substream(4, "film-test", &[]);
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 6, 6]), |_| {
            rand::Rng::gen_range(&mut rng, -2.0f32..2.0)
        });
        let film = Film::identity(4);
        let (y, _) = film_forward(&x, &film);
        assert_eq!(y, x);
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |ix| {
            (ix[0] * 100 + ix[1] * 10 + ix[2]) as f64
        });
        let y = upsample2(&x);
        assert_eq!(y.shape(), &[2, 6, 8]);
        assert_eq!(y[[1, 5, 7]], x[[1, 2, 3]]);
        let g = upsample2_backward(&y, &[2, 3, 4]);
        // each input cell collects its 4 children
        assert_eq!(g[[1, 2, 3]], 4.0 * x[[1, 2, 3]]);
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = substream(5, "lin-test", &[]);
        let lin = Linear::<f64>::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let wsum = Array2::from_shape_fn((5, 3), |(i, j)| ((i + 2 * j) % 4) as f64 * 0.4 - 0.5);
        let gx = lin
            .backward(&x, &wsum, "lin", None, true)
            .unwrap();
        let h = 1e-6;
        for idx in [0usize, 7, 19] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd: f64 = ((&lin.forward(&xp) * &wsum).sum() - (&lin.forward(&xm) * &wsum).sum())
                / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-7, "fd {fd} vs {an}");
        }
    }

    #[test]
    fn l2_normalize_unit_norm_and_guard() {
        let x = Array2::from_shape_vec((2, 3), vec![3.0, 4.0, 0.0, 0.2, -0.1, 0.5]).unwrap();
        let (y, _) = l2_normalize_rows(&x).unwrap();
        for row in y.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let zero = Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 0.0]).unwrap();
        assert!(l2_normalize_rows(&zero).is_err());
    }

    #[test]
    fn l2_normalize_backward_matches_fd() {
        let x = Array2::from_shape_vec((2, 4), vec![0.4, -0.3, 0.8, 0.1, 1.2, 0.5, -0.7, 0.3])
            .unwrap();
        let wsum =
            Array2::from_shape_vec((2, 4), vec![0.2, 0.9, -0.4, 0.6, -0.3, 0.8, 0.5, -0.2])
                .unwrap();
        let (y, norms) = l2_normalize_rows(&x).unwrap();
        let gx = l2_normalize_rows_backward(&y, &norms, &wsum);
        let h = 1e-6;
        for idx in [0usize, 3, 5] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fp: f64 = (&l2_normalize_rows(&xp).unwrap().0 * &wsum).sum();
            let fm: f64 = (&l2_normalize_rows(&xm).unwrap().0 * &wsum).sum();
            let fd = (fp - fm) / (2.0 * h);
            let an = gx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-7, "fd {fd} vs {an}");
        }
    }
}
