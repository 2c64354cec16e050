//! Registration U-Net with FiLM conditioning, and the hypernetwork that
//! generates the per-site modulations from the regularization weight.
//!
//! The U-Net has constant channel width `ch`, depth-4 encoder/decoder with
//! 2x resampling, and a zero-initialized velocity head with a fixed 10x
//! output gain. Every normalization site is followed by a FiLM modulation;
//! with zero-initialized hypernetwork heads the modulation is exactly the
//! identity, so the conditioned and unconditioned networks coincide at
//! initialization.

use super::ops::{
    film_backward, film_forward, leaky_relu, leaky_relu_backward, relu, relu_backward, upsample2,
    upsample2_backward, Conv, ConvCache, Film, FilmCache, GradStore, InstanceNorm, Linear,
    NormCache, ParamFn,
};
use crate::error::{Error, Result};
use crate::geometry::VelocityField;
use crate::real::{c, Real};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const OUTPUT_GAIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegNetSpec {
    /// Constant channel width (64 or 256 in the benchmarked settings).
    pub ch: usize,
    /// Encoder/decoder depth with 2x resampling per level.
    pub depth: usize,
}

impl Default for RegNetSpec {
    fn default() -> Self {
        RegNetSpec { ch: 64, depth: 4 }
    }
}

impl RegNetSpec {
    pub fn film_sites(&self) -> usize {
        1 + 2 * self.depth
    }

    /// Closed-form parameter count for dimensionality `d` with kernel 3:
    /// stem `ch (2 k + 1) + 2 ch`, each encoder `ch (ch k + 1) + 2 ch`,
    /// each decoder `ch (2 ch k + 1) + 2 ch`, head `d (ch k + 1)`.
    pub fn param_count(&self, d: usize) -> usize {
        let k = 3usize.pow(d as u32);
        let ch = self.ch;
        let stem = ch * (2 * k + 1) + 2 * ch;
        let enc = self.depth * (ch * (ch * k + 1) + 2 * ch);
        let dec = self.depth * (ch * (2 * ch * k + 1) + 2 * ch);
        let head = d * (ch * k + 1);
        stem + enc + dec + head
    }
}

struct RegBlock<F: Real> {
    conv: Conv<F>,
    norm: InstanceNorm<F>,
}

impl<F: Real> RegBlock<F> {
    fn new(c_in: usize, c_out: usize, stride: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        RegBlock {
            conv: Conv::new(c_in, c_out, 3, stride, d, rng),
            norm: InstanceNorm::new(c_out),
        }
    }

    fn forward(&self, x: &ArrayD<F>, film: &Film<F>) -> (ArrayD<F>, RegBlockCache<F>) {
        let (conv_out, conv_cache) = self.conv.forward(x);
        let (norm_out, norm_cache) = self.norm.forward(&conv_out);
        let (film_out, film_cache) = film_forward(&norm_out, film);
        let act = leaky_relu(&film_out, LEAKY_SLOPE);
        (
            act,
            RegBlockCache {
                conv_cache,
                norm_cache,
                film_cache,
                film_out,
            },
        )
    }

    /// Returns `(grad_input, film_grad)`.
    fn backward(
        &self,
        cache: &RegBlockCache<F>,
        film: &Film<F>,
        grad_act: &ArrayD<F>,
        prefix: &str,
        grads: &mut GradStore<F>,
        want_input: bool,
    ) -> (Option<ArrayD<F>>, Film<F>) {
        let g = leaky_relu_backward(&cache.film_out, grad_act, LEAKY_SLOPE);
        let (g, film_gamma, film_beta) = film_backward(&cache.film_cache, film, &g);
        let g = self
            .norm
            .backward(&cache.norm_cache, &g, &format!("{prefix}.norm"), Some(grads));
        let g_in = self
            .conv
            .backward(&cache.conv_cache, &g, &format!("{prefix}.conv"), Some(grads), want_input);
        (
            g_in,
            Film {
                gamma: film_gamma,
                beta: film_beta,
            },
        )
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamFn<F>) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
    }
}

struct RegBlockCache<F: Real> {
    conv_cache: ConvCache<F>,
    norm_cache: NormCache<F>,
    film_cache: FilmCache<F>,
    film_out: ArrayD<F>,
}

pub struct RegNet<F: Real> {
    stem: RegBlock<F>,
    enc: Vec<RegBlock<F>>,
    dec: Vec<RegBlock<F>>,
    head: Conv<F>,
    pub spec: RegNetSpec,
    dim: usize,
}

pub struct RegNetCache<F: Real> {
    stem: RegBlockCache<F>,
    enc: Vec<RegBlockCache<F>>,
    dec: Vec<(Vec<usize>, RegBlockCache<F>)>,
    head_cache: ConvCache<F>,
    films: Vec<Film<F>>,
    spatial: Vec<usize>,
}

impl<F: Real> RegNet<F> {
    pub fn new(spec: RegNetSpec, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidInput(format!("dim must be 2 or 3, got {dim}")));
        }
        if spec.ch == 0 || spec.depth == 0 {
            return Err(Error::Config("ch and depth must be positive".into()));
        }
        let ch = spec.ch;
        let stem = RegBlock::new(2, ch, 1, dim, rng);
        let enc = (0..spec.depth)
            .map(|_| RegBlock::new(ch, ch, 2, dim, rng))
            .collect();
        let dec = (0..spec.depth)
            .map(|_| RegBlock::new(2 * ch, ch, 1, dim, rng))
            .collect();
        let head = Conv::zeros(ch, dim, 3, 1, dim);
        Ok(RegNet {
            stem,
            enc,
            dec,
            head,
            spec,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_count(&self) -> usize {
        self.stem.conv.param_count()
            + self.stem.norm.param_count()
            + self
                .enc
                .iter()
                .chain(self.dec.iter())
                .map(|b| b.conv.param_count() + b.norm.param_count())
                .sum::<usize>()
            + self.head.param_count()
    }

    fn check_inputs(&self, i1: &ArrayD<F>, i2: &ArrayD<F>) -> Result<()> {
        if i1.shape() != i2.shape() {
            return Err(Error::ShapeMismatch(format!(
                "inputs {:?} vs {:?}",
                i1.shape(),
                i2.shape()
            )));
        }
        if i1.ndim() != self.dim + 1 || i1.shape()[0] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected [1, spatial...] with {} spatial dims, got {:?}",
                self.dim,
                i1.shape()
            )));
        }
        let div = 1usize << self.spec.depth;
        for &n in &i1.shape()[1..] {
            if n % div != 0 {
                return Err(Error::InvalidInput(format!(
                    "spatial extent {n} must be divisible by {div} for depth {}",
                    self.spec.depth
                )));
            }
        }
        Ok(())
    }

    /// Predict a stationary velocity field from the concatenated pair under
    /// the given FiLM modulations (one per site).
    pub fn forward(
        &self,
        i1: &ArrayD<F>,
        i2: &ArrayD<F>,
        films: &[Film<F>],
    ) -> Result<(VelocityField<F>, RegNetCache<F>)> {
        self.check_inputs(i1, i2)?;
        if films.len() != self.spec.film_sites() {
            return Err(Error::InvalidInput(format!(
                "expected {} FiLM sites, got {}",
                self.spec.film_sites(),
                films.len()
            )));
        }
        let spatial = i1.shape()[1..].to_vec();
        let x = ndarray::concatenate(Axis(0), &[i1.view(), i2.view()])
            .expect("concatenate inputs");
        let x = x.into_dyn();
        let (a0, stem_cache) = self.stem.forward(&x, &films[0]);
        let mut skips = vec![a0];
        let mut enc_caches = Vec::with_capacity(self.spec.depth);
        for (i, block) in self.enc.iter().enumerate() {
            let (a, cache) = block.forward(skips.last().unwrap(), &films[1 + i]);
            skips.push(a);
            enc_caches.push(cache);
        }
        let mut act = skips.pop().unwrap(); // deepest activation
        let mut dec_caches = Vec::with_capacity(self.spec.depth);
        for (j, block) in self.dec.iter().enumerate() {
            let up_in_shape = act.shape().to_vec();
            let up = upsample2(&act);
            let skip = skips.pop().unwrap();
            let cat = ndarray::concatenate(Axis(0), &[up.view(), skip.view()])
                .expect("concatenate skip")
                .into_dyn();
            let (a, cache) = block.forward(&cat, &films[1 + self.spec.depth + j]);
            act = a;
            dec_caches.push((up_in_shape, cache));
        }
        let (head_raw, head_cache) = self.head.forward(&act);
        let gain = c::<F>(OUTPUT_GAIN);
        let v_cf = head_raw.mapv(|v| v * gain);
        let velocity = channel_first_to_field(&v_cf, &spatial);
        Ok((
            velocity,
            RegNetCache {
                stem: stem_cache,
                enc: enc_caches,
                dec: dec_caches,
                head_cache,
                films: films.to_vec(),
                spatial,
            },
        ))
    }

    /// Backward from a velocity-field gradient. Parameter gradients
    /// accumulate under `regnet.*`; the per-site FiLM gradients are
    /// returned for the hypernetwork.
    pub fn backward(
        &self,
        cache: &RegNetCache<F>,
        grad_v: &VelocityField<F>,
        grads: &mut GradStore<F>,
    ) -> Vec<Film<F>> {
        let depth = self.spec.depth;
        let mut film_grads: Vec<Option<Film<F>>> = vec![None; self.spec.film_sites()];
        let gain = c::<F>(OUTPUT_GAIN);
        let g_head = field_to_channel_first(grad_v).mapv(|v| v * gain);
        let mut g = self
            .head
            .backward(&cache.head_cache, &g_head, "regnet.head", Some(grads), true)
            .expect("input gradient");
        // decoder chain (reverse) with skip gradient collection
        let mut skip_grads: Vec<Option<ArrayD<F>>> = vec![None; depth + 1];
        for j in (0..depth).rev() {
            let (up_in_shape, block_cache) = &cache.dec[j];
            let site = 1 + depth + j;
            let (g_cat, fg) = self.dec[j].backward(
                block_cache,
                &cache.films[site],
                &g,
                &format!("regnet.dec{j}"),
                grads,
                true,
            );
            film_grads[site] = Some(fg);
            let g_cat = g_cat.expect("input gradient");
            let ch = self.spec.ch;
            let up_grad = g_cat.slice_axis(Axis(0), ndarray::Slice::from(0..ch)).to_owned();
            let skip_grad = g_cat
                .slice_axis(Axis(0), ndarray::Slice::from(ch..2 * ch))
                .to_owned();
            // decoder j consumed skip a_{depth-1-j}
            skip_grads[depth - 1 - j] = Some(skip_grad.into_dyn());
            g = upsample2_backward(&up_grad.into_dyn(), up_in_shape);
        }
        // encoder chain: g currently holds the gradient on a_depth
        for i in (0..depth).rev() {
            if let Some(sg) = &skip_grads[i + 1] {
                g = &g + sg;
            }
            let site = 1 + i;
            let (g_in, fg) = self.enc[i].backward(
                &cache.enc[i],
                &cache.films[site],
                &g,
                &format!("regnet.enc{i}"),
                grads,
                true,
            );
            film_grads[site] = Some(fg);
            g = g_in.expect("input gradient");
        }
        if let Some(sg) = &skip_grads[0] {
            g = &g + sg;
        }
        let (_, fg) = self
            .stem
            .backward(&cache.stem, &cache.films[0], &g, "regnet.stem", grads, false);
        film_grads[0] = Some(fg);
        film_grads.into_iter().map(|f| f.expect("all sites")).collect()
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<F>) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, b) in self.enc.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.enc{i}"), f);
        }
        for (j, b) in self.dec.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.dec{j}"), f);
        }
        self.head.visit(&format!("{prefix}.head"), f);
    }
}

/// `[D, spatial...] -> spatial + [D]`
pub fn channel_first_to_field<F: Real>(v: &ArrayD<F>, spatial: &[usize]) -> VelocityField<F> {
    let d = spatial.len();
    let s: usize = spatial.iter().product();
    let vv = v.as_slice().expect("contiguous");
    let mut out = vec![F::zero(); s * d];
    for ax in 0..d {
        for i in 0..s {
            out[i * d + ax] = vv[ax * s + i];
        }
    }
    let mut shape = spatial.to_vec();
    shape.push(d);
    VelocityField {
        data: ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape"),
    }
}

/// `spatial + [D] -> [D, spatial...]`
pub fn field_to_channel_first<F: Real>(field: &VelocityField<F>) -> ArrayD<F> {
    let spatial = field.spatial_shape().to_vec();
    let d = spatial.len();
    let s: usize = spatial.iter().product();
    let fv = field.data.as_slice().expect("contiguous");
    let mut out = vec![F::zero(); s * d];
    for ax in 0..d {
        for i in 0..s {
            out[ax * s + i] = fv[i * d + ax];
        }
    }
    let mut shape = vec![d];
    shape.extend_from_slice(&spatial);
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape")
}

// -- hypernetwork ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperNetSpec {
    pub width: usize,
    pub depth: usize,
}

impl Default for HyperNetSpec {
    fn default() -> Self {
        HyperNetSpec {
            width: 128,
            depth: 4,
        }
    }
}

/// Decoupled weight decay applied to the linear projection heads.
pub const HEAD_WEIGHT_DECAY: f64 = 1e-5;

pub struct HyperNet<F: Real> {
    trunk: Vec<Linear<F>>,
    heads: Vec<Linear<F>>,
    pub spec: HyperNetSpec,
    site_channels: usize,
}

pub struct HyperCache<F: Real> {
    input: Array2<F>,
    pre: Vec<Array2<F>>,
    post: Vec<Array2<F>>,
    embedding: Array2<F>,
}

impl<F: Real> HyperNet<F> {
    /// Heads are zero-initialized so every site starts at the FiLM identity
    /// (`gamma = 1`, `beta = 0`) for every conditioning value.
    pub fn new(spec: HyperNetSpec, sites: usize, site_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut trunk = Vec::with_capacity(spec.depth);
        let mut in_dim = 1;
        for _ in 0..spec.depth {
            trunk.push(Linear::new(in_dim, spec.width, rng));
            in_dim = spec.width;
        }
        let heads = (0..sites)
            .map(|_| Linear::zeros(spec.width, 2 * site_channels))
            .collect();
        HyperNet {
            trunk,
            heads,
            spec,
            site_channels,
        }
    }

    pub fn sites(&self) -> usize {
        self.heads.len()
    }

    /// Closed-form parameter count: trunk `w(1+1) + (depth-1) w(w+1)` plus
    /// `sites * 2ch (w+1)` head parameters.
    pub fn param_count(&self) -> usize {
        self.trunk.iter().map(|l| l.param_count()).sum::<usize>()
            + self.heads.iter().map(|l| l.param_count()).sum::<usize>()
    }

    /// Map a conditioning weight to per-site FiLM parameters.
    pub fn film(&self, lambda: f64) -> (Vec<Film<F>>, HyperCache<F>) {
        let input = Array2::from_shape_vec((1, 1), vec![c::<F>(lambda)]).expect("shape");
        let mut pre = Vec::with_capacity(self.trunk.len());
        let mut post = Vec::with_capacity(self.trunk.len());
        let mut act = input.clone();
        for layer in &self.trunk {
            let a = layer.forward(&act);
            let r = relu(&a);
            pre.push(a);
            post.push(r.clone());
            act = r;
        }
        let embedding = act;
        let ch = self.site_channels;
        let films = self
            .heads
            .iter()
            .map(|head| {
                let out = head.forward(&embedding);
                let mut gamma = Vec::with_capacity(ch);
                let mut beta = Vec::with_capacity(ch);
                for i in 0..ch {
                    gamma.push(F::one() + out[(0, i)]);
                    beta.push(out[(0, ch + i)]);
                }
                Film { gamma, beta }
            })
            .collect();
        (
            films,
            HyperCache {
                input,
                pre,
                post,
                embedding,
            },
        )
    }

    /// Backward from per-site FiLM gradients; accumulates parameter
    /// gradients under `hypernet.*` and returns the derivative with respect
    /// to the conditioning weight.
    pub fn backward(
        &self,
        cache: &HyperCache<F>,
        film_grads: &[Film<F>],
        grads: &mut GradStore<F>,
    ) -> f64 {
        let ch = self.site_channels;
        let mut g_emb = Array2::<F>::zeros((1, self.spec.width));
        for (site, (head, fg)) in self.heads.iter().zip(film_grads.iter()).enumerate() {
            let mut g_out = Array2::<F>::zeros((1, 2 * ch));
            for i in 0..ch {
                g_out[(0, i)] = fg.gamma[i];
                g_out[(0, ch + i)] = fg.beta[i];
            }
            let g_in = head
                .backward(
                    &cache.embedding,
                    &g_out,
                    &format!("hypernet.head{site}"),
                    Some(grads),
                    true,
                )
                .expect("input gradient");
            g_emb = &g_emb + &g_in;
        }
        let mut g = g_emb;
        for (li, layer) in self.trunk.iter().enumerate().rev() {
            let g_pre = relu_backward(&cache.pre[li], &g);
            let x = if li == 0 {
                &cache.input
            } else {
                &cache.post[li - 1]
            };
            g = layer
                .backward(x, &g_pre, &format!("hypernet.trunk{li}"), Some(grads), true)
                .expect("input gradient");
        }
        g[(0, 0)].as_f64()
    }

    /// Head parameter paths, for targeted weight decay.
    pub fn head_param_names(&self) -> Vec<String> {
        (0..self.heads.len())
            .flat_map(|s| {
                vec![
                    format!("hypernet.head{s}.w"),
                    format!("hypernet.head{s}.b"),
                ]
            })
            .collect()
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn<F>) {
        for (li, layer) in self.trunk.iter_mut().enumerate() {
            layer.visit(&format!("{prefix}.trunk{li}"), f);
        }
        for (s, head) in self.heads.iter_mut().enumerate() {
            head.visit(&format!("{prefix}.head{s}"), f);
        }
    }
}
