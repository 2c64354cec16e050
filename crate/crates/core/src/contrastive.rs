//! Multi-scale patch-contrastive similarity.
//!
//! Anchors are sampled in the fixed image's feature maps; positives are the
//! moved image's features at the same spatial indices, negatives at other
//! indices of the same layer. Projected unit-norm embeddings feed a
//! temperature-scaled InfoNCE loss, averaged over anchors within a layer
//! and summed over layers. Masked mode restricts sampling to the union of
//! the two foreground masks resized to each layer's resolution.

use crate::error::{Error, Result};
use crate::nets::ops::GradStore;
use crate::nets::projection::{gather_features, scatter_feature_grads};
use crate::nets::{Autoencoder, FeatureStack, ProjectionBank};
use crate::real::{c, Real};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Contrastive similarity configuration (paper-scale defaults).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Negatives per anchor.
    pub ns: usize,
    /// Softmax temperature.
    pub tau: f64,
    /// Similarity rescale applied to the training objective.
    pub alpha: f64,
    /// Feature layers to use (indices into the 6-layer stack).
    pub layers: Vec<usize>,
    /// Restrict sampling to the union of foreground masks.
    pub masked: bool,
    /// Pool negatives from an external subject as well.
    pub external_negatives: bool,
    /// Anchors per layer (random subset when the layer has more indices).
    pub anchor_budget: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            ns: 1024,
            tau: 0.007,
            alpha: 0.1,
            layers: (0..6).collect(),
            masked: false,
            external_negatives: false,
            anchor_budget: 256,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns < 1 {
            return Err(Error::Config("ns must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.layers.is_empty() || self.layers.iter().any(|&l| l >= 6) {
            return Err(Error::Config(format!(
                "layers must be a nonempty subset of 0..6, got {:?}",
                self.layers
            )));
        }
        if self.anchor_budget < 1 {
            return Err(Error::Config("anchor_budget must be >= 1".into()));
        }
        Ok(())
    }
}

// -- masking --------------------------------------------------------------------

/// Union of two full-resolution masks resized to a layer resolution by area
/// averaging and thresholding at 0.5.
pub fn union_mask_at_layer(
    m1: &ArrayD<bool>,
    m2: &ArrayD<bool>,
    layer_shape: &[usize],
) -> Result<ArrayD<bool>> {
    if m1.shape() != m2.shape() {
        return Err(Error::ShapeMismatch(format!(
            "masks {:?} vs {:?}",
            m1.shape(),
            m2.shape()
        )));
    }
    let full = m1.shape().to_vec();
    if full.len() != layer_shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask rank {} vs layer rank {}",
            full.len(),
            layer_shape.len()
        )));
    }
    let mut factors = Vec::with_capacity(full.len());
    for (ax, (&f, &l)) in full.iter().zip(layer_shape.iter()).enumerate() {
        if l == 0 || f % l != 0 {
            return Err(Error::ShapeMismatch(format!(
                "axis {ax}: full extent {f} not an integer multiple of layer extent {l}"
            )));
        }
        factors.push(f / l);
    }
    let d = full.len();
    let block: usize = factors.iter().product();
    let m1v = m1.as_slice().expect("contiguous");
    let m2v = m2.as_slice().expect("contiguous");
    let full_strides = strides_of(&full);
    let layer_strides = strides_of(layer_shape);
    let n_layer: usize = layer_shape.iter().product();
    let mut out = vec![false; n_layer];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut base = [0usize; 3];
        let mut rem = flat;
        for ax in 0..d {
            base[ax] = (rem / layer_strides[ax]) * factors[ax];
            rem %= layer_strides[ax];
        }
        let mut count = 0usize;
        for b in 0..block {
            let mut rem = b;
            let mut idx = 0usize;
            for ax in 0..d {
                let sub: usize = factors[ax + 1..].iter().product();
                idx += (base[ax] + rem / sub) * full_strides[ax];
                rem %= sub;
            }
            count += usize::from(m1v[idx] || m2v[idx]);
        }
        *slot = 2 * count >= block; // mean >= 0.5
    }
    Ok(ArrayD::from_shape_vec(IxDyn(layer_shape), out).expect("shape"))
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

// -- index sampling -------------------------------------------------------------

/// Sampled indices for one layer: anchors plus per-anchor negatives (and
/// optional per-anchor external-subject negatives).
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub anchors: Vec<u32>,
    pub negatives: Vec<Vec<u32>>,
    pub external: Option<Vec<Vec<u32>>>,
}

/// Per-layer plans; `None` marks a layer skipped for lack of valid indices.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub layers: Vec<Option<LayerPlan>>,
}

impl SamplePlan {
    pub fn skipped_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_none()).count()
    }
}

/// Draw anchors and per-anchor negatives without replacement from `valid`.
/// Returns `None` when `valid` is empty (the layer is skipped). When fewer
/// than `ns` non-anchor indices exist, all of them are used.
pub fn sample_indices(
    valid: &[u32],
    ns: usize,
    anchor_budget: usize,
    rng: &mut ChaCha8Rng,
) -> Option<LayerPlan> {
    if valid.is_empty() {
        return None;
    }
    let m = valid.len();
    let n_anchors = anchor_budget.min(m);
    // partial Fisher-Yates for the anchor subset
    let mut pool: Vec<u32> = valid.to_vec();
    for i in 0..n_anchors {
        let j = i + rng.gen_range(0..m - i);
        pool.swap(i, j);
    }
    let anchors: Vec<u32> = pool[..n_anchors].to_vec();
    let n_negs = ns.min(m - 1);
    let mut negatives = Vec::with_capacity(n_anchors);
    let mut scratch: Vec<u32> = Vec::with_capacity(m);
    for &anchor in &anchors {
        scratch.clear();
        scratch.extend(valid.iter().copied().filter(|&v| v != anchor));
        let avail = scratch.len();
        for i in 0..n_negs.min(avail) {
            let j = i + rng.gen_range(0..avail - i);
            scratch.swap(i, j);
        }
        negatives.push(scratch[..n_negs.min(avail)].to_vec());
    }
    Some(LayerPlan {
        anchors,
        negatives,
        external: None,
    })
}

/// Valid flat indices per layer given an optional full-resolution mask pair.
pub fn layer_valid_indices(
    masks: Option<(&ArrayD<bool>, &ArrayD<bool>)>,
    layer_shapes: &[Vec<usize>],
) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(layer_shapes.len());
    for shape in layer_shapes {
        let n: usize = shape.iter().product();
        match masks {
            None => out.push((0..n as u32).collect()),
            Some((m1, m2)) => {
                let layer_mask = union_mask_at_layer(m1, m2, shape)?;
                out.push(
                    layer_mask
                        .iter()
                        .enumerate()
                        .filter(|(_, &b)| b)
                        .map(|(i, _)| i as u32)
                        .collect(),
                );
            }
        }
    }
    Ok(out)
}

/// Build the full sampling plan for one loss direction.
pub fn build_sample_plan(
    valid_per_layer: &[Vec<u32>],
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> SamplePlan {
    let mut layers = vec![None; valid_per_layer.len()];
    for &k in &cfg.layers {
        let mut plan = sample_indices(&valid_per_layer[k], cfg.ns, cfg.anchor_budget, rng);
        if cfg.external_negatives {
            if let Some(p) = plan.as_mut() {
                let m = valid_per_layer[k].len() as u32;
                // external pool indices come from the same layer grid
                let ext = p
                    .anchors
                    .iter()
                    .map(|_| {
                        (0..cfg.ns.min(m as usize))
                            .map(|_| valid_per_layer[k][rng.gen_range(0..m as usize)])
                            .collect()
                    })
                    .collect();
                p.external = Some(ext);
            }
        }
        layers[k] = plan;
    }
    SamplePlan { layers }
}

// -- InfoNCE ---------------------------------------------------------------------

/// Numerically stable InfoNCE on unit-norm embeddings:
/// `-log(exp(a.p/tau) / (exp(a.p/tau) + sum_j exp(a.n_j/tau)))`.
pub fn info_nce<F: Real>(
    anchor: &[F],
    positive: &[F],
    negatives: &Array2<F>,
    tau: f64,
) -> Result<F> {
    let (loss, _) = info_nce_impl(anchor, positive, negatives, tau, false)?;
    Ok(loss)
}

pub struct InfoNceGrads<F: Real> {
    pub anchor: Vec<F>,
    pub positive: Vec<F>,
    pub negatives: Array2<F>,
}

pub fn info_nce_grad<F: Real>(
    anchor: &[F],
    positive: &[F],
    negatives: &Array2<F>,
    tau: f64,
) -> Result<(F, InfoNceGrads<F>)> {
    let (loss, grads) = info_nce_impl(anchor, positive, negatives, tau, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn info_nce_impl<F: Real>(
    anchor: &[F],
    positive: &[F],
    negatives: &Array2<F>,
    tau: f64,
    want_grad: bool,
) -> Result<(F, Option<InfoNceGrads<F>>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be > 0, got {tau}")));
    }
    let dim = anchor.len();
    if positive.len() != dim || negatives.ncols() != dim {
        return Err(Error::ShapeMismatch("embedding widths differ".into()));
    }
    let inv_tau = 1.0 / tau;
    let dot = |v: &[F]| -> f64 {
        let mut acc = 0.0;
        for (a, b) in anchor.iter().zip(v.iter()) {
            acc += a.as_f64() * b.as_f64();
        }
        acc
    };
    let l_pos = dot(positive) * inv_tau;
    let mut logits = Vec::with_capacity(negatives.nrows());
    for row in negatives.rows() {
        logits.push(dot(row.as_slice().expect("contiguous")) * inv_tau);
    }
    let mut max_logit = l_pos;
    for &l in &logits {
        max_logit = max_logit.max(l);
    }
    let mut denom = (l_pos - max_logit).exp();
    for &l in &logits {
        denom += (l - max_logit).exp();
    }
    let lse = max_logit + denom.ln();
    let loss = lse - l_pos;
    if !want_grad {
        return Ok((c::<F>(loss), None));
    }
    let s_pos = (l_pos - lse).exp();
    let mut grad_anchor = vec![0f64; dim];
    let coef_p = (s_pos - 1.0) * inv_tau;
    for (g, &p) in grad_anchor.iter_mut().zip(positive.iter()) {
        *g += coef_p * p.as_f64();
    }
    let mut grad_negatives = Array2::<F>::zeros(negatives.dim());
    for (j, row) in negatives.rows().into_iter().enumerate() {
        let s_j = (logits[j] - lse).exp();
        let coef = s_j * inv_tau;
        for (gi, &n) in grad_anchor.iter_mut().zip(row.iter()) {
            *gi += coef * n.as_f64();
        }
        for (k, &a) in anchor.iter().enumerate() {
            grad_negatives[(j, k)] = c::<F>(coef * a.as_f64());
        }
    }
    let grad_positive: Vec<F> = anchor.iter().map(|&a| c::<F>(coef_p * a.as_f64())).collect();
    Ok((
        c::<F>(loss),
        Some(InfoNceGrads {
            anchor: grad_anchor.into_iter().map(F::from_f64).collect(),
            positive: grad_positive,
            negatives: grad_negatives,
        }),
    ))
}

// -- multi-scale directed similarity ----------------------------------------------

/// Networks for one loss direction. The fixed-side autoencoder features may
/// be precomputed and passed to [`d12_loss`]/[`d12_with_grad`] since frozen
/// extractors make them constant per image.
pub struct D12Nets<'a, F: Real> {
    pub ae_fixed: &'a Autoencoder<F>,
    pub ae_moved: &'a Autoencoder<F>,
    pub bank_fixed: &'a ProjectionBank<F>,
    pub bank_moved: &'a ProjectionBank<F>,
    /// Gradient-store prefixes for the four networks.
    pub names: D12Names,
}

#[derive(Debug, Clone)]
pub struct D12Names {
    pub ae_fixed: String,
    pub ae_moved: String,
    pub bank_fixed: String,
    pub bank_moved: String,
}

pub struct D12Options {
    /// Accumulate autoencoder parameter gradients (supervised pretraining).
    pub train_extractors: bool,
    /// Return the gradient with respect to the moved image (registration).
    pub want_moved_input_grad: bool,
}

pub struct D12Output<F: Real> {
    pub loss: F,
    pub grads: GradStore<F>,
    pub grad_moved_input: Option<ArrayD<F>>,
    pub skipped_layers: usize,
}

/// Loss-only evaluation (used by oracles and sweeps).
pub fn d12_loss<F: Real>(
    i_fixed: &ArrayD<F>,
    i_moved: &ArrayD<F>,
    nets: &D12Nets<F>,
    cfg: &ContrastiveConfig,
    plan: &SamplePlan,
    fixed_features: Option<&FeatureStack<F>>,
    external_features: Option<&FeatureStack<F>>,
) -> Result<F> {
    let out = d12_run(
        i_fixed,
        i_moved,
        nets,
        cfg,
        plan,
        fixed_features,
        external_features,
        None,
    )?;
    Ok(out.loss)
}

/// Loss with gradients for training.
pub fn d12_with_grad<F: Real>(
    i_fixed: &ArrayD<F>,
    i_moved: &ArrayD<F>,
    nets: &D12Nets<F>,
    cfg: &ContrastiveConfig,
    plan: &SamplePlan,
    fixed_features: Option<&FeatureStack<F>>,
    external_features: Option<&FeatureStack<F>>,
    opts: D12Options,
) -> Result<D12Output<F>> {
    d12_run(
        i_fixed,
        i_moved,
        nets,
        cfg,
        plan,
        fixed_features,
        external_features,
        Some(opts),
    )
}

#[allow(clippy::too_many_arguments)]
fn d12_run<F: Real>(
    i_fixed: &ArrayD<F>,
    i_moved: &ArrayD<F>,
    nets: &D12Nets<F>,
    cfg: &ContrastiveConfig,
    plan: &SamplePlan,
    fixed_features: Option<&FeatureStack<F>>,
    external_features: Option<&FeatureStack<F>>,
    opts: Option<D12Options>,
) -> Result<D12Output<F>> {
    cfg.validate()?;
    if cfg.external_negatives && external_features.is_none() {
        return Err(Error::InvalidInput(
            "external negatives requested but no external subject supplied".into(),
        ));
    }
    let want_grad = opts.is_some();
    let opts = opts.unwrap_or(D12Options {
        train_extractors: false,
        want_moved_input_grad: false,
    });
    if opts.train_extractors && fixed_features.is_some() {
        return Err(Error::InvalidInput(
            "cached fixed features cannot be used while training extractors".into(),
        ));
    }
    let moved_fwd = nets.ae_moved.forward(&channelize(i_moved))?;
    let fixed_fwd = match fixed_features {
        Some(_) => None,
        None => Some(nets.ae_fixed.forward(&channelize(i_fixed))?),
    };
    let fixed_stack = fixed_features
        .unwrap_or_else(|| &fixed_fwd.as_ref().expect("computed above").features);
    let moved_stack = &moved_fwd.features;
    if fixed_stack.n_layers() != moved_stack.n_layers() {
        return Err(Error::ShapeMismatch(
            "feature stacks have different depths (modality/autoencoder mismatch)".into(),
        ));
    }
    for k in 0..fixed_stack.n_layers() {
        if fixed_stack.layers[k].shape() != moved_stack.layers[k].shape() {
            return Err(Error::ShapeMismatch(format!(
                "layer {k} feature shapes differ: {:?} vs {:?} (modality/autoencoder mismatch)",
                fixed_stack.layers[k].shape(),
                moved_stack.layers[k].shape()
            )));
        }
    }

    let mut total = F::zero();
    let mut grads = GradStore::new();
    let mut moved_feature_grads: Vec<Option<ArrayD<F>>> = vec![None; moved_stack.n_layers()];
    let mut fixed_feature_grads: Vec<Option<ArrayD<F>>> = vec![None; fixed_stack.n_layers()];
    let mut skipped = 0usize;

    for &k in &cfg.layers {
        let Some(layer_plan) = plan.layers.get(k).and_then(|p| p.as_ref()) else {
            skipped += 1;
            continue;
        };
        if layer_plan.anchors.is_empty() {
            skipped += 1;
            continue;
        }
        let n_anchors = layer_plan.anchors.len();

        // unique moved-side indices: positives plus every negative
        let layer_n: usize = moved_stack.layers[k].shape()[1..].iter().product();
        let mut row_of = vec![u32::MAX; layer_n];
        let mut uniq: Vec<u32> = Vec::new();
        let intern = |idx: u32, row_of: &mut Vec<u32>, uniq: &mut Vec<u32>| {
            if row_of[idx as usize] == u32::MAX {
                row_of[idx as usize] = uniq.len() as u32;
                uniq.push(idx);
            }
        };
        for &a in &layer_plan.anchors {
            intern(a, &mut row_of, &mut uniq);
        }
        for negs in &layer_plan.negatives {
            for &n in negs {
                intern(n, &mut row_of, &mut uniq);
            }
        }
        let anchor_rows = gather_features(&fixed_stack.layers[k], &layer_plan.anchors);
        let moved_rows = gather_features(&moved_stack.layers[k], &uniq);
        let (emb_a, cache_a) = nets.bank_fixed.heads[k].forward(&anchor_rows)?;
        let (emb_m, cache_m) = nets.bank_moved.heads[k].forward(&moved_rows)?;

        // optional external pool, projected through the moved-side head
        let (emb_ext, cache_ext, ext_uniq, ext_row_of) = if let (Some(ext_plan), Some(ext_feats)) =
            (&layer_plan.external, external_features)
        {
            let ext_n: usize = ext_feats.layers[k].shape()[1..].iter().product();
            let mut ext_row_of = vec![u32::MAX; ext_n];
            let mut ext_uniq: Vec<u32> = Vec::new();
            for negs in ext_plan {
                for &n in negs {
                    if ext_row_of[n as usize] == u32::MAX {
                        ext_row_of[n as usize] = ext_uniq.len() as u32;
                        ext_uniq.push(n);
                    }
                }
            }
            let rows = gather_features(&ext_feats.layers[k], &ext_uniq);
            let (emb, cache) = nets.bank_moved.heads[k].forward(&rows)?;
            (Some(emb), Some(cache), ext_uniq, ext_row_of)
        } else {
            (None, None, Vec::new(), Vec::new())
        };
        let _ = ext_uniq;

        // InfoNCE over the sampled sets, computed in-place against the
        // embedding matrices (no per-anchor copies). Softmax internals run
        // in f64; the stable log-sum-exp keeps tau = 0.007 finite.
        let inv_anchors = 1.0 / n_anchors as f64;
        let mut grad_emb_a = want_grad.then(|| Array2::<F>::zeros(emb_a.dim()));
        let mut grad_emb_m = want_grad.then(|| Array2::<F>::zeros(emb_m.dim()));
        let mut grad_emb_ext = match (&emb_ext, want_grad) {
            (Some(e), true) => Some(Array2::<F>::zeros(e.dim())),
            _ => None,
        };
        let inv_tau = 1.0 / cfg.tau;
        let dot64 = |a: &[F], b: &[F]| -> f64 {
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                acc += x.as_f64() * y.as_f64();
            }
            acc
        };
        let mut layer_loss = 0.0f64;
        let mut logits: Vec<f64> = Vec::new();
        for (ai, &anchor_idx) in layer_plan.anchors.iter().enumerate() {
            let anchor = emb_a.row(ai);
            let anchor = anchor.as_slice().expect("contiguous");
            let pos_row = row_of[anchor_idx as usize] as usize;
            let positive = emb_m.row(pos_row);
            let positive = positive.as_slice().expect("contiguous");
            let negs = &layer_plan.negatives[ai];
            let ext_negs: &[u32] = layer_plan
                .external
                .as_ref()
                .map(|e| e[ai].as_slice())
                .unwrap_or(&[]);
            let l_pos = dot64(anchor, positive) * inv_tau;
            logits.clear();
            for &n in negs {
                let row = emb_m.row(row_of[n as usize] as usize);
                logits.push(dot64(anchor, row.as_slice().expect("contiguous")) * inv_tau);
            }
            if let Some(ext) = &emb_ext {
                for &n in ext_negs {
                    let row = ext.row(ext_row_of[n as usize] as usize);
                    logits.push(dot64(anchor, row.as_slice().expect("contiguous")) * inv_tau);
                }
            }
            let mut max_logit = l_pos;
            for &l in &logits {
                max_logit = max_logit.max(l);
            }
            let mut denom = (l_pos - max_logit).exp();
            for &l in &logits {
                denom += (l - max_logit).exp();
            }
            let lse = max_logit + denom.ln();
            layer_loss += lse - l_pos;
            if want_grad {
                let ga = grad_emb_a.as_mut().expect("grad");
                let gm = grad_emb_m.as_mut().expect("grad");
                let s_pos = (l_pos - lse).exp();
                let coef_p = c::<F>((s_pos - 1.0) * inv_tau * inv_anchors);
                {
                    let ga_row = ga.row_mut(ai);
                    let ga_row = ga_row.into_slice().expect("contiguous");
                    for (g, &p) in ga_row.iter_mut().zip(positive.iter()) {
                        *g += coef_p * p;
                    }
                }
                {
                    let gm_row = gm.row_mut(pos_row);
                    let gm_row = gm_row.into_slice().expect("contiguous");
                    for (g, &a) in gm_row.iter_mut().zip(anchor.iter()) {
                        *g += coef_p * a;
                    }
                }
                for (r, &n) in negs.iter().enumerate() {
                    let coef = c::<F>((logits[r] - lse).exp() * inv_tau * inv_anchors);
                    let row = row_of[n as usize] as usize;
                    {
                        let ga_row = ga.row_mut(ai);
                        let ga_row = ga_row.into_slice().expect("contiguous");
                        let n_row = emb_m.row(row);
                        let n_row = n_row.as_slice().expect("contiguous");
                        for (g, &nv) in ga_row.iter_mut().zip(n_row.iter()) {
                            *g += coef * nv;
                        }
                    }
                    let gm_row = gm.row_mut(row);
                    let gm_row = gm_row.into_slice().expect("contiguous");
                    for (g, &a) in gm_row.iter_mut().zip(anchor.iter()) {
                        *g += coef * a;
                    }
                }
                if let (Some(ge), Some(ext)) = (grad_emb_ext.as_mut(), &emb_ext) {
                    for (r, &n) in ext_negs.iter().enumerate() {
                        let coef =
                            c::<F>((logits[negs.len() + r] - lse).exp() * inv_tau * inv_anchors);
                        let row = ext_row_of[n as usize] as usize;
                        {
                            let ga_row = ga.row_mut(ai);
                            let ga_row = ga_row.into_slice().expect("contiguous");
                            let n_row = ext.row(row);
                            let n_row = n_row.as_slice().expect("contiguous");
                            for (g, &nv) in ga_row.iter_mut().zip(n_row.iter()) {
                                *g += coef * nv;
                            }
                        }
                        let ge_row = ge.row_mut(row);
                        let ge_row = ge_row.into_slice().expect("contiguous");
                        for (g, &a) in ge_row.iter_mut().zip(anchor.iter()) {
                            *g += coef * a;
                        }
                    }
                }
            }
        }
        total += c::<F>(layer_loss * inv_anchors);

        if want_grad {
            // heads are always trainable
            let g_rows_a = nets.bank_fixed.heads[k].backward(
                &cache_a,
                grad_emb_a.as_ref().expect("grad"),
                &format!("{}.layer{k}", nets.names.bank_fixed),
                Some(&mut grads),
                opts.train_extractors,
            );
            let g_rows_m = nets.bank_moved.heads[k].backward(
                &cache_m,
                grad_emb_m.as_ref().expect("grad"),
                &format!("{}.layer{k}", nets.names.bank_moved),
                Some(&mut grads),
                opts.train_extractors || opts.want_moved_input_grad,
            );
            if let (Some(cache), Some(ge)) = (&cache_ext, &grad_emb_ext) {
                // external embeddings train the moved-side head only
                nets.bank_moved.heads[k].backward(
                    cache,
                    ge,
                    &format!("{}.layer{k}", nets.names.bank_moved),
                    Some(&mut grads),
                    false,
                );
            }
            if let Some(g_rows) = g_rows_m {
                let scattered = scatter_feature_grads(
                    &g_rows,
                    &uniq,
                    moved_stack.layers[k].shape(),
                );
                moved_feature_grads[k] = Some(match moved_feature_grads[k].take() {
                    Some(acc) => acc + scattered,
                    None => scattered,
                });
            }
            if opts.train_extractors {
                if let Some(g_rows) = g_rows_a {
                    let scattered = scatter_feature_grads(
                        &g_rows,
                        &layer_plan.anchors,
                        fixed_stack.layers[k].shape(),
                    );
                    fixed_feature_grads[k] = Some(match fixed_feature_grads[k].take() {
                        Some(acc) => acc + scattered,
                        None => scattered,
                    });
                }
            }
        }
    }

    let mut grad_moved_input = None;
    if want_grad && (opts.want_moved_input_grad || opts.train_extractors) {
        let ae_grads = opts.train_extractors.then(|| &mut grads);
        // the moved-side extractor is frozen unless training extractors:
        // parameter gradients are only accumulated in that mode
        let g_in = nets.ae_moved.backward(
            &moved_fwd.cache,
            None,
            &moved_feature_grads,
            &nets.names.ae_moved,
            ae_grads,
            opts.want_moved_input_grad,
        );
        grad_moved_input = g_in.map(|g| dechannelize(&g));
        if opts.train_extractors {
            let fixed_fwd = fixed_fwd.as_ref().expect("trainable fixed side");
            nets.ae_fixed.backward(
                &fixed_fwd.cache,
                None,
                &fixed_feature_grads,
                &nets.names.ae_fixed,
                Some(&mut grads),
                false,
            );
        }
    }

    Ok(D12Output {
        loss: total,
        grads,
        grad_moved_input,
        skipped_layers: skipped,
    })
}

/// Wrap a scalar spatial array as a 1-channel activation.
pub fn channelize<F: Real>(x: &ArrayD<F>) -> ArrayD<F> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(x.shape());
    ArrayD::from_shape_vec(IxDyn(&shape), x.iter().copied().collect()).expect("shape")
}

/// Drop the leading 1-channel axis.
pub fn dechannelize<F: Real>(x: &ArrayD<F>) -> ArrayD<F> {
    debug_assert_eq!(x.shape()[0], 1);
    ArrayD::from_shape_vec(IxDyn(&x.shape()[1..]), x.iter().copied().collect()).expect("shape")
}

/// Half-sum of the two directed losses (loss-only form).
#[allow(clippy::too_many_arguments)]
pub fn bidirectional_sim<F: Real>(
    i1: &ArrayD<F>,
    i2_warped: &ArrayD<F>,
    i2: &ArrayD<F>,
    i1_warped_inv: &ArrayD<F>,
    nets_12: &D12Nets<F>,
    nets_21: &D12Nets<F>,
    cfg: &ContrastiveConfig,
    plan_12: &SamplePlan,
    plan_21: &SamplePlan,
) -> Result<F> {
    let d12 = d12_loss(i1, i2_warped, nets_12, cfg, plan_12, None, None)?;
    let d21 = d12_loss(i2, i1_warped_inv, nets_21, cfg, plan_21, None, None)?;
    Ok((d12 + d21) * c::<F>(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn union_mask_1d_style_or() {
        let m1 = ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![true, true, false, false]).unwrap();
        let m2 = ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![false, true, true, false]).unwrap();
        let u = union_mask_at_layer(&m1, &m2, &[1, 4]).unwrap();
        assert_eq!(
            u.iter().copied().collect::<Vec<_>>(),
            vec![true, true, true, false]
        );
    }

    #[test]
    fn union_mask_all_true_stays_true_at_every_scale() {
        let m = ArrayD::from_elem(IxDyn(&[96, 96]), true);
        for layer in [[48, 48], [24, 24], [12, 12], [96, 96]] {
            let u = union_mask_at_layer(&m, &m, &layer).unwrap();
            assert!(u.iter().all(|&b| b));
        }
    }

    #[test]
    fn union_mask_disk_area_scales_by_four() {
        let mut m = ArrayD::from_elem(IxDyn(&[96, 96]), false);
        let (cx, cy, r) = (47.5, 47.5, 24.0f64);
        for i in 0..96 {
            for j in 0..96 {
                if ((i as f64 - cx).powi(2) + (j as f64 - cy).powi(2)).sqrt() <= r {
                    m[[i, j]] = true;
                }
            }
        }
        let full_area = m.iter().filter(|&&b| b).count() as f64;
        let half = union_mask_at_layer(&m, &m, &[48, 48]).unwrap();
        let half_area = half.iter().filter(|&&b| b).count() as f64;
        let expected = full_area / 4.0;
        assert!(
            (half_area - expected).abs() / expected <= 0.10,
            "area {half_area} vs expected {expected}"
        );
    }

    #[test]
    fn sampling_respects_availability() {
        let mut rng = substream(1, "sample-test", &[]);
        // 5 valid indices, ns much larger: each anchor gets the other 4
        let valid: Vec<u32> = vec![3, 7, 11, 19, 23];
        let plan = sample_indices(&valid, 1024, 256, &mut rng).unwrap();
        assert_eq!(plan.anchors.len(), 5);
        for (a, negs) in plan.anchors.iter().zip(plan.negatives.iter()) {
            assert_eq!(negs.len(), 4);
            assert!(!negs.contains(a));
            let mut sorted = negs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 4, "duplicate negatives");
        }
    }

    #[test]
    fn sampling_draws_distinct_non_anchor_indices() {
        let mut rng = substream(2, "sample-test", &[]);
        let valid: Vec<u32> = (0..576).collect();
        let plan = sample_indices(&valid, 300, 10, &mut rng).unwrap();
        assert_eq!(plan.anchors.len(), 10);
        for (a, negs) in plan.anchors.iter().zip(plan.negatives.iter()) {
            assert_eq!(negs.len(), 300);
            assert!(!negs.contains(a));
            let mut sorted = negs.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 300);
        }
    }

    #[test]
    fn empty_mask_skips_layer() {
        let mut rng = substream(3, "sample-test", &[]);
        assert!(sample_indices(&[], 10, 4, &mut rng).is_none());
    }

    #[test]
    fn info_nce_exchangeable_logits() {
        // equal dot products: loss = ln(1 + ns)
        let anchor = vec![1.0f64, 0.0];
        let positive = vec![0.5, (0.75f64).sqrt()];
        let negatives = Array2::from_shape_vec(
            (2, 2),
            vec![0.5, (0.75f64).sqrt(), 0.5, -(0.75f64).sqrt()],
        )
        .unwrap();
        let loss = info_nce(&anchor, &positive, &negatives, 0.5).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn info_nce_saturated_softmax_is_zero() {
        let dim = 8;
        let mut anchor = vec![0.0f64; dim];
        anchor[0] = 1.0;
        let positive = anchor.clone();
        // orthogonal negatives
        let mut negatives = Array2::zeros((1024, dim));
        for j in 0..1024 {
            negatives[(j, 1 + (j % (dim - 1)))] = 1.0;
        }
        let loss = info_nce(&anchor, &positive, &negatives, 0.007).unwrap();
        assert_eq!(loss, 0.0, "saturated loss should underflow to exactly 0");
    }

    #[test]
    fn info_nce_matches_unstabilized_oracle() {
        let mut rng = substream(4, "nce-test", &[]);
        let dim = 16;
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f64> = (0..dim)
                .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                .collect();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let anchor = unit(&mut rng);
        let positive = unit(&mut rng);
        let mut negatives = Array2::zeros((8, dim));
        for j in 0..8 {
            let n = unit(&mut rng);
            for k in 0..dim {
                negatives[(j, k)] = n[k];
            }
        }
        let loss = info_nce(&anchor, &positive, &negatives, 0.5).unwrap();
        // direct evaluation without the log-sum-exp shift
        let dot = |v: &[f64]| -> f64 { anchor.iter().zip(v).map(|(a, b)| a * b).sum() };
        let ep = (dot(&positive) / 0.5).exp();
        let mut den = ep;
        for j in 0..8 {
            den += (dot(negatives.row(j).as_slice().unwrap()) / 0.5).exp();
        }
        let oracle = -(ep / den).ln();
        assert!((loss - oracle).abs() < 1e-10, "loss {loss} oracle {oracle}");
    }

    #[test]
    fn info_nce_no_nan_at_extreme_logits() {
        let anchor = vec![1.0f64, 0.0];
        let positive = vec![-1.0, 0.0];
        let negatives = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let loss = info_nce(&anchor, &positive, &negatives, 0.007).unwrap();
        assert!(loss.is_finite());
        let (l2, g) = info_nce_grad(&anchor, &positive, &negatives, 0.007).unwrap();
        assert!(l2.is_finite());
        assert!(g.anchor.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn info_nce_rejects_bad_tau() {
        let a = vec![1.0f64];
        let n = Array2::zeros((1, 1));
        assert!(info_nce(&a, &a, &n, 0.0).is_err());
        assert!(info_nce(&a, &a, &n, -1.0).is_err());
    }

    #[test]
    fn info_nce_decreases_in_positive_similarity() {
        let dim = 4;
        let anchor = vec![1.0, 0.0, 0.0, 0.0];
        let negatives = Array2::from_shape_vec(
            (2, dim),
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..10 {
            let cosv = -0.9 + 0.2 * t as f64;
            let sinv = (1.0 - cosv * cosv).sqrt();
            let positive = vec![cosv, sinv, 0.0, 0.0];
            let loss = info_nce(&anchor, &positive, &negatives, 0.1).unwrap();
            assert!(loss < prev, "not decreasing at step {t}");
            prev = loss;
        }
    }

    #[test]
    fn info_nce_permutation_invariant_over_negatives() {
        let anchor = vec![0.6, 0.8, 0.0];
        let positive = vec![0.0, 1.0, 0.0];
        let negatives =
            Array2::from_shape_vec((3, 3), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.6, 0.0, 0.8])
                .unwrap();
        let permuted =
            Array2::from_shape_vec((3, 3), vec![0.6, 0.0, 0.8, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
                .unwrap();
        let a: f64 = info_nce(&anchor, &positive, &negatives, 0.3).unwrap();
        let b: f64 = info_nce(&anchor, &positive, &permuted, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
