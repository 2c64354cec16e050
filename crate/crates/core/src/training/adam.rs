//! Adam optimizer with global-norm gradient clipping and decoupled weight
//! decay on selected parameter prefixes.

use crate::nets::ops::GradStore;
use std::collections::HashMap;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
    /// `(name prefix, decay)` rules, applied decoupled (AdamW style).
    pub weight_decay: Vec<(String, f64)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
            weight_decay: Vec::new(),
        }
    }

    /// One update step. `visit` must call the closure once per trainable
    /// parameter tensor; parameters without a gradient entry are skipped.
    /// Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        grads: &GradStore<f32>,
        clip: f64,
        visit: impl FnOnce(&mut dyn FnMut(&str, &mut [f32])),
    ) -> f64 {
        let norm = grads.global_norm();
        let scale = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        let decay_rules = &self.weight_decay;
        visit(&mut |name: &str, param: &mut [f32]| {
            let Some(g) = grads.get(name) else { return };
            debug_assert_eq!(g.len(), param.len(), "gradient shape for {name}");
            let m = m_map
                .entry(name.to_string())
                .or_insert_with(|| vec![0f32; param.len()]);
            let v = v_map
                .entry(name.to_string())
                .or_insert_with(|| vec![0f32; param.len()]);
            let decay = decay_rules
                .iter()
                .find(|(prefix, _)| name.starts_with(prefix.as_str()))
                .map(|(_, d)| *d)
                .unwrap_or(0.0);
            for i in 0..param.len() {
                let gi = g[i] as f64 * scale;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                let mut p = param[i] as f64 - update;
                if decay > 0.0 {
                    p -= lr * decay * param[i] as f64;
                }
                param[i] = p as f32;
            }
        });
        norm
    }

    /// Moment tensors for checkpointing, sorted by name.
    pub fn export_moments(&self) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| (n.clone(), self.m[n].clone(), self.v[n].clone()))
            .collect()
    }

    pub fn import_moments(&mut self, t: u64, moments: Vec<(String, Vec<f32>, Vec<f32>)>) {
        self.t = t;
        self.m.clear();
        self.v.clear();
        for (name, m, v) in moments {
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize f(p) = sum p^2 from p = 1
        let mut p = vec![1.0f32; 4];
        let mut adam = Adam::new(0.05, 0.9, 0.999);
        for _ in 0..200 {
            let mut grads = GradStore::new();
            let g: Vec<f32> = p.iter().map(|&x| 2.0 * x).collect();
            grads.accumulate("p", &g);
            adam.step(&grads, 0.0, |f| f("p", &mut p));
        }
        assert!(p.iter().all(|&x| x.abs() < 0.05), "p = {p:?}");
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut p = vec![0.0f32];
        let mut adam = Adam::new(1.0, 0.9, 0.999);
        let mut grads = GradStore::new();
        grads.accumulate("p", &[1e6f32]);
        let norm = adam.step(&grads, 10.0, |f| f("p", &mut p));
        assert_eq!(norm, 1e6);
        // with bias correction the first step magnitude is about lr
        assert!(p[0].abs() < 1.5, "step too large: {}", p[0]);
    }

    #[test]
    fn weight_decay_applies_to_matching_prefix_only() {
        let mut a = vec![1.0f32];
        let mut b = vec![1.0f32];
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        adam.weight_decay.push(("heads".into(), 0.5));
        let mut grads = GradStore::new();
        grads.accumulate("heads.w", &[0.0f32]);
        grads.accumulate("trunk.w", &[0.0f32]);
        adam.step(&grads, 0.0, |f| {
            f("heads.w", &mut a);
            f("trunk.w", &mut b);
        });
        assert!(a[0] < 1.0, "decay missing");
        assert_eq!(b[0], 1.0, "decay leaked");
    }

    #[test]
    fn moments_round_trip() {
        let mut p = vec![0.5f32; 3];
        let mut adam = Adam::new(0.01, 0.9, 0.999);
        let mut grads = GradStore::new();
        grads.accumulate("p", &[0.1, -0.2, 0.3]);
        adam.step(&grads, 0.0, |f| f("p", &mut p));
        let exported = adam.export_moments();
        let mut adam2 = Adam::new(0.01, 0.9, 0.999);
        adam2.import_moments(adam.t, exported);
        let mut p1 = p.clone();
        let mut p2 = p.clone();
        adam.step(&grads, 0.0, |f| f("p", &mut p1));
        adam2.step(&grads, 0.0, |f| f("p", &mut p2));
        assert_eq!(p1, p2);
    }
}
