//! Full training-state checkpointing: trainable and frozen parameters,
//! optimizer moments, and the iteration counter. Per-iteration randomness
//! is derived from `(seed, iteration)` substreams, so a resumed run replays
//! the exact stream of an uninterrupted one.

use super::{Adam, RegModelBundle, TrainConfig};
use crate::error::{Error, Result};
use crate::nets::checkpoint::Checkpoint;
use std::path::Path;

pub const KIND_TRAIN_STATE: &str = "registration-train-state";

pub fn save_train_state(
    path: &Path,
    bundle: &mut RegModelBundle,
    adam: &Adam,
    cfg: &TrainConfig,
    config_hash: &str,
    iteration: u64,
) -> Result<()> {
    let mut tensors: Vec<(String, Vec<f32>)> = Vec::new();
    bundle.visit_trainables(&mut |name, p| tensors.push((name.to_string(), p.to_vec())));
    bundle.visit_frozen(&mut |name, p| tensors.push((format!("frozen.{name}"), p.to_vec())));
    for (name, m, v) in adam.export_moments() {
        tensors.push((format!("adam.m.{name}"), m));
        tensors.push((format!("adam.v.{name}"), v));
    }
    let ckpt = Checkpoint {
        kind: KIND_TRAIN_STATE.into(),
        config_hash: config_hash.into(),
        iteration,
        seed: cfg.seed,
        meta: vec![
            ("adam_t".into(), adam.t.to_string()),
            ("mode".into(), cfg.mode.as_str().to_string()),
            ("ch".into(), cfg.ch.to_string()),
            ("ts".into(), cfg.ts.to_string()),
        ],
        tensors,
    };
    ckpt.save(path)
}

/// Restore parameters and optimizer state. The checkpoint must match the
/// config hash and architecture; any mismatch is rejected.
pub fn load_train_state(
    path: &Path,
    bundle: &mut RegModelBundle,
    adam: &mut Adam,
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<u64> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != KIND_TRAIN_STATE {
        return Err(Error::Integrity(format!(
            "expected kind {KIND_TRAIN_STATE}, found {}",
            ckpt.kind
        )));
    }
    if ckpt.config_hash != config_hash {
        return Err(Error::Integrity(format!(
            "config hash mismatch: checkpoint {}, current {config_hash}",
            ckpt.config_hash
        )));
    }
    for (key, expect) in [
        ("mode", cfg.mode.as_str().to_string()),
        ("ch", cfg.ch.to_string()),
        ("ts", cfg.ts.to_string()),
    ] {
        if ckpt.meta_value(key) != Some(expect.as_str()) {
            return Err(Error::Integrity(format!(
                "checkpoint {key} {:?} does not match config {expect}",
                ckpt.meta_value(key)
            )));
        }
    }
    let mut missing: Option<String> = None;
    bundle.visit_trainables(&mut |name, p| {
        match ckpt.tensor(name) {
            Some(values) if values.len() == p.len() => p.copy_from_slice(values),
            _ => missing = Some(name.to_string()),
        }
    });
    bundle.visit_frozen(&mut |name, p| {
        match ckpt.tensor(&format!("frozen.{name}")) {
            Some(values) if values.len() == p.len() => p.copy_from_slice(values),
            _ => missing = Some(name.to_string()),
        }
    });
    if let Some(name) = missing {
        return Err(Error::Integrity(format!(
            "checkpoint tensor `{name}` missing or shaped differently (architecture changed?)"
        )));
    }
    let adam_t: u64 = ckpt
        .meta_value("adam_t")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Integrity("missing adam_t".into()))?;
    let mut moments = Vec::new();
    for (name, values) in &ckpt.tensors {
        if let Some(param) = name.strip_prefix("adam.m.") {
            let v = ckpt
                .tensor(&format!("adam.v.{param}"))
                .ok_or_else(|| Error::Integrity(format!("missing adam.v for {param}")))?;
            moments.push((param.to_string(), values.clone(), v.to_vec()));
        }
    }
    adam.import_moments(adam_t, moments);
    Ok(ckpt.iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::ContrastiveConfig;
    use crate::losses::MetricConfig;
    use crate::synth::generate_subject;
    use crate::training::register::{train_registration, TrainData, TrainSubject};
    use crate::training::Mode;
    use tempfile::tempdir;

    fn data() -> TrainData {
        TrainData {
            subjects: (0..3)
                .map(|s| TrainSubject::from(&generate_subject(s, &[32, 32], 3).unwrap()))
                .collect(),
        }
    }

    fn cfg(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            lr: 1e-4,
            seed: 21,
            mode: Mode::Mi,
            ts: 2,
            ch: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn resume_is_bit_identical_to_uninterrupted() {
        let data = data();
        let ccfg = ContrastiveConfig::default();
        let mcfg = MetricConfig::default();
        // uninterrupted run of 16 iterations
        let full_cfg = cfg(16);
        let mut bundle = RegModelBundle::build(&full_cfg, 2, None, None).unwrap();
        let mut adam = Adam::new(full_cfg.lr, full_cfg.beta1, full_cfg.beta2);
        let full = train_registration(
            &data, &mut bundle, &full_cfg, &ccfg, &mcfg, &mut adam, 0, None, None,
        )
        .unwrap();

        // interrupted at 5, checkpointed, resumed to 16
        let dir = tempdir().unwrap();
        let ckpt_path = dir.path().join("state.ckpt");
        let mut bundle2 = RegModelBundle::build(&full_cfg, 2, None, None).unwrap();
        let mut adam2 = Adam::new(full_cfg.lr, full_cfg.beta1, full_cfg.beta2);
        let part_cfg = cfg(5);
        train_registration(
            &data, &mut bundle2, &part_cfg, &ccfg, &mcfg, &mut adam2, 0, None, None,
        )
        .unwrap();
        save_train_state(&ckpt_path, &mut bundle2, &adam2, &full_cfg, "hash", 5).unwrap();

        let mut bundle3 = RegModelBundle::build(&full_cfg, 2, None, None).unwrap();
        let mut adam3 = Adam::new(full_cfg.lr, full_cfg.beta1, full_cfg.beta2);
        let resumed_at =
            load_train_state(&ckpt_path, &mut bundle3, &mut adam3, &full_cfg, "hash").unwrap();
        assert_eq!(resumed_at, 5);
        let resumed = train_registration(
            &data, &mut bundle3, &full_cfg, &ccfg, &mcfg, &mut adam3, resumed_at, None, None,
        )
        .unwrap();
        // the resumed tail must match the uninterrupted run bit-for-bit
        let tail = &full.log[5..];
        assert_eq!(tail.len(), resumed.log.len());
        for (a, b) in tail.iter().zip(resumed.log.iter()) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
            assert_eq!(a.l_sim.to_bits(), b.l_sim.to_bits());
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn hash_mismatch_rejected() {
        let data = data();
        let c = cfg(2);
        let mut bundle = RegModelBundle::build(&c, 2, None, None).unwrap();
        let mut adam = Adam::new(c.lr, c.beta1, c.beta2);
        train_registration(
            &data,
            &mut bundle,
            &c,
            &ContrastiveConfig::default(),
            &MetricConfig::default(),
            &mut adam,
            0,
            None,
            None,
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_train_state(&path, &mut bundle, &adam, &c, "hash-a", 2).unwrap();
        let mut bundle2 = RegModelBundle::build(&c, 2, None, None).unwrap();
        let mut adam2 = Adam::new(c.lr, c.beta1, c.beta2);
        let err = load_train_state(&path, &mut bundle2, &mut adam2, &c, "hash-b").unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn changed_width_rejected() {
        let data = data();
        let c = cfg(2);
        let mut bundle = RegModelBundle::build(&c, 2, None, None).unwrap();
        let mut adam = Adam::new(c.lr, c.beta1, c.beta2);
        train_registration(
            &data,
            &mut bundle,
            &c,
            &ContrastiveConfig::default(),
            &MetricConfig::default(),
            &mut adam,
            0,
            None,
            None,
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_train_state(&path, &mut bundle, &adam, &c, "hash", 2).unwrap();
        let mut wide = c.clone();
        wide.ch = 16;
        let mut bundle2 = RegModelBundle::build(&wide, 2, None, None).unwrap();
        let mut adam2 = Adam::new(c.lr, c.beta1, c.beta2);
        let err = load_train_state(&path, &mut bundle2, &mut adam2, &wide, "hash").unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }
}
