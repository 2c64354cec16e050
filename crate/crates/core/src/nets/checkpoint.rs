//! Checkpoint container: parameter blobs keyed by module path plus a
//! structured-text manifest (kind, config hash, iteration, seed, optional
//! metadata such as optimizer and RNG state), with a SHA-256 payload digest
//! for integrity checking.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "checkpoint v1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub iteration: u64,
    pub seed: u64,
    /// Free-form metadata lines (`meta <key> <value>`).
    pub meta: Vec<(String, String)>,
    /// Named tensors in manifest order, f32 little-endian on disk.
    pub tensors: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        for (_, values) in &self.tensors {
            for &v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = hex_digest(&payload);
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("kind {}\n", self.kind));
        head.push_str(&format!("config_hash {}\n", self.config_hash));
        head.push_str(&format!("iteration {}\n", self.iteration));
        head.push_str(&format!("seed {}\n", self.seed));
        head.push_str(&format!("payload_sha256 {digest}\n"));
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, values) in &self.tensors {
            head.push_str(&format!("tensor {name} {}\n", values.len()));
        }
        head.push_str("---\n");
        let mut file = fs::File::create(path)?;
        file.write_all(head.as_bytes())?;
        file.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        let sep = b"---\n";
        let pos = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| Error::Integrity("checkpoint missing manifest terminator".into()))?;
        let head = std::str::from_utf8(&bytes[..pos])
            .map_err(|e| Error::Integrity(format!("manifest not UTF-8: {e}")))?;
        let payload = &bytes[pos + sep.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let mut ckpt = Checkpoint::default();
        let mut expected_digest = String::new();
        let mut tensor_specs: Vec<(String, usize)> = Vec::new();
        for line in lines {
            let mut it = line.splitn(2, ' ');
            let key = it.next().unwrap_or_default();
            let rest = it.next().unwrap_or_default();
            match key {
                "kind" => ckpt.kind = rest.to_string(),
                "config_hash" => ckpt.config_hash = rest.to_string(),
                "iteration" => {
                    ckpt.iteration = rest
                        .parse()
                        .map_err(|e| Error::Integrity(format!("bad iteration: {e}")))?;
                }
                "seed" => {
                    ckpt.seed = rest
                        .parse()
                        .map_err(|e| Error::Integrity(format!("bad seed: {e}")))?;
                }
                "payload_sha256" => expected_digest = rest.to_string(),
                "meta" => {
                    let mut kv = rest.splitn(2, ' ');
                    let k = kv.next().unwrap_or_default().to_string();
                    let v = kv.next().unwrap_or_default().to_string();
                    ckpt.meta.push((k, v));
                }
                "tensor" => {
                    let mut kv = rest.rsplitn(2, ' ');
                    let len: usize = kv
                        .next()
                        .unwrap_or_default()
                        .parse()
                        .map_err(|e| Error::Integrity(format!("bad tensor length: {e}")))?;
                    let name = kv.next().unwrap_or_default().to_string();
                    tensor_specs.push((name, len));
                }
                other => {
                    return Err(Error::Integrity(format!("unknown manifest key `{other}`")));
                }
            }
        }
        let digest = hex_digest(payload);
        if digest != expected_digest {
            return Err(Error::Integrity(format!(
                "payload digest mismatch: manifest {expected_digest}, actual {digest}"
            )));
        }
        let total: usize = tensor_specs.iter().map(|(_, l)| l).sum();
        if payload.len() != total * 4 {
            return Err(Error::Integrity(format!(
                "payload holds {} bytes but manifest declares {} floats",
                payload.len(),
                total
            )));
        }
        let mut offset = 0usize;
        for (name, len) in tensor_specs {
            let values: Vec<f32> = payload[offset..offset + len * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += len * 4;
            ckpt.tensors.push((name, values));
        }
        Ok(ckpt)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "test".into(),
            config_hash: "abc123".into(),
            iteration: 42,
            seed: 7,
            meta: vec![("rng_pos".into(), "99".into())],
            tensors: vec![
                ("net.w".into(), vec![1.0, -0.5, 0.25]),
                ("net.b".into(), vec![0.125]),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.config_hash, "abc123");
        assert_eq!(back.iteration, 42);
        assert_eq!(back.seed, 7);
        assert_eq!(back.meta_value("rng_pos"), Some("99"));
        assert_eq!(back.tensor("net.w"), Some([1.0f32, -0.5, 0.25].as_slice()));
        assert_eq!(back.tensor("net.b"), Some([0.125f32].as_slice()));
    }

    #[test]
    fn corrupt_payload_rejected_with_integrity_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        sample().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "got {err:?}");
    }
}
