//! Named weight tensors and the `SSTW1` weight container.
//!
//! Container layout:
//!
//! ```text
//! SSTW1 weights\n
//! tensors <count>\n
//! <name> f32 <d0>x<d1>... <offset> <nbytes>\n      (one line per tensor, sorted by name)
//! end\n
//! <payload: raw little-endian f32 values; offsets are relative to payload start>
//! ```
//!
//! Matrices are stored `[in, out]` so a row-major activation multiplies them
//! directly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &str = "SSTW1 weights";

pub const TOK_EMBEDDINGS: &str = "tok_embeddings";
pub const FINAL_NORM: &str = "norm";
pub const OUTPUT: &str = "output";

/// Per-layer tensor names.
#[derive(Clone, Debug)]
pub struct LayerNames {
    pub attention_norm: String,
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub ffn_norm: String,
    pub w_gate: String,
    pub w_up: String,
    pub w_down: String,
}

impl LayerNames {
    pub fn new(layer: usize) -> Self {
        let p = format!("layers.{layer}");
        Self {
            attention_norm: format!("{p}.attention_norm"),
            wq: format!("{p}.attention.wq"),
            wk: format!("{p}.attention.wk"),
            wv: format!("{p}.attention.wv"),
            wo: format!("{p}.attention.wo"),
            ffn_norm: format!("{p}.ffn_norm"),
            w_gate: format!("{p}.feed_forward.w_gate"),
            w_up: format!("{p}.feed_forward.w_up"),
            w_down: format!("{p}.feed_forward.w_down"),
        }
    }
}

/// Every tensor `cfg` requires, with its expected shape.
pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut m = BTreeMap::new();
    m.insert(TOK_EMBEDDINGS.to_string(), vec![cfg.vocab_size, d]);
    m.insert(FINAL_NORM.to_string(), vec![d]);
    m.insert(OUTPUT.to_string(), vec![d, cfg.vocab_size]);
    for layer in 0..cfg.n_layers {
        let n = LayerNames::new(layer);
        m.insert(n.attention_norm, vec![d]);
        m.insert(n.wq, vec![d, cfg.n_heads * cfg.head_dim()]);
        m.insert(n.wk, vec![d, cfg.kv_dim()]);
        m.insert(n.wv, vec![d, cfg.kv_dim()]);
        m.insert(n.wo, vec![cfg.n_heads * cfg.head_dim(), d]);
        m.insert(n.ffn_norm, vec![d]);
        m.insert(n.w_gate, vec![d, f]);
        m.insert(n.w_up, vec![d, f]);
        m.insert(n.w_down, vec![f, d]);
    }
    m
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct WeightBundle {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks every tensor `cfg` needs is present with its exact shape.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (name, shape) in expected_shapes(cfg) {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            t.ensure_finite("load_weights")?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and payload bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(t.content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "{WEIGHTS_MAGIC}");
        let _ = writeln!(header, "tensors {}", self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let nbytes = t.numel() * 4;
            let _ = writeln!(header, "{name} f32 {} {offset} {nbytes}", dims.join("x"));
            offset += nbytes;
        }
        let _ = writeln!(header, "end");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut next_line = |what: &str| -> Result<&str> {
            let rest = &bytes[cursor..];
            let end = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| Error::Container(format!("truncated header reading {what}")))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::Container(format!("non-UTF-8 header reading {what}")))?;
            cursor += end + 1;
            Ok(line)
        };

        let magic = next_line("magic")?;
        if magic != WEIGHTS_MAGIC {
            return Err(Error::Container(format!("bad magic `{magic}`")));
        }
        let count_line = next_line("tensor count")?;
        let count: usize = count_line
            .strip_prefix("tensors ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Container(format!("bad count line `{count_line}`")))?;

        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line("tensor entry")?;
            entries.push(parse_entry(line)?);
        }
        let end = next_line("end marker")?;
        if end != "end" {
            return Err(Error::Container(format!("expected `end`, found `{end}`")));
        }

        let payload = &bytes[cursor..];
        let mut tensors = BTreeMap::new();
        for (name, shape, offset, nbytes) in entries {
            let numel: usize = shape.iter().product();
            if nbytes != numel * 4 {
                return Err(Error::Container(format!(
                    "`{name}`: {nbytes} bytes does not fit shape {shape:?}"
                )));
            }
            let stop = offset
                .checked_add(nbytes)
                .ok_or_else(|| Error::Container(format!("`{name}`: offset overflow")))?;
            if stop > payload.len() {
                return Err(Error::Container(format!(
                    "truncated payload: `{name}` needs bytes {offset}..{stop}, have {}",
                    payload.len()
                )));
            }
            let data = payload[offset..stop]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors
                .insert(name.clone(), Tensor::new(shape, data)?)
                .is_some()
            {
                return Err(Error::Container(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn parse_entry(line: &str) -> Result<(String, Vec<usize>, usize, usize)> {
    let bad = || Error::Container(format!("bad tensor entry `{line}`"));
    let parts: Vec<&str> = line.split(' ').collect();
    if parts.len() != 5 {
        return Err(bad());
    }
    if parts[1] != "f32" {
        return Err(Error::Container(format!(
            "`{}`: unsupported dtype `{}`",
            parts[0], parts[1]
        )));
    }
    let shape = parts[2]
        .split('x')
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| bad())?;
    let offset = parts[3].parse().map_err(|_| bad())?;
    let nbytes = parts[4].parse().map_err(|_| bad())?;
    Ok((parts[0].to_string(), shape, offset, nbytes))
}

/// Reads a container and validates it against `cfg`.
pub fn load_weights(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<WeightBundle> {
    let bundle = WeightBundle::from_bytes(&std::fs::read(path)?)?;
    bundle.validate(cfg)?;
    Ok(bundle)
}

/// Seeded Gaussian initialization. Matrices (including embedding and output
/// head) draw from N(0, 1/d_model); norm gains start at one.
pub fn init_random_weights(cfg: &ModelConfig, seed: u64) -> WeightBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (cfg.d_model as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let mut bundle = WeightBundle::new();
    for (name, shape) in expected_shapes(cfg) {
        let numel: usize = shape.iter().product();
        let t = if shape.len() == 1 {
            Tensor::full(&shape, 1.0)
        } else {
            let data = (0..numel).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("shape matches numel")
        };
        bundle.insert(name, t);
    }
    bundle
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = ModelConfig::toy();
        let a = init_random_weights(&cfg, 1);
        let b = init_random_weights(&cfg, 1);
        let c = init_random_weights(&cfg, 2);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        a.validate(&cfg).unwrap();
    }

    #[test]
    fn projection_std_near_inverse_sqrt_d() {
        let cfg = ModelConfig::toy();
        let bundle = init_random_weights(&cfg, 42);
        let target = 1.0 / (cfg.d_model as f64).sqrt();
        for name in bundle.names() {
            let t = bundle.get(name).unwrap();
            if t.shape().len() != 2 {
                continue;
            }
            let n = t.numel() as f64;
            let mean = t.data().iter().map(|v| *v as f64).sum::<f64>() / n;
            let var = t
                .data()
                .iter()
                .map(|v| (*v as f64 - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            let rel = (var.sqrt() - target).abs() / target;
            assert!(rel < 0.2, "{name}: std off by {rel}");
        }
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let cfg = ModelConfig::toy();
        let bundle = init_random_weights(&cfg, 5);
        let bytes = bundle.to_bytes();
        let back = WeightBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.content_hash(), bundle.content_hash());
    }

    #[test]
    fn missing_tensor_is_named() {
        let cfg = ModelConfig::toy();
        let mut bundle = init_random_weights(&cfg, 5);
        bundle.remove("layers.3.feed_forward.w_gate");
        let err = bundle.validate(&cfg).unwrap_err();
        assert!(err.to_string().contains("layers.3.feed_forward.w_gate"));
    }

    #[test]
    fn wrong_shape_rejected() {
        let cfg = ModelConfig::toy();
        let mut bundle = init_random_weights(&cfg, 5);
        bundle.insert("norm", Tensor::full(&[63], 1.0));
        assert!(matches!(
            bundle.validate(&cfg),
            Err(Error::TensorShape { name, .. }) if name == "norm"
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let cfg = ModelConfig::toy();
        let bytes = init_random_weights(&cfg, 5).to_bytes();
        let err = WeightBundle::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated payload"));
        assert!(WeightBundle::from_bytes(b"SSTW1 weights\ntensors 1\n").is_err());
        assert!(WeightBundle::from_bytes(b"nope\n").is_err());
    }
}
