//! Model hyperparameters and the flat key/value config format.
//!
//! ```text
//! SSTW1 config
//! # comments and blank lines are ignored
//! d_model = 64
//! n_layers = 4
//! ...
//! ```
//!
//! The first meaningful line must be the `SSTW1 config` magic. Keys not listed
//! in [`MODEL_KEYS`] or [`STREAM_KEYS`] are rejected so typos surface early.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CONFIG_MAGIC: &str = "SSTW1 config";

pub const MODEL_KEYS: &[&str] = &[
    "d_model",
    "n_layers",
    "n_heads",
    "n_kv_heads",
    "d_ff",
    "vocab_size",
    "max_seq",
    "rope_theta",
    "norm_eps",
];

/// Keys read by [`crate::state::StreamConfig::from_kv`].
pub const STREAM_KEYS: &[&str] = &["alpha", "recursions", "alignment", "cache_norm"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
}

impl ModelConfig {
    /// The desk-scale model used throughout the tests.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 172,
            vocab_size: 259,
            max_seq: 512,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
        }
    }

    /// Llama 3.1 8B hyperparameters, for memory accounting only.
    pub fn llama_8b_shape() -> Self {
        Self {
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            n_kv_heads: 8,
            d_ff: 14336,
            vocab_size: 128_256,
            max_seq: 8192,
            rope_theta: 500_000.0,
            norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(config_err("rope_theta", "must be positive"));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(config_err("norm_eps", "must be positive"));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(config_err(
                "n_heads",
                &format!(
                    "n_heads not divisible by n_kv_heads ({} % {} != 0)",
                    self.n_heads, self.n_kv_heads
                ),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err(
                "d_model",
                &format!(
                    "d_model not divisible by n_heads ({} % {} != 0)",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(config_err(
                "d_model",
                &format!("head_dim {} must be even for rotary embedding", self.head_dim()),
            ));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let cfg = Self {
            d_model: kv.require("d_model")?,
            n_layers: kv.require("n_layers")?,
            n_heads: kv.require("n_heads")?,
            n_kv_heads: kv.require("n_kv_heads")?,
            d_ff: kv.require("d_ff")?,
            vocab_size: kv.require("vocab_size")?,
            max_seq: kv.require("max_seq")?,
            rope_theta: kv.get("rope_theta")?.unwrap_or(10000.0),
            norm_eps: kv.get("norm_eps")?.unwrap_or(1e-5),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CONFIG_MAGIC}");
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "n_layers = {}", self.n_layers);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "n_kv_heads = {}", self.n_kv_heads);
        let _ = writeln!(s, "d_ff = {}", self.d_ff);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "max_seq = {}", self.max_seq);
        let _ = writeln!(s, "rope_theta = {}", self.rope_theta);
        let _ = writeln!(s, "norm_eps = {}", self.norm_eps);
        s
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    ModelConfig::parse(&std::fs::read_to_string(path)?)
}

fn config_err(field: &str, reason: &str) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

/// Parsed `key = value` lines, keyed by name, remembering source line numbers.
#[derive(Clone, Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut seen_magic = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !seen_magic {
                if line != CONFIG_MAGIC {
                    return Err(Error::Parse {
                        line: line_no,
                        reason: format!("expected `{CONFIG_MAGIC}` header, found `{line}`"),
                    });
                }
                seen_magic = true;
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                reason: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            if !MODEL_KEYS.contains(&key) && !STREAM_KEYS.contains(&key) {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("unknown key `{key}`"),
                });
            }
            if entries
                .insert(key.to_string(), (value.trim().to_string(), line_no))
                .is_some()
            {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("duplicate key `{key}`"),
                });
            }
        }
        if !seen_magic {
            return Err(Error::Parse {
                line: 0,
                reason: format!("missing `{CONFIG_MAGIC}` header"),
            });
        }
        Ok(Self { entries })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((raw, line)) => raw.parse().map(Some).map_err(|_| Error::Parse {
                line: *line,
                reason: format!("bad value `{raw}` for `{key}`"),
            }),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| config_err(key, "missing required key"))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "SSTW1 config\nd_model = 64\nn_layers = 4\nn_heads = 4\nn_kv_heads = 2\n\
                       d_ff = 172\nvocab_size = 259\nmax_seq = 512\n";

    #[test]
    fn toy_config_parses_with_defaults() {
        let cfg = ModelConfig::parse(TOY).unwrap();
        assert_eq!(cfg, ModelConfig::toy());
        assert_eq!(cfg.head_dim(), 16);
        assert_eq!(cfg.group_size(), 2);
    }

    #[test]
    fn heads_must_divide() {
        let text = TOY.replace("n_heads = 4", "n_heads = 3");
        let err = ModelConfig::parse(&text).unwrap_err();
        match err {
            Error::Config { field, reason } => {
                assert_eq!(field, "n_heads");
                assert!(reason.contains("n_heads not divisible"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn paper_shape_is_valid_without_weights() {
        let cfg = ModelConfig::llama_8b_shape();
        cfg.validate().unwrap();
        let reparsed = ModelConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(reparsed.d_model, 4096);
        assert_eq!(reparsed.n_layers, 32);
    }

    #[test]
    fn zero_field_named_in_error() {
        let text = TOY.replace("d_ff = 172", "d_ff = 0");
        assert!(matches!(
            ModelConfig::parse(&text),
            Err(Error::Config { field, .. }) if field == "d_ff"
        ));
    }

    #[test]
    fn parse_errors() {
        assert!(ModelConfig::parse("d_model = 64\n").is_err());
        assert!(ModelConfig::parse(&format!("{TOY}bogus = 1\n")).is_err());
        assert!(ModelConfig::parse(&format!("{TOY}d_model = 64\n")).is_err());
        assert!(ModelConfig::parse(&TOY.replace("= 172", "= lots")).is_err());
        let missing = TOY.replace("max_seq = 512\n", "");
        assert!(matches!(
            ModelConfig::parse(&missing),
            Err(Error::Config { field, .. }) if field == "max_seq"
        ));
    }

    #[test]
    fn to_text_round_trips() {
        let cfg = ModelConfig::toy();
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
