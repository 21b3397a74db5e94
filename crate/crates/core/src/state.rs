//! Persistent per-layer state stream.
//!
//! Each layer keeps the previous block output `C`. On every pass the
//! post-attention residual `h` is mixed with the RMS-normalized cache:
//!
//! ```text
//! h_blend = (1 - alpha) * h + alpha * rms_norm(C[slice])
//! out     = h_blend + ffn(rms_norm(h_blend))
//! C       = out
//! ```
//!
//! The first pass over a layer seeds `C` with the normalized block input. The
//! cache never feeds back when `alpha == 0`, so that setting reproduces the
//! base path bit for bit.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::model::{AttentionMask, ForwardObserver, KvCache, Model};
use crate::tensor::{rms_norm, rms_norm_row, Tensor};

pub const DEFAULT_ALPHA: f32 = 0.027;
/// Lower end of the blend strengths where the state stream visibly matters.
pub const USEFUL_ALPHA_MIN: f32 = 0.013;
/// Upper end of that range; above it attractor states become likely.
pub const USEFUL_ALPHA_MAX: f32 = 0.04;
pub const DEFAULT_RECURSIONS: usize = 2;

/// Which cached rows line up with the `s` rows of the current pass when the
/// cache is longer than the pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Alignment {
    /// The first `s` cached rows.
    Head,
    /// The last `s` cached rows, i.e. the most recent state.
    #[default]
    Tail,
}

impl FromStr for Alignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Self::Head),
            "tail" => Ok(Self::Tail),
            other => Err(Error::Config {
                field: "alignment".into(),
                reason: format!("expected head|tail, got `{other}`"),
            }),
        }
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Head => "head",
            Self::Tail => "tail",
        })
    }
}

/// Gain used when normalizing the cache before blending.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CacheNorm {
    /// The layer's own post-attention (`ffn_norm`) gain.
    #[default]
    LayerGain,
    Unit,
}

impl FromStr for CacheNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Self::LayerGain),
            "unit" => Ok(Self::Unit),
            other => Err(Error::Config {
                field: "cache_norm".into(),
                reason: format!("expected layer|unit, got `{other}`"),
            }),
        }
    }
}

impl fmt::Display for CacheNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LayerGain => "layer",
            Self::Unit => "unit",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamConfig {
    /// Blend strength in `[0, 1]`.
    pub alpha: f32,
    /// Extra passes per token beyond the first.
    pub recursions: usize,
    pub alignment: Alignment,
    pub cache_norm: CacheNorm,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            recursions: DEFAULT_RECURSIONS,
            alignment: Alignment::Tail,
            cache_norm: CacheNorm::LayerGain,
        }
    }
}

impl StreamConfig {
    pub fn new(alpha: f32, recursions: usize) -> Result<Self> {
        let cfg = Self {
            alpha,
            recursions,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config {
                field: "alpha".into(),
                reason: format!("must lie in [0, 1], got {}", self.alpha),
            });
        }
        Ok(())
    }

    pub fn in_useful_range(&self) -> bool {
        (USEFUL_ALPHA_MIN..=USEFUL_ALPHA_MAX).contains(&self.alpha)
    }

    /// Reads the optional `alpha`, `recursions`, `alignment` and `cache_norm`
    /// keys, defaulting the rest.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            alpha: kv.get("alpha")?.unwrap_or(d.alpha),
            recursions: kv.get("recursions")?.unwrap_or(d.recursions),
            alignment: kv.get("alignment")?.unwrap_or(d.alignment),
            cache_norm: kv.get("cache_norm")?.unwrap_or(d.cache_norm),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-layer cached block outputs, each `[batch, cached_len, d]` or empty.
#[derive(Clone, Debug)]
pub struct StateCache {
    layers: Vec<Option<Tensor>>,
    d_model: usize,
}

impl StateCache {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self {
            layers: vec![None; n_layers],
            d_model,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_initialized(&self, layer: usize) -> bool {
        self.layers[layer].is_some()
    }

    /// True when no layer holds state.
    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Option::is_none)
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.layers[layer].as_ref()
    }

    pub fn cached_len(&self, layer: usize) -> Option<usize> {
        self.layers[layer].as_ref().map(|t| t.shape()[1])
    }

    /// Seeds `layer` with the normalized block input.
    pub fn init(&mut self, layer: usize, x_normed: &Tensor) -> Result<()> {
        if self.is_initialized(layer) {
            return Err(Error::CacheAlreadyInitialized(layer));
        }
        self.check_rows(layer, x_normed)?;
        self.layers[layer] = Some(x_normed.clone());
        Ok(())
    }

    /// Extends a cache shorter than the current pass with the matching rows of
    /// the normalized block input (the first-pass rule applied per position).
    pub fn grow(&mut self, layer: usize, x_normed: &Tensor) -> Result<()> {
        self.check_rows(layer, x_normed)?;
        let cache = self.layers[layer]
            .as_mut()
            .ok_or(Error::CacheUninitialized(layer))?;
        let (b, len, d) = dims3(cache);
        let s = x_normed.shape()[1];
        if b != x_normed.shape()[0] {
            return Err(batch_mismatch(layer, b, x_normed.shape()[0]));
        }
        if s <= len {
            return Ok(());
        }
        let mut data = Vec::with_capacity(b * s * d);
        for bi in 0..b {
            data.extend_from_slice(&cache.data()[bi * len * d..(bi + 1) * len * d]);
            data.extend_from_slice(&x_normed.data()[(bi * s + len) * d..(bi + 1) * s * d]);
        }
        *cache = Tensor::new(vec![b, s, d], data)?;
        Ok(())
    }

    /// `(1 - alpha) * h + alpha * rms_norm(C[slice])`. The cache is not modified.
    ///
    /// Under tail alignment a cache shorter than `h` is right-aligned and the
    /// uncovered leading rows of `h` pass through unchanged; head alignment
    /// requires at least `s` cached rows.
    pub fn blend(
        &self,
        layer: usize,
        h: &Tensor,
        alpha: f32,
        gain: &Tensor,
        eps: f32,
        alignment: Alignment,
    ) -> Result<Tensor> {
        let cache = self.layers[layer]
            .as_ref()
            .ok_or(Error::CacheUninitialized(layer))?;
        self.check_rows(layer, h)?;
        let (b, len, d) = dims3(cache);
        let s = h.shape()[1];
        if b != h.shape()[0] {
            return Err(batch_mismatch(layer, b, h.shape()[0]));
        }
        if len == 0 {
            return Err(Error::CacheShape {
                layer,
                detail: "empty cache".into(),
            });
        }
        if gain.numel() != d {
            return Err(Error::Shape {
                op: "cache_blend",
                detail: format!("gain width {} vs d {d}", gain.numel()),
            });
        }
        if alignment == Alignment::Head && len < s {
            return Err(Error::CacheShape {
                layer,
                detail: format!("head slice needs {s} cached rows, have {len}"),
            });
        }
        if alpha == 0.0 {
            return Ok(h.clone());
        }
        let keep = 1.0 - alpha;
        let mut out = h.clone();
        let mut cached = vec![0.0f32; d];
        for bi in 0..b {
            for t in 0..s {
                let src = match alignment {
                    Alignment::Head => Some(t),
                    Alignment::Tail => (t + len).checked_sub(s),
                };
                let Some(src) = src else { continue };
                cached.copy_from_slice(cache.row(bi * len + src));
                rms_norm_row(&mut cached, gain.data(), eps);
                for (o, c) in out.row_mut(bi * s + t).iter_mut().zip(&cached) {
                    *o = *o * keep + c * alpha;
                }
            }
        }
        out.ensure_finite("cache_blend")?;
        Ok(out)
    }

    /// Overwrites the cached rows aligned with `out` (the whole cache when the
    /// lengths match) with a copy of `out`.
    pub fn update(&mut self, layer: usize, out: &Tensor, alignment: Alignment) -> Result<()> {
        self.check_rows(layer, out)?;
        let cache = self.layers[layer]
            .as_mut()
            .ok_or(Error::CacheUninitialized(layer))?;
        let (b, len, d) = dims3(cache);
        let s = out.shape()[1];
        if b != out.shape()[0] {
            return Err(batch_mismatch(layer, b, out.shape()[0]));
        }
        if len == s {
            *cache = out.clone();
            return Ok(());
        }
        if len < s {
            return Err(Error::CacheShape {
                layer,
                detail: format!("update of {s} rows into a cache of {len}"),
            });
        }
        let first = match alignment {
            Alignment::Head => 0,
            Alignment::Tail => len - s,
        };
        for bi in 0..b {
            let dst = (bi * len + first) * d;
            cache.data_mut()[dst..dst + s * d]
                .copy_from_slice(&out.data()[bi * s * d..(bi + 1) * s * d]);
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(|l| *l = None);
    }

    /// Hash of one layer's contents (or of its absence).
    pub fn layer_digest(&self, layer: usize) -> String {
        match &self.layers[layer] {
            Some(t) => t.content_hash(),
            None => "uninitialized".into(),
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for layer in 0..self.layers.len() {
            h.update(self.layer_digest(layer).as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_rows(&self, layer: usize, t: &Tensor) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::CacheShape {
                layer,
                detail: format!("only {} layers", self.layers.len()),
            });
        }
        match t.shape() {
            [_, _, d] if *d == self.d_model => Ok(()),
            other => Err(Error::CacheShape {
                layer,
                detail: format!("expected [b, s, {}], got {other:?}", self.d_model),
            }),
        }
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn batch_mismatch(layer: usize, cached: usize, got: usize) -> Error {
    Error::CacheShape {
        layer,
        detail: format!("batch {got} vs cached batch {cached}"),
    }
}

impl Model<'_> {
    pub fn new_state_cache(&self) -> StateCache {
        StateCache::new(self.config().n_layers, self.config().d_model)
    }

    /// The base block with the state blend inserted between attention and FFN.
    #[allow(clippy::too_many_arguments)]
    pub fn block_forward_sst(
        &self,
        x: &Tensor,
        layer: usize,
        kv: &mut KvCache,
        state: &mut StateCache,
        start_pos: usize,
        mask: &AttentionMask,
        stream: &StreamConfig,
        obs: &mut dyn ForwardObserver,
    ) -> Result<Tensor> {
        let w = self.layer(layer);
        let eps = self.config().norm_eps;
        let x_normed = rms_norm(x, w.attention_norm, eps)?;
        let h = x.add(&self.attention_block(&x_normed, layer, kv, start_pos, mask)?)?;

        if !state.is_initialized(layer) {
            state.init(layer, &x_normed)?;
        } else {
            state.grow(layer, &x_normed)?;
        }
        let unit;
        let gain = match stream.cache_norm {
            CacheNorm::LayerGain => w.ffn_norm,
            CacheNorm::Unit => {
                unit = Tensor::full(&[self.config().d_model], 1.0);
                &unit
            }
        };
        let h_blend = state.blend(layer, &h, stream.alpha, gain, eps, stream.alignment)?;
        obs.residual_mix(layer, &h_blend)?;

        let blend_normed = rms_norm(&h_blend, w.ffn_norm, eps)?;
        let out = h_blend.add(&self.ffn_swiglu(&blend_normed, layer)?)?;
        state.update(layer, &out, stream.alignment)?;
        obs.block_output(layer, start_pos, &out)?;
        Ok(out)
    }

    pub fn forward_sst(
        &self,
        tokens: &[u32],
        kv: &mut KvCache,
        state: &mut StateCache,
        start_pos: usize,
        stream: &StreamConfig,
        obs: &mut dyn ForwardObserver,
    ) -> Result<Tensor> {
        self.forward_sst_batch(&[tokens], kv, state, start_pos, stream, obs)
    }

    pub fn forward_sst_batch(
        &self,
        batch: &[&[u32]],
        kv: &mut KvCache,
        state: &mut StateCache,
        start_pos: usize,
        stream: &StreamConfig,
        obs: &mut dyn ForwardObserver,
    ) -> Result<Tensor> {
        stream.validate()?;
        let mut x = self.embed(batch)?;
        let mask = AttentionMask::causal(start_pos, x.shape()[1]);
        for layer in 0..self.config().n_layers {
            x = self.block_forward_sst(&x, layer, kv, state, start_pos, &mask, stream, obs)?;
        }
        self.head(&x)
    }
}

/// Extra memory held by the state caches: one value per token, hidden unit
/// and layer.
pub fn cache_overhead(
    n_tokens: u64,
    d_model: u64,
    n_layers: u64,
    bytes_per_value: u64,
) -> Result<u64> {
    n_tokens
        .checked_mul(d_model)
        .and_then(|v| v.checked_mul(n_layers))
        .and_then(|v| v.checked_mul(bytes_per_value))
        .ok_or(Error::Overflow("cache_overhead"))
}
