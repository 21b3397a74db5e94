//! The base transformer path: embedding, grouped-query attention with rotary
//! positions, SwiGLU feed-forward, RMSNorm, KV cache and output head.
//!
//! Activations are `[batch, seq, d_model]`. Residual additions live in the
//! block functions; the attention and FFN sub-ops return only their own term.

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{self, matmul, rms_norm, rope_rotate_row, softmax_in_place, Tensor};
use crate::weights::{LayerNames, WeightBundle, FINAL_NORM, OUTPUT, TOK_EMBEDDINGS};

/// Per-layer attention keys and values, `[batch, n_kv_heads, max_seq, head_dim]`.
///
/// Positions below `cur_pos` are persisted context. Writes at or above
/// `cur_pos` are scratch until [`KvCache::advance`] moves the boundary, which
/// is how a recursion pass can rewrite the current slot without disturbing
/// history.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    batch: usize,
    n_kv_heads: usize,
    max_seq: usize,
    head_dim: usize,
    cur_pos: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig, batch: usize) -> Self {
        let per_layer = batch * cfg.n_kv_heads * cfg.max_seq * cfg.head_dim();
        Self {
            keys: vec![vec![0.0; per_layer]; cfg.n_layers],
            values: vec![vec![0.0; per_layer]; cfg.n_layers],
            batch,
            n_kv_heads: cfg.n_kv_heads,
            max_seq: cfg.max_seq,
            head_dim: cfg.head_dim(),
            cur_pos: 0,
        }
    }

    pub fn cur_pos(&self) -> usize {
        self.cur_pos
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Persists `n` more positions.
    pub fn advance(&mut self, n: usize) -> Result<()> {
        let needed = self.cur_pos + n;
        if needed > self.max_seq {
            return Err(Error::ContextOverflow {
                needed,
                max_seq: self.max_seq,
            });
        }
        self.cur_pos = needed;
        Ok(())
    }

    /// Zeroes all entries and rewinds to position 0.
    pub fn reset(&mut self) {
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            buf.fill(0.0);
        }
        self.cur_pos = 0;
    }

    fn offset(&self, b: usize, head: usize, pos: usize) -> usize {
        ((b * self.n_kv_heads + head) * self.max_seq + pos) * self.head_dim
    }

    pub fn key(&self, layer: usize, b: usize, head: usize, pos: usize) -> &[f32] {
        let o = self.offset(b, head, pos);
        &self.keys[layer][o..o + self.head_dim]
    }

    pub fn value(&self, layer: usize, b: usize, head: usize, pos: usize) -> &[f32] {
        let o = self.offset(b, head, pos);
        &self.values[layer][o..o + self.head_dim]
    }

    fn write(&mut self, layer: usize, b: usize, head: usize, pos: usize, k: &[f32], v: &[f32]) {
        let o = self.offset(b, head, pos);
        self.keys[layer][o..o + self.head_dim].copy_from_slice(k);
        self.values[layer][o..o + self.head_dim].copy_from_slice(v);
    }

    /// Hash of every key/value entry at positions `< upto`, all layers.
    pub fn prefix_digest(&self, upto: usize) -> String {
        let mut h = Sha256::new();
        for layer in 0..self.keys.len() {
            for b in 0..self.batch {
                for head in 0..self.n_kv_heads {
                    for pos in 0..upto.min(self.max_seq) {
                        for v in self.key(layer, b, head, pos) {
                            h.update(v.to_le_bytes());
                        }
                        for v in self.value(layer, b, head, pos) {
                            h.update(v.to_le_bytes());
                        }
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// True when nothing is persisted and every entry is zero.
    pub fn is_pristine(&self) -> bool {
        self.cur_pos == 0
            && self
                .keys
                .iter()
                .chain(self.values.iter())
                .all(|buf| buf.iter().all(|v| v.to_bits() == 0))
    }
}

/// Causal mask for `s` query rows starting at absolute position `start_pos`:
/// row `i` sees key positions `0..=start_pos + i`.
///
/// Masked scores are never materialized as `-inf`; attention restricts its
/// softmax to the visible prefix, which is equivalent and keeps every kernel
/// input finite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub start_pos: usize,
    pub s: usize,
}

impl AttentionMask {
    pub fn causal(start_pos: usize, s: usize) -> Self {
        Self { start_pos, s }
    }

    pub fn is_visible(&self, row: usize, key_pos: usize) -> bool {
        key_pos <= self.start_pos + row
    }

    pub fn visible_len(&self, row: usize) -> usize {
        self.start_pos + row + 1
    }

    /// Dense `[s, start_pos + s]` view with `-inf` above the diagonal.
    pub fn to_dense(&self) -> Vec<Vec<f32>> {
        (0..self.s)
            .map(|i| {
                (0..self.start_pos + self.s)
                    .map(|j| if self.is_visible(i, j) { 0.0 } else { f32::NEG_INFINITY })
                    .collect()
            })
            .collect()
    }
}

/// Hooks into a forward pass. Both callbacks observe; neither may alter the
/// computation.
pub trait ForwardObserver {
    /// The residual stream fed to the FFN norm: `h` in the base path,
    /// the blended `h_blend` in the state-stream path.
    fn residual_mix(&mut self, _layer: usize, _mixed: &Tensor) -> Result<()> {
        Ok(())
    }

    /// Block output (post-FFN residual stream) of `layer`.
    fn block_output(&mut self, _layer: usize, _start_pos: usize, _out: &Tensor) -> Result<()> {
        Ok(())
    }
}

impl ForwardObserver for () {}

impl<T: ForwardObserver + ?Sized> ForwardObserver for &mut T {
    fn residual_mix(&mut self, layer: usize, mixed: &Tensor) -> Result<()> {
        (**self).residual_mix(layer, mixed)
    }
    fn block_output(&mut self, layer: usize, start_pos: usize, out: &Tensor) -> Result<()> {
        (**self).block_output(layer, start_pos, out)
    }
}

impl<A: ForwardObserver, B: ForwardObserver> ForwardObserver for (A, B) {
    fn residual_mix(&mut self, layer: usize, mixed: &Tensor) -> Result<()> {
        self.0.residual_mix(layer, mixed)?;
        self.1.residual_mix(layer, mixed)
    }
    fn block_output(&mut self, layer: usize, start_pos: usize, out: &Tensor) -> Result<()> {
        self.0.block_output(layer, start_pos, out)?;
        self.1.block_output(layer, start_pos, out)
    }
}

pub(crate) struct LayerWeights<'w> {
    pub attention_norm: &'w Tensor,
    pub wq: &'w Tensor,
    pub wk: &'w Tensor,
    pub wv: &'w Tensor,
    pub wo: &'w Tensor,
    pub ffn_norm: &'w Tensor,
    pub w_gate: &'w Tensor,
    pub w_up: &'w Tensor,
    pub w_down: &'w Tensor,
}

/// A validated read-only view over a [`WeightBundle`]. Any number of models,
/// base or state-stream, can borrow the same bundle.
pub struct Model<'w> {
    cfg: ModelConfig,
    bundle: &'w WeightBundle,
    embed: &'w Tensor,
    final_norm: &'w Tensor,
    output: &'w Tensor,
    layers: Vec<LayerWeights<'w>>,
}

impl<'w> Model<'w> {
    pub fn new(cfg: &ModelConfig, bundle: &'w WeightBundle) -> Result<Self> {
        cfg.validate()?;
        bundle.validate(cfg)?;
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let n = LayerNames::new(i);
                Ok(LayerWeights {
                    attention_norm: bundle.get(&n.attention_norm)?,
                    wq: bundle.get(&n.wq)?,
                    wk: bundle.get(&n.wk)?,
                    wv: bundle.get(&n.wv)?,
                    wo: bundle.get(&n.wo)?,
                    ffn_norm: bundle.get(&n.ffn_norm)?,
                    w_gate: bundle.get(&n.w_gate)?,
                    w_up: bundle.get(&n.w_up)?,
                    w_down: bundle.get(&n.w_down)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            bundle,
            embed: bundle.get(TOK_EMBEDDINGS)?,
            final_norm: bundle.get(FINAL_NORM)?,
            output: bundle.get(OUTPUT)?,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &'w WeightBundle {
        self.bundle
    }

    pub(crate) fn layer(&self, layer: usize) -> &LayerWeights<'w> {
        &self.layers[layer]
    }

    pub fn new_kv_cache(&self, batch: usize) -> KvCache {
        KvCache::new(&self.cfg, batch)
    }

    /// Grouped-query attention term for `layer`. `x_normed` is the
    /// already-normalized block input. Keys/values for the current rows are
    /// written at `[start_pos, start_pos + s)`; `cur_pos` is left alone.
    pub fn attention_block(
        &self,
        x_normed: &Tensor,
        layer: usize,
        kv: &mut KvCache,
        start_pos: usize,
        mask: &AttentionMask,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (b, s) = self.batch_seq(x_normed, "attention_block")?;
        if b != kv.batch() {
            return Err(Error::Shape {
                op: "attention_block",
                detail: format!("batch {b} vs kv cache batch {}", kv.batch()),
            });
        }
        if mask.s != s || mask.start_pos != start_pos {
            return Err(Error::Shape {
                op: "attention_block",
                detail: format!("mask {mask:?} does not cover s={s} at start_pos={start_pos}"),
            });
        }
        if start_pos + s > cfg.max_seq {
            return Err(Error::ContextOverflow {
                needed: start_pos + s,
                max_seq: cfg.max_seq,
            });
        }
        let w = &self.layers[layer];
        let hd = cfg.head_dim();
        let (n_heads, n_kv) = (cfg.n_heads, cfg.n_kv_heads);
        let mut q = matmul(x_normed, w.wq)?;
        let mut k = matmul(x_normed, w.wk)?;
        let v = matmul(x_normed, w.wv)?;

        for bi in 0..b {
            for t in 0..s {
                let row = bi * s + t;
                let pos = start_pos + t;
                for chunk in q.row_mut(row).chunks_exact_mut(hd) {
                    rope_rotate_row(chunk, pos, cfg.rope_theta);
                }
                for chunk in k.row_mut(row).chunks_exact_mut(hd) {
                    rope_rotate_row(chunk, pos, cfg.rope_theta);
                }
                for head in 0..n_kv {
                    let span = head * hd..(head + 1) * hd;
                    kv.write(layer, bi, head, pos, &k.row(row)[span.clone()], &v.row(row)[span]);
                }
            }
        }

        let scale = 1.0 / (hd as f32).sqrt();
        let group = cfg.group_size();
        let mut attn = Tensor::zeros(&[b, s, n_heads * hd]);
        let mut scores = Vec::with_capacity(start_pos + s);
        for bi in 0..b {
            for t in 0..s {
                let row = bi * s + t;
                let visible = mask.visible_len(t);
                for head in 0..n_heads {
                    let kv_head = head / group;
                    let qh = &q.row(row)[head * hd..(head + 1) * hd];
                    scores.clear();
                    for pos in 0..visible {
                        let kh = kv.key(layer, bi, kv_head, pos);
                        let mut dot = 0.0f32;
                        for (a, c) in qh.iter().zip(kh) {
                            dot += a * c;
                        }
                        scores.push(dot * scale);
                    }
                    tensor::ensure_finite("attention scores", &scores)?;
                    softmax_in_place(&mut scores);
                    let out = &mut attn.row_mut(row)[head * hd..(head + 1) * hd];
                    for (pos, p) in scores.iter().enumerate() {
                        for (o, vv) in out.iter_mut().zip(kv.value(layer, bi, kv_head, pos)) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        matmul(&attn, w.wo)
    }

    /// `w_down(silu(w_gate x) * (w_up x))` on an already-normalized input.
    pub fn ffn_swiglu(&self, x_normed: &Tensor, layer: usize) -> Result<Tensor> {
        let w = &self.layers[layer];
        let gate = matmul(x_normed, w.w_gate)?;
        let up = matmul(x_normed, w.w_up)?;
        let mut hidden = up;
        for (u, g) in hidden.data_mut().iter_mut().zip(gate.data()) {
            *u *= tensor::silu_scalar(*g);
        }
        hidden.ensure_finite("ffn_swiglu")?;
        matmul(&hidden, w.w_down)
    }

    /// `h = x + attn(norm(x))`, `out = h + ffn(norm(h))`.
    pub fn block_forward_base(
        &self,
        x: &Tensor,
        layer: usize,
        kv: &mut KvCache,
        start_pos: usize,
        mask: &AttentionMask,
        obs: &mut dyn ForwardObserver,
    ) -> Result<Tensor> {
        let w = &self.layers[layer];
        let eps = self.cfg.norm_eps;
        let x_normed = rms_norm(x, w.attention_norm, eps)?;
        let h = x.add(&self.attention_block(&x_normed, layer, kv, start_pos, mask)?)?;
        obs.residual_mix(layer, &h)?;
        let h_normed = rms_norm(&h, w.ffn_norm, eps)?;
        let out = h.add(&self.ffn_swiglu(&h_normed, layer)?)?;
        obs.block_output(layer, start_pos, &out)?;
        Ok(out)
    }

    /// Logits `[1, s, vocab]` for one sequence through the base path.
    pub fn forward_base(
        &self,
        tokens: &[u32],
        kv: &mut KvCache,
        start_pos: usize,
        obs: &mut dyn ForwardObserver,
    ) -> Result<Tensor> {
        self.forward_base_batch(&[tokens], kv, start_pos, obs)
    }

    pub fn forward_base_batch(
        &self,
        batch: &[&[u32]],
        kv: &mut KvCache,
        start_pos: usize,
        obs: &mut dyn ForwardObserver,
    ) -> Result<Tensor> {
        let mut x = self.embed(batch)?;
        let mask = AttentionMask::causal(start_pos, x.shape()[1]);
        for layer in 0..self.cfg.n_layers {
            x = self.block_forward_base(&x, layer, kv, start_pos, &mask, obs)?;
        }
        self.head(&x)
    }

    /// Token embeddings `[b, s, d]`; all rows must have equal, non-zero length.
    pub(crate) fn embed(&self, batch: &[&[u32]]) -> Result<Tensor> {
        let s = batch.first().map_or(0, |r| r.len());
        if s == 0 || batch.iter().any(|r| r.len() != s) {
            return Err(Error::Shape {
                op: "embed",
                detail: "token rows must be non-empty and of equal length".into(),
            });
        }
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(batch.len() * s * d);
        for &id in batch.iter().flat_map(|r| r.iter()) {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
            data.extend_from_slice(self.embed.row(id as usize));
        }
        Tensor::new(vec![batch.len(), s, d], data)
    }

    pub(crate) fn head(&self, x: &Tensor) -> Result<Tensor> {
        let normed = rms_norm(x, self.final_norm, self.cfg.norm_eps)?;
        matmul(&normed, self.output)
    }

    fn batch_seq(&self, x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        match x.shape() {
            [b, s, d] if *d == self.cfg.d_model => Ok((*b, *s)),
            other => Err(Error::Shape {
                op,
                detail: format!("expected [b, s, {}], got {other:?}", self.cfg.d_model),
            }),
        }
    }
}
