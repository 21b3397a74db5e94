//! Greedy autoregressive decoding with thinking recursions.
//!
//! A step feeds one chunk of input (the prompt for the first step, the last
//! emitted token afterwards) through the model `1 + recursions` times. Every
//! pass starts at the same position with the same input embeddings: the KV
//! cache's persisted prefix, `cur_pos` and the sequence length stay frozen, the
//! current slot's keys/values are rewritten each pass, and only the state
//! caches carry anything from one pass to the next. The token emitted is the
//! argmax of the final pass; the position advances once afterwards.

mod repetition;
mod two_phase;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

pub use repetition::{detect_repetition, RepetitionConfig, RepetitionKind, RepetitionReport};
pub use two_phase::{
    run_two_phase, Attempt, BenchItem, Evaluation, ItemResult, TwoPhaseConfig, TwoPhaseSummary,
};

use crate::error::{Error, Result};
use crate::model::{ForwardObserver, KvCache, Model};
use crate::state::{StateCache, StreamConfig};
use crate::tensor::{argmax_slice, Tensor};
use crate::trace::{Trace, TraceRecorder, TraceSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// Control path: no state blending.
    #[default]
    Base,
    /// State-stream path.
    Sst,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Self::Base),
            "sst" => Ok(Self::Sst),
            other => Err(Error::Config {
                field: "mode".into(),
                reason: format!("expected base|sst, got `{other}`"),
            }),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Sst => "sst",
        })
    }
}

/// Observer of whole passes, on top of the per-block hooks.
pub trait StepObserver: ForwardObserver {
    fn begin_pass(&mut self, _step: usize, _pass: usize) {}

    /// Called after each pass, before the position advances.
    fn end_pass(&mut self, _step: usize, _pass: usize, _kv: &KvCache, _logits: &[f32]) {}
}

impl StepObserver for () {}

static NEXT_SESSION_ID: AtomicU64 = AtomicU64::new(1);

/// What a session looked like when it was created.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionProvenance {
    /// Process-unique id; two sessions never share one.
    pub session_id: u64,
    /// KV cache had no persisted positions and all-zero storage.
    pub kv_pristine: bool,
    /// No state-cache layer was initialized.
    pub state_empty: bool,
}

impl SessionProvenance {
    pub fn started_fresh(&self) -> bool {
        self.kv_pristine && self.state_empty
    }
}

/// Output of one prefill or decode step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub token: u32,
    /// Final-position logits of every pass, first pass first.
    pub pass_logits: Vec<Vec<f32>>,
    /// Argmax of each pass.
    pub pass_tokens: Vec<u32>,
    pub start_pos: usize,
}

impl StepOutput {
    pub fn final_logits(&self) -> &[f32] {
        self.pass_logits.last().expect("at least one pass")
    }
}

/// One sequence's mutable decoding state over a shared, immutable model.
pub struct Session<'m, 'w> {
    model: &'m Model<'w>,
    mode: Mode,
    stream: StreamConfig,
    kv: KvCache,
    state: StateCache,
    provenance: SessionProvenance,
    seq_len: usize,
    steps: usize,
    last_token: Option<u32>,
}

impl<'m, 'w> Session<'m, 'w> {
    pub fn new(model: &'m Model<'w>, mode: Mode, stream: StreamConfig) -> Result<Self> {
        stream.validate()?;
        let kv = model.new_kv_cache(1);
        let state = model.new_state_cache();
        let provenance = SessionProvenance {
            session_id: NEXT_SESSION_ID.fetch_add(1, Ordering::Relaxed),
            kv_pristine: kv.is_pristine(),
            state_empty: state.is_empty(),
        };
        Ok(Self {
            model,
            mode,
            stream,
            kv,
            state,
            provenance,
            seq_len: 0,
            steps: 0,
            last_token: None,
        })
    }

    pub fn provenance(&self) -> SessionProvenance {
        self.provenance
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn stream(&self) -> &StreamConfig {
        &self.stream
    }

    pub fn kv(&self) -> &KvCache {
        &self.kv
    }

    pub fn state(&self) -> &StateCache {
        &self.state
    }

    pub fn cur_pos(&self) -> usize {
        self.kv.cur_pos()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Number of steps (prefill included) completed.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Clears both caches so the session can start a new sequence.
    pub fn reset(&mut self) {
        self.kv.reset();
        self.state.reset();
        self.seq_len = 0;
        self.steps = 0;
        self.last_token = None;
    }

    /// Runs the whole prompt as the first step. Requires a fresh session.
    pub fn prefill(&mut self, prompt: &[u32], obs: &mut dyn StepObserver) -> Result<StepOutput> {
        if self.steps != 0 || self.kv.cur_pos() != 0 || !self.state.is_empty() {
            return Err(Error::Session("prefill on a session that is not fresh".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Session("empty prompt; prepend BOS".into()));
        }
        self.run_step(prompt, obs)
    }

    /// Feeds the last emitted token back in.
    pub fn decode_step(&mut self, obs: &mut dyn StepObserver) -> Result<StepOutput> {
        let token = self
            .last_token
            .ok_or_else(|| Error::Session("decode_step before prefill".into()))?;
        self.run_step(&[token], obs)
    }

    fn run_step(&mut self, chunk: &[u32], obs: &mut dyn StepObserver) -> Result<StepOutput> {
        let start_pos = self.kv.cur_pos();
        let needed = start_pos + chunk.len();
        if needed > self.kv.max_seq() {
            return Err(Error::ContextOverflow {
                needed,
                max_seq: self.kv.max_seq(),
            });
        }
        let passes = 1 + self.stream.recursions;
        let mut pass_logits = Vec::with_capacity(passes);
        let mut pass_tokens = Vec::with_capacity(passes);
        for pass in 0..passes {
            obs.begin_pass(self.steps, pass);
            let logits = match self.mode {
                Mode::Base => self.model.forward_base(chunk, &mut self.kv, start_pos, obs)?,
                Mode::Sst => self.model.forward_sst(
                    chunk,
                    &mut self.kv,
                    &mut self.state,
                    start_pos,
                    &self.stream,
                    obs,
                )?,
            };
            let last = last_row(&logits);
            obs.end_pass(self.steps, pass, &self.kv, &last);
            pass_tokens.push(argmax_slice(&last)? as u32);
            pass_logits.push(last);
        }
        self.kv.advance(chunk.len())?;
        self.seq_len = self.kv.cur_pos();
        self.steps += 1;
        let token = *pass_tokens.last().expect("at least one pass");
        self.last_token = Some(token);
        Ok(StepOutput {
            token,
            pass_logits,
            pass_tokens,
            start_pos,
        })
    }
}

fn last_row(logits: &Tensor) -> Vec<f32> {
    logits.row(logits.rows() - 1).to_vec()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub stop_ids: Vec<u32>,
    pub mode: Mode,
    pub stream: StreamConfig,
    /// Recorded for provenance only; greedy decoding draws no randomness.
    pub seed: u64,
    pub trace: Option<TraceSpec>,
    pub repetition: RepetitionConfig,
    /// Track the RMS of the residual stream entering each FFN.
    pub monitor_mix: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            stop_ids: Vec::new(),
            mode: Mode::Base,
            stream: StreamConfig::default(),
            seed: 1,
            trace: None,
            repetition: RepetitionConfig::default(),
            monitor_mix: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config {
                field: "max_new_tokens".into(),
                reason: "must be at least 1".into(),
            });
        }
        self.stream.validate()
    }

    /// Hash naming the model, weights and run settings; written into traces.
    pub fn run_hash(&self, model: &Model<'_>) -> String {
        let mut h = Sha256::new();
        h.update(model.config().to_text().as_bytes());
        h.update(model.weights().content_hash().as_bytes());
        h.update(
            format!(
                "mode={} alpha={} r={} align={} norm={} max={} stop={:?} seed={}",
                self.mode,
                self.stream.alpha,
                self.stream.recursions,
                self.stream.alignment,
                self.stream.cache_norm,
                self.max_new_tokens,
                self.stop_ids,
                self.seed
            )
            .as_bytes(),
        );
        hex::encode(h.finalize())[..16].to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    StopToken,
    MaxTokens,
    Attractor,
    ContextFull,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::StopToken => "stop-token",
            Self::MaxTokens => "max-tokens",
            Self::Attractor => "attractor",
            Self::ContextFull => "context-full",
        })
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub token: u32,
    pub pass_tokens: Vec<u32>,
    pub final_logits: Vec<f32>,
}

/// Running RMS of the residual stream fed to each FFN, over every layer,
/// position and pass so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MixStats {
    sum_sq: f64,
    count: u64,
    /// Running RMS after each step.
    pub running: Vec<f64>,
}

impl MixStats {
    pub fn rms(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.sum_sq / self.count as f64).sqrt()
        }
    }

    pub fn max_running(&self) -> f64 {
        self.running.iter().copied().fold(0.0, f64::max)
    }

    fn end_step(&mut self) {
        self.running.push(self.rms());
    }
}

impl ForwardObserver for MixStats {
    fn residual_mix(&mut self, _layer: usize, mixed: &Tensor) -> Result<()> {
        for v in mixed.data() {
            self.sum_sq += (*v as f64) * (*v as f64);
        }
        self.count += mixed.numel() as u64;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GenerationOutcome {
    /// Emitted tokens, stop token excluded.
    pub tokens: Vec<u32>,
    pub stop: StopReason,
    pub report: RepetitionReport,
    pub steps: Vec<StepRecord>,
    pub trace: Option<Trace>,
    pub mix: Option<MixStats>,
    pub session: SessionProvenance,
}

#[derive(Default)]
struct GenObserver {
    trace: Option<TraceRecorder>,
    mix: Option<MixStats>,
}

impl ForwardObserver for GenObserver {
    fn residual_mix(&mut self, layer: usize, mixed: &Tensor) -> Result<()> {
        match &mut self.mix {
            Some(m) => m.residual_mix(layer, mixed),
            None => Ok(()),
        }
    }

    fn block_output(&mut self, layer: usize, start_pos: usize, out: &Tensor) -> Result<()> {
        match &mut self.trace {
            Some(t) => t.block_output(layer, start_pos, out),
            None => Ok(()),
        }
    }
}

impl StepObserver for GenObserver {
    fn begin_pass(&mut self, step: usize, pass: usize) {
        if let Some(t) = &mut self.trace {
            t.set_pass(step, pass);
        }
    }
}

/// Greedy generation in a fresh session: runs steps until a stop id, the token
/// budget, an attractor (when configured to abort) or the end of the context.
pub fn generate(model: &Model<'_>, prompt: &[u32], cfg: &GenerationConfig) -> Result<GenerationOutcome> {
    cfg.validate()?;
    let mut session = Session::new(model, cfg.mode, cfg.stream)?;
    let mut obs = GenObserver {
        trace: cfg.trace.clone().map(|spec| {
            let mc = model.config();
            TraceRecorder::new(spec, mc.n_layers, mc.d_model, &cfg.run_hash(model))
        }),
        mix: cfg.monitor_mix.then(MixStats::default),
    };

    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    let mut report = RepetitionReport::none();
    let mut out = session.prefill(prompt, &mut obs)?;
    let stop = loop {
        if let Some(m) = &mut obs.mix {
            m.end_step();
        }
        steps.push(StepRecord {
            token: out.token,
            pass_tokens: out.pass_tokens.clone(),
            final_logits: out.final_logits().to_vec(),
        });
        if cfg.stop_ids.contains(&out.token) {
            break StopReason::StopToken;
        }
        tokens.push(out.token);

        let from = tokens.len().saturating_sub(cfg.repetition.window);
        report = detect_repetition(&tokens[from..], &cfg.repetition);
        report.onset_index += from;
        if report.is_attractor() && cfg.repetition.abort_on_attractor {
            break StopReason::Attractor;
        }
        if tokens.len() >= cfg.max_new_tokens {
            break StopReason::MaxTokens;
        }
        if session.cur_pos() >= model.config().max_seq {
            break StopReason::ContextFull;
        }
        out = session.decode_step(&mut obs)?;
    };

    Ok(GenerationOutcome {
        tokens,
        stop,
        report,
        steps,
        trace: obs.trace.map(TraceRecorder::into_trace),
        mix: obs.mix,
        session: session.provenance(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::weights::init_random_weights;

    #[test]
    fn mode_parse() {
        assert_eq!("sst".parse::<Mode>().unwrap(), Mode::Sst);
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn sessions_get_distinct_ids_and_start_fresh() {
        let cfg = ModelConfig::toy();
        let w = init_random_weights(&cfg, 1);
        let m = Model::new(&cfg, &w).unwrap();
        let a = Session::new(&m, Mode::Sst, StreamConfig::default()).unwrap();
        let b = Session::new(&m, Mode::Sst, StreamConfig::default()).unwrap();
        assert_ne!(a.provenance().session_id, b.provenance().session_id);
        assert!(a.provenance().started_fresh());
    }

    #[test]
    fn misuse_is_reported() {
        let cfg = ModelConfig::toy();
        let w = init_random_weights(&cfg, 1);
        let m = Model::new(&cfg, &w).unwrap();
        let mut s = Session::new(&m, Mode::Base, StreamConfig::new(0.0, 0).unwrap()).unwrap();
        assert!(matches!(s.decode_step(&mut ()), Err(Error::Session(_))));
        assert!(matches!(s.prefill(&[], &mut ()), Err(Error::Session(_))));
        s.prefill(&[256], &mut ()).unwrap();
        assert!(matches!(s.prefill(&[256], &mut ()), Err(Error::Session(_))));
        s.reset();
        s.prefill(&[256], &mut ()).unwrap();
    }

    #[test]
    fn zero_max_tokens_rejected() {
        let cfg = ModelConfig::toy();
        let w = init_random_weights(&cfg, 1);
        let m = Model::new(&cfg, &w).unwrap();
        let g = GenerationConfig {
            max_new_tokens: 0,
            ..GenerationConfig::default()
        };
        assert!(generate(&m, &[256], &g).is_err());
    }
}
