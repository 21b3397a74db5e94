//! A small decoder-only transformer inference engine with two forward paths
//! over one set of weights: the standard Llama-style block, and a variant that
//! carries each layer's previous output forward as a persistent state stream.

pub mod config;
pub mod error;
pub mod generation;
pub mod model;
pub mod state;
pub mod tensor;
pub mod tokenizer;
pub mod trace;
pub mod weights;

pub use config::{load_config, ModelConfig};
pub use error::{Error, Result};
pub use generation::{generate, GenerationConfig, GenerationOutcome, Mode, Session, StopReason};
pub use model::{AttentionMask, ForwardObserver, KvCache, Model};
pub use state::{cache_overhead, Alignment, CacheNorm, StateCache, StreamConfig};
pub use tensor::Tensor;
pub use tokenizer::ByteTokenizer;
pub use weights::{init_random_weights, load_weights, WeightBundle};

pub use trace::{compare_traces, export_trace, import_trace, Trace, TraceSpec};
