use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sst_core::generation::Mode;
use sst_core::{Alignment, CacheNorm};

#[derive(Parser, Debug)]
#[command(name = "sst", version, about = "State-stream transformer harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write seeded random weights for a model config.
    Init(InitArgs),
    /// Generate text greedily.
    Generate(GenerateArgs),
    /// Run base and state-stream paths on one prompt and report divergence.
    Compare(CompareArgs),
    /// Generate with tracing and export trace and FC matrix files.
    Trace(GenerateArgs),
    /// Report state-cache memory overhead.
    Membudget(MembudgetArgs),
    /// Two-phase benchmark over a task file.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write the built-in toy config to `--config` first.
    #[arg(long)]
    pub toy: bool,
}

/// Model, stream and decoding flags shared by the generating commands.
/// Stream flags left unset fall back to keys in the config file, then to
/// built-in defaults.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "sst", value_parser = parse_mode)]
    pub mode: Mode,
    #[arg(long, value_parser = parse_alpha)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub recursions: Option<usize>,
    #[arg(long, value_parser = parse_alignment)]
    pub alignment: Option<Alignment>,
    #[arg(long, value_parser = parse_cache_norm)]
    pub cache_norm: Option<CacheNorm>,
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Keep generating past the end-of-sequence token.
    #[arg(long)]
    pub no_stop: bool,
    /// Report attractors but do not stop on them.
    #[arg(long)]
    pub no_abort_attractor: bool,
}

#[derive(Args, Debug, Clone)]
pub struct PromptArgs {
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Write the generated bytes here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Directory for per-step FC matrices, one file per pass.
    #[arg(long)]
    pub fc_out: Option<PathBuf>,
    /// Steps per FC sample window.
    #[arg(long, default_value_t = 8)]
    pub fc_window: usize,
    /// `final`, `all`, or comma-separated layer indices.
    #[arg(long, default_value = "final")]
    pub trace_layers: String,
    /// `final` or `all`.
    #[arg(long, default_value = "final")]
    pub trace_positions: String,
    /// `default`, `all`, or comma-separated hidden dims.
    #[arg(long, default_value = "default")]
    pub trace_dims: String,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Weights for the state-stream run; must match `--weights` exactly.
    #[arg(long)]
    pub weights_b: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MembudgetArgs {
    #[arg(long, default_value_t = 1)]
    pub tokens: u64,
    #[arg(long, default_value_t = 4096)]
    pub d_model: u64,
    #[arg(long, default_value_t = 32)]
    pub layers: u64,
    /// Bytes per stored value.
    #[arg(long, default_value_t = 2)]
    pub bytes: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub phase1_recursions: usize,
    #[arg(long, default_value_t = 4)]
    pub phase2_recursions: usize,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// `extract` checks answers with each item's extractor; `all-correct` and
    /// `all-wrong` are fixed stubs.
    #[arg(long, default_value = "extract")]
    pub evaluator: String,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: sst_core::Error| e.to_string())
}

fn parse_alignment(s: &str) -> Result<Alignment, String> {
    s.parse().map_err(|e: sst_core::Error| e.to_string())
}

fn parse_cache_norm(s: &str) -> Result<CacheNorm, String> {
    s.parse().map_err(|e: sst_core::Error| e.to_string())
}

fn parse_alpha(s: &str) -> Result<f32, String> {
    let a: f32 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(0.0..=1.0).contains(&a) {
        return Err(format!("alpha must lie in [0, 1], got {a}"));
    }
    Ok(a)
}
