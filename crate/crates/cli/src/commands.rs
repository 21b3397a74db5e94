use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sst_core::config::KvFile;
use sst_core::generation::{Mode, RepetitionConfig, StopReason};
use sst_core::tokenizer::{BOS, EOS};
use sst_core::trace::{LayerSelect, PositionSelect};
use sst_core::{
    export_trace, generate as run_generation, init_random_weights, load_config, load_weights,
    ByteTokenizer, GenerationConfig, Model, ModelConfig, StreamConfig, Trace, TraceSpec,
    WeightBundle,
};

use crate::cli::{CompareArgs, GenerateArgs, InitArgs, PromptArgs, RunArgs};
use crate::{UsageError, EXIT_ATTRACTOR, EXIT_OK};

pub(crate) fn init(a: &InitArgs, out: &mut dyn Write) -> Result<i32> {
    if a.toy {
        std::fs::write(&a.config, ModelConfig::toy().to_text())
            .with_context(|| format!("writing {}", a.config.display()))?;
    }
    let cfg = load_config(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let w = init_random_weights(&cfg, a.seed);
    w.save(&a.weights)
        .with_context(|| format!("writing {}", a.weights.display()))?;
    writeln!(out, "wrote {} ({})", a.weights.display(), w.content_hash())?;
    Ok(EXIT_OK)
}

pub(crate) struct Loaded {
    pub cfg: ModelConfig,
    pub stream: StreamConfig,
    pub weights: WeightBundle,
}

/// Reads the config (model shape plus optional stream keys) and weights, then
/// applies stream flags on top.
pub(crate) fn load(run: &RunArgs) -> Result<Loaded> {
    let text = std::fs::read_to_string(&run.config)
        .with_context(|| format!("reading {}", run.config.display()))?;
    let kv = KvFile::parse(&text).with_context(|| format!("parsing {}", run.config.display()))?;
    let cfg = ModelConfig::from_kv(&kv)?;
    let mut stream = StreamConfig::from_kv(&kv)?;
    if let Some(a) = run.alpha {
        stream.alpha = a;
    }
    if let Some(r) = run.recursions {
        stream.recursions = r;
    }
    if let Some(al) = run.alignment {
        stream.alignment = al;
    }
    if let Some(n) = run.cache_norm {
        stream.cache_norm = n;
    }
    stream.validate()?;
    if run.max_tokens == 0 {
        return Err(UsageError("--max-tokens must be at least 1".into()).into());
    }
    let weights = load_weights(&run.weights, &cfg)
        .with_context(|| format!("loading {}", run.weights.display()))?;
    Ok(Loaded {
        cfg,
        stream,
        weights,
    })
}

pub(crate) fn generation_config(run: &RunArgs, stream: StreamConfig) -> GenerationConfig {
    GenerationConfig {
        max_new_tokens: run.max_tokens,
        stop_ids: if run.no_stop { Vec::new() } else { vec![EOS] },
        mode: run.mode,
        stream,
        seed: run.seed,
        trace: None,
        repetition: RepetitionConfig {
            abort_on_attractor: !run.no_abort_attractor,
            ..RepetitionConfig::default()
        },
        monitor_mix: false,
    }
}

/// BOS followed by the prompt's bytes.
pub(crate) fn prompt_ids(p: &PromptArgs) -> Result<Vec<u32>> {
    let bytes = match (&p.prompt, &p.prompt_file) {
        (Some(t), _) => t.as_bytes().to_vec(),
        (None, Some(path)) => {
            std::fs::read(path).with_context(|| format!("reading {}", path.display()))?
        }
        (None, None) => return Err(UsageError("one of --prompt or --prompt-file is required".into()).into()),
    };
    Ok(encode_prompt(&bytes))
}

pub(crate) fn encode_prompt(bytes: &[u8]) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(ByteTokenizer.encode(bytes));
    ids
}

fn trace_spec(a: &GenerateArgs, d_model: usize) -> Result<TraceSpec> {
    let list = |s: &str, what: &str| -> Result<Vec<usize>> {
        s.split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| UsageError(format!("bad {what} `{v}`")).into())
            })
            .collect()
    };
    let layers = match a.trace_layers.as_str() {
        "final" => LayerSelect::Final,
        "all" => LayerSelect::All,
        other => LayerSelect::List(list(other, "layer")?),
    };
    let positions = match a.trace_positions.as_str() {
        "final" => PositionSelect::Final,
        "all" => PositionSelect::All,
        other => return Err(UsageError(format!("--trace-positions: expected final|all, got `{other}`")).into()),
    };
    let dims = match a.trace_dims.as_str() {
        "default" => None,
        "all" => Some((0..d_model).collect()),
        other => {
            let d = list(other, "dim")?;
            if let Some(bad) = d.iter().find(|&&x| x >= d_model) {
                return Err(UsageError(format!("trace dim {bad} out of range for d_model {d_model}")).into());
            }
            Some(d)
        }
    };
    Ok(TraceSpec {
        layers,
        positions,
        dims,
    })
}

pub(crate) fn generate(a: &GenerateArgs, traced: bool, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    if traced && a.trace_out.is_none() && a.fc_out.is_none() {
        return Err(UsageError("trace needs --trace-out or --fc-out".into()).into());
    }
    if a.fc_out.is_some() && a.fc_window < 2 {
        return Err(UsageError("--fc-window must be at least 2".into()).into());
    }
    let prompt = prompt_ids(&a.prompt)?;
    let loaded = load(&a.run)?;
    let model = Model::new(&loaded.cfg, &loaded.weights)?;
    let mut gen = generation_config(&a.run, loaded.stream);
    if traced || a.trace_out.is_some() || a.fc_out.is_some() {
        gen.trace = Some(trace_spec(a, loaded.cfg.d_model)?);
    }

    let outcome = run_generation(&model, &prompt, &gen)?;
    let text = ByteTokenizer.decode(&outcome.tokens)?;
    out.write_all(&text)?;
    out.write_all(b"\n")?;
    if let Some(path) = &a.out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    writeln!(err, "config {}", gen.run_hash(&model))?;
    writeln!(err, "seed {}", gen.seed)?;
    writeln!(err, "tokens {}", outcome.tokens.len())?;
    writeln!(err, "stop {}", outcome.stop)?;
    writeln!(err, "{}", outcome.report)?;

    if let Some(trace) = &outcome.trace {
        if let Some(path) = &a.trace_out {
            export_trace(trace, path).with_context(|| format!("writing {}", path.display()))?;
        }
        if let Some(dir) = &a.fc_out {
            let n = write_fc_files(trace, dir, a.fc_window)?;
            writeln!(err, "fc files {n}")?;
        }
    }
    Ok(if outcome.stop == StopReason::Attractor {
        EXIT_ATTRACTOR
    } else {
        EXIT_OK
    })
}

/// One `fc_stepNNNN_passK.txt` per (step, pass) at the deepest traced layer.
/// Steps whose window holds fewer than two samples are skipped.
pub(crate) fn write_fc_files(trace: &Trace, dir: &Path, window: usize) -> Result<usize> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let Some(layer) = trace.events.iter().map(|e| e.layer).max() else {
        return Ok(0);
    };
    let mut written = 0;
    for step in 1..trace.steps() {
        for pass in 0..trace.passes() {
            let fc = trace.fc_at(layer, step, pass, window)?;
            let path = dir.join(format!("fc_step{step:04}_pass{pass}.txt"));
            std::fs::write(&path, fc.to_text()).with_context(|| format!("writing {}", path.display()))?;
            written += 1;
        }
    }
    Ok(written)
}

pub(crate) fn compare(a: &CompareArgs, out: &mut dyn Write) -> Result<i32> {
    let prompt = prompt_ids(&a.prompt)?;
    let loaded = load(&a.run)?;
    if let Some(path) = &a.weights_b {
        let other = load_weights(path, &loaded.cfg).with_context(|| format!("loading {}", path.display()))?;
        let (ha, hb) = (loaded.weights.content_hash(), other.content_hash());
        if ha != hb {
            bail!("comparison requires identical weights: {ha} vs {hb}");
        }
    }
    let model = Model::new(&loaded.cfg, &loaded.weights)?;
    let spec = TraceSpec {
        layers: LayerSelect::Final,
        positions: PositionSelect::Final,
        dims: Some((0..loaded.cfg.d_model).collect()),
    };
    let mut gen = generation_config(&a.run, loaded.stream);
    gen.trace = Some(spec);
    let base_cfg = GenerationConfig {
        mode: Mode::Base,
        ..gen.clone()
    };
    let sst_cfg = GenerationConfig {
        mode: Mode::Sst,
        ..gen
    };
    let base = run_generation(&model, &prompt, &base_cfg)?;
    let sst = run_generation(&model, &prompt, &sst_cfg)?;
    let (tb, ts) = (base.trace.as_ref().expect("traced"), sst.trace.as_ref().expect("traced"));

    let mut report = String::new();
    writeln!(report, "base config {}", base_cfg.run_hash(&model))?;
    writeln!(report, "sst config {}", sst_cfg.run_hash(&model))?;
    let divergence = base
        .tokens
        .iter()
        .zip(&sst.tokens)
        .position(|(x, y)| x != y)
        .or((base.tokens.len() != sst.tokens.len()).then(|| base.tokens.len().min(sst.tokens.len())));
    match divergence {
        None => writeln!(report, "no divergence")?,
        Some(i) => writeln!(report, "first divergence at token {i}")?,
    }
    let layer = loaded.cfg.n_layers - 1;
    let last_pass = loaded.stream.recursions;
    let steps = tb.steps().min(ts.steps());
    let mut diffs = Vec::with_capacity(steps);
    for step in 0..steps {
        let (ea, eb) = (
            tb.final_position(step, last_pass, layer),
            ts.final_position(step, last_pass, layer),
        );
        let d = match (ea, eb) {
            (Some(x), Some(y)) => x
                .values
                .iter()
                .zip(&y.values)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0f32, f32::max),
            _ => bail!("trace is missing step {step}"),
        };
        diffs.push(d);
    }
    writeln!(report, "max state diff {}", diffs.iter().copied().fold(0.0f32, f32::max))?;
    writeln!(report, "step\tmax_abs_state_diff")?;
    for (i, d) in diffs.iter().enumerate() {
        writeln!(report, "{i}\t{d}")?;
    }
    writeln!(report, "base tokens {}", join_ids(&base.tokens))?;
    writeln!(report, "sst tokens {}", join_ids(&sst.tokens))?;
    writeln!(report, "base stop {}", base.stop)?;
    writeln!(report, "sst stop {}", sst.stop)?;

    out.write_all(report.as_bytes())?;
    if let Some(path) = &a.out {
        std::fs::write(path, &report).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(EXIT_OK)
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}
