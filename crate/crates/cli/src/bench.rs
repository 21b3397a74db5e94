//! Task files and the two-phase benchmark command.
//!
//! A task file holds one item per line: `id<TAB>prompt<TAB>expected<TAB>extractor`.
//! Blank lines and lines starting with `#` are ignored. In the prompt, `\n`,
//! `\t` and `\\` are unescaped.

use std::collections::HashSet;
use std::io::Write;
use std::str::FromStr;
use std::sync::OnceLock;

use anyhow::{Context, Result};
use regex::Regex;
use sst_core::generation::{run_two_phase, BenchItem, Evaluation, ItemResult, TwoPhaseConfig, TwoPhaseSummary};
use sst_core::{ByteTokenizer, Model};

use crate::cli::BenchArgs;
use crate::commands::{encode_prompt, generation_config, load};
use crate::{UsageError, EXIT_OK};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extractor {
    /// Whole output, trimmed.
    Exact,
    /// Last integer in the output.
    LastInteger,
}

impl FromStr for Extractor {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(Self::Exact),
            "last-integer" => Ok(Self::LastInteger),
            other => Err(format!("unknown extractor `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskItem {
    pub id: String,
    pub prompt: Vec<u8>,
    pub expected: String,
    pub extractor: Extractor,
}

pub fn extract_answer(output: &str, extractor: Extractor) -> String {
    static INT: OnceLock<Regex> = OnceLock::new();
    match extractor {
        Extractor::Exact => output.trim().to_string(),
        Extractor::LastInteger => INT
            .get_or_init(|| Regex::new(r"-?\d+").expect("valid regex"))
            .find_iter(output)
            .last()
            .map(|m| m.as_str().to_string())
            .unwrap_or_default(),
    }
}

fn unescape(s: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('n') => out.push(b'\n'),
            Some('t') => out.push(b'\t'),
            Some('\\') => out.push(b'\\'),
            Some(other) => {
                out.push(b'\\');
                let mut buf = [0u8; 4];
                out.extend_from_slice(other.encode_utf8(&mut buf).as_bytes());
            }
            None => out.push(b'\\'),
        }
    }
    out
}

/// Parses a task file, returning the good items and one warning per skipped
/// line.
pub fn parse_tasks(text: &str) -> (Vec<TaskItem>, Vec<String>) {
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            warnings.push(format!("line {n}: expected 4 tab-separated fields, found {}", fields.len()));
            continue;
        }
        let extractor = match fields[3].trim().parse() {
            Ok(e) => e,
            Err(e) => {
                warnings.push(format!("line {n}: {e}"));
                continue;
            }
        };
        let id = fields[0].trim().to_string();
        if id.is_empty() {
            warnings.push(format!("line {n}: empty id"));
            continue;
        }
        if !ids.insert(id.clone()) {
            warnings.push(format!("line {n}: duplicate id `{id}`"));
            continue;
        }
        items.push(TaskItem {
            id,
            prompt: unescape(fields[1]),
            expected: fields[2].trim().to_string(),
            extractor,
        });
    }
    (items, warnings)
}

pub(crate) fn run(a: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let stub = match a.evaluator.as_str() {
        "extract" => None,
        "all-correct" => Some(true),
        "all-wrong" => Some(false),
        other => {
            return Err(UsageError(format!(
                "--evaluator: expected extract|all-correct|all-wrong, got `{other}`"
            ))
            .into())
        }
    };
    if a.workers == 0 {
        return Err(UsageError("--workers must be at least 1".into()).into());
    }
    let text = std::fs::read_to_string(&a.tasks).with_context(|| format!("reading {}", a.tasks.display()))?;
    let (tasks, warnings) = parse_tasks(&text);
    for w in &warnings {
        writeln!(err, "warning: {}: {w}", a.tasks.display())?;
    }

    let loaded = load(&a.run)?;
    let model = Model::new(&loaded.cfg, &loaded.weights)?;
    let cfg = TwoPhaseConfig {
        generation: generation_config(&a.run, loaded.stream),
        phase1_recursions: a.phase1_recursions,
        phase2_recursions: a.phase2_recursions,
        workers: a.workers,
    };
    let items: Vec<BenchItem> = tasks
        .iter()
        .map(|t| BenchItem {
            id: t.id.clone(),
            prompt: encode_prompt(&t.prompt),
            expected: t.expected.clone(),
        })
        .collect();
    let evaluate = |item: &BenchItem, tokens: &[u32]| -> std::result::Result<Evaluation, String> {
        let bytes = ByteTokenizer.decode(tokens).map_err(|e| e.to_string())?;
        let output = String::from_utf8_lossy(&bytes);
        let task = tasks
            .iter()
            .find(|t| t.id == item.id)
            .ok_or_else(|| format!("unknown item `{}`", item.id))?;
        let answer = extract_answer(&output, task.extractor);
        let correct = stub.unwrap_or(answer == task.expected);
        Ok(Evaluation { answer, correct })
    };
    let results = run_two_phase(&model, &items, evaluate, &cfg)?;
    let summary = TwoPhaseSummary::from_results(&results);
    write_csv(&a.out, &results, &summary)?;
    writeln!(
        out,
        "items {} phase1_correct {} retried {} phase2_correct {} changed {} errors {}",
        summary.items, summary.phase1_correct, summary.retried, summary.phase2_correct, summary.changed, summary.errors
    )?;
    Ok(EXIT_OK)
}

const HEADER: [&str; 8] = [
    "id",
    "phase1_answer",
    "phase1_correct",
    "retried",
    "phase2_answer",
    "phase2_correct",
    "changed",
    "error",
];

fn write_csv(path: &std::path::Path, results: &[ItemResult], s: &TwoPhaseSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(HEADER)?;
    for r in results {
        let p1 = r.phase1.as_ref();
        let p2 = r.phase2.as_ref();
        w.write_record([
            r.id.clone(),
            p1.map(|a| a.answer.clone()).unwrap_or_default(),
            p1.map(|a| a.correct.to_string()).unwrap_or_default(),
            r.retried().to_string(),
            p2.map(|a| a.answer.clone()).unwrap_or_default(),
            p2.map(|a| a.correct.to_string()).unwrap_or_default(),
            r.changed().to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    // Counts in place of per-item values.
    w.write_record([
        format!("aggregate:{}", s.items),
        String::new(),
        s.phase1_correct.to_string(),
        s.retried.to_string(),
        String::new(),
        s.phase2_correct.to_string(),
        s.changed.to_string(),
        s.errors.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
