//! Latent-state recording and the analyses run over it.
//!
//! A [`TraceRecorder`] sits in the forward pass as an observer and copies a
//! subset of each selected block output into a [`Trace`]. Recording never
//! touches the values flowing through the model.
//!
//! Trace file format (text, one event per line after a single header):
//!
//! ```text
//! #sst-trace config=<hash> dims=<i0>,<i1>,...
//! <step> <pass> <layer> <position> <v0> <v1> ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, which is
//! locale-independent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ForwardObserver;
use crate::tensor::Tensor;

pub const TRACE_MAGIC: &str = "#sst-trace";

/// `(step, pass, layer, position)`, ordered lexicographically.
pub type TraceKey = (usize, usize, usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub step: usize,
    pub pass: usize,
    pub layer: usize,
    pub position: usize,
    pub values: Vec<f32>,
}

impl TraceEvent {
    pub fn key(&self) -> TraceKey {
        (self.step, self.pass, self.layer, self.position)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelect {
    Final,
    All,
    List(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionSelect {
    Final,
    All,
}

/// What to record. `dims: None` means [`default_dims`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceSpec {
    pub layers: LayerSelect,
    pub positions: PositionSelect,
    pub dims: Option<Vec<usize>>,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            layers: LayerSelect::Final,
            positions: PositionSelect::Final,
            dims: None,
        }
    }
}

/// The first 16 dimensions plus 16 evenly spaced ones, deduplicated.
pub fn default_dims(d_model: usize) -> Vec<usize> {
    let mut dims: Vec<usize> = (0..d_model.min(16)).collect();
    let stride = (d_model / 16).max(1);
    dims.extend((0..16).map(|i| i * stride).filter(|&i| i < d_model));
    dims.sort_unstable();
    dims.dedup();
    dims
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub config_hash: String,
    pub dims: Vec<usize>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(config_hash: impl Into<String>, dims: Vec<usize>) -> Self {
        Self {
            config_hash: config_hash.into(),
            dims,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Appends the raw values of `state_row` at this trace's dims. Keys must
    /// arrive in strictly increasing order.
    pub fn record_state(
        &mut self,
        step: usize,
        pass: usize,
        layer: usize,
        position: usize,
        state_row: &[f32],
    ) -> Result<()> {
        let key = (step, pass, layer, position);
        if let Some(last) = self.events.last() {
            if key <= last.key() {
                return Err(Error::Trace(format!(
                    "event {key:?} does not follow {:?}",
                    last.key()
                )));
            }
        }
        let values = self
            .dims
            .iter()
            .map(|&d| {
                state_row.get(d).copied().ok_or_else(|| {
                    Error::Trace(format!("dim {d} outside state of width {}", state_row.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.events.push(TraceEvent {
            step,
            pass,
            layer,
            position,
            values,
        });
        Ok(())
    }

    /// Events of pass `pass`, relabeled as pass 0 so slices from different
    /// passes share keys.
    pub fn pass_slice(&self, pass: usize) -> Trace {
        Trace {
            config_hash: self.config_hash.clone(),
            dims: self.dims.clone(),
            events: self
                .events
                .iter()
                .filter(|e| e.pass == pass)
                .map(|e| TraceEvent { pass: 0, ..e.clone() })
                .collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.events.last().map_or(0, |e| e.step + 1)
    }

    pub fn passes(&self) -> usize {
        self.events.iter().map(|e| e.pass + 1).max().unwrap_or(0)
    }

    /// The recorded state at the highest position of `(step, pass, layer)`.
    pub fn final_position(&self, step: usize, pass: usize, layer: usize) -> Option<&TraceEvent> {
        self.events
            .iter()
            .filter(|e| e.step == step && e.pass == pass && e.layer == layer)
            .max_by_key(|e| e.position)
    }

    /// Connectivity matrix for `(step, pass)` at `layer`: Pearson correlation
    /// across the trace dims, with samples taken from the `pass` state of each
    /// of the last `window` steps ending at `step`.
    pub fn fc_at(&self, layer: usize, step: usize, pass: usize, window: usize) -> Result<FcMatrix> {
        let first = (step + 1).saturating_sub(window.max(1));
        let samples: Vec<&[f32]> = (first..=step)
            .filter_map(|s| self.final_position(s, pass, layer))
            .map(|e| e.values.as_slice())
            .collect();
        fc_matrix(&samples, &self.dims)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        writeln!(
            w,
            "{TRACE_MAGIC} config={} dims={}",
            self.config_hash,
            dims.join(",")
        )?;
        let mut line = String::new();
        for e in &self.events {
            line.clear();
            let _ = write!(line, "{} {} {} {}", e.step, e.pass, e.layer, e.position);
            for v in &e.values {
                let _ = write!(line, " {v}");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Trace("empty trace file".into()))??;
        let (config_hash, dims) = parse_header(&header)?;
        let mut trace = Trace::new(config_hash, dims);
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::Parse {
                line: idx + 2,
                reason: reason.to_string(),
            };
            let mut fields = line.split_ascii_whitespace();
            let mut int = || -> Result<usize> {
                fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| bad("bad key field"))
            };
            let (step, pass, layer, position) = (int()?, int()?, int()?, int()?);
            let values = fields
                .map(|f| f.parse::<f32>().map_err(|_| bad("bad value")))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != trace.dims.len() {
                return Err(bad("value count does not match dims"));
            }
            let key = (step, pass, layer, position);
            if trace.events.last().is_some_and(|l| key <= l.key()) {
                return Err(bad("keys out of order"));
            }
            trace.events.push(TraceEvent {
                step,
                pass,
                layer,
                position,
                values,
            });
        }
        Ok(trace)
    }
}

fn parse_header(header: &str) -> Result<(String, Vec<usize>)> {
    let bad = || Error::Parse {
        line: 1,
        reason: format!("bad trace header `{header}`"),
    };
    let mut parts = header.split(' ');
    if parts.next() != Some(TRACE_MAGIC) {
        return Err(bad());
    }
    let hash = parts
        .next()
        .and_then(|p| p.strip_prefix("config="))
        .ok_or_else(bad)?;
    let dims_field = parts
        .next()
        .and_then(|p| p.strip_prefix("dims="))
        .ok_or_else(bad)?;
    let dims = if dims_field.is_empty() {
        Vec::new()
    } else {
        dims_field
            .split(',')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    };
    Ok((hash.to_string(), dims))
}

pub fn export_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    trace.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn import_trace(path: impl AsRef<Path>) -> Result<Trace> {
    Trace::read_from(BufReader::new(std::fs::File::open(path)?))
}

/// Observer that records selected block outputs into a [`Trace`].
pub struct TraceRecorder {
    spec: TraceSpec,
    n_layers: usize,
    trace: Trace,
    step: usize,
    pass: usize,
}

impl TraceRecorder {
    pub fn new(spec: TraceSpec, n_layers: usize, d_model: usize, config_hash: &str) -> Self {
        let dims = spec.dims.clone().unwrap_or_else(|| default_dims(d_model));
        Self {
            spec,
            n_layers,
            trace: Trace::new(config_hash, dims),
            step: 0,
            pass: 0,
        }
    }

    pub fn set_pass(&mut self, step: usize, pass: usize) {
        self.step = step;
        self.pass = pass;
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    fn wants_layer(&self, layer: usize) -> bool {
        match &self.spec.layers {
            LayerSelect::Final => layer + 1 == self.n_layers,
            LayerSelect::All => true,
            LayerSelect::List(ls) => ls.contains(&layer),
        }
    }
}

impl ForwardObserver for TraceRecorder {
    /// Records batch row 0 only.
    fn block_output(&mut self, layer: usize, start_pos: usize, out: &Tensor) -> Result<()> {
        if !self.wants_layer(layer) {
            return Ok(());
        }
        let s = out.shape()[1];
        let rows = match self.spec.positions {
            PositionSelect::Final => s - 1..s,
            PositionSelect::All => 0..s,
        };
        for t in rows {
            self.trace
                .record_state(self.step, self.pass, layer, start_pos + t, out.row(t))?;
        }
        Ok(())
    }
}

/// Pearson correlation matrix over trace dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct FcMatrix {
    pub dims: Vec<usize>,
    /// Row-major `dims.len() x dims.len()`.
    pub values: Vec<f64>,
}

impl FcMatrix {
    pub fn size(&self) -> usize {
        self.dims.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dims.len() + j]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# dims");
        for d in &self.dims {
            let _ = write!(s, " {d}");
        }
        s.push('\n');
        let n = self.dims.len();
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| self.get(i, j).to_string()).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let dims = header
            .strip_prefix("# dims")
            .ok_or_else(|| Error::Trace(format!("bad FC header `{header}`")))?
            .split_ascii_whitespace()
            .map(|d| d.parse().map_err(|_| Error::Trace(format!("bad dim `{d}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let mut values = Vec::with_capacity(dims.len() * dims.len());
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row = line
                .split_ascii_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::Trace(format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != dims.len() {
                return Err(Error::Trace("FC matrix is not square".into()));
            }
            values.extend(row);
        }
        if values.len() != dims.len() * dims.len() {
            return Err(Error::Trace("FC matrix is not square".into()));
        }
        Ok(Self { dims, values })
    }
}

/// Pearson correlation between every pair of dimensions over `samples`, each
/// sample holding one value per entry of `dims`.
///
/// A dimension with zero variance correlates 0 with everything else; the
/// diagonal is always 1.
pub fn fc_matrix(samples: &[&[f32]], dims: &[usize]) -> Result<FcMatrix> {
    if samples.len() < 2 {
        return Err(Error::Trace(format!(
            "window too small: {} sample(s), need at least 2",
            samples.len()
        )));
    }
    let n = dims.len();
    if let Some(bad) = samples.iter().find(|s| s.len() != n) {
        return Err(Error::Trace(format!(
            "sample has {} values for {n} dims",
            bad.len()
        )));
    }
    let count = samples.len() as f64;
    let means: Vec<f64> = (0..n)
        .map(|i| samples.iter().map(|s| s[i] as f64).sum::<f64>() / count)
        .collect();
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| samples.iter().map(|s| s[i] as f64 - means[i]).collect())
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let r = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            values[i * n + j] = r;
            values[j * n + i] = r;
        }
    }
    Ok(FcMatrix {
        dims: dims.to_vec(),
        values,
    })
}

/// Result of comparing two traces key by key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceDiff {
    pub per_key: BTreeMap<TraceKey, f32>,
    pub overall_max: f32,
    pub only_in_a: Vec<TraceKey>,
    pub only_in_b: Vec<TraceKey>,
}

impl TraceDiff {
    pub fn keys_match(&self) -> bool {
        self.only_in_a.is_empty() && self.only_in_b.is_empty()
    }

    /// True when every shared key is bit-identical and no keys are missing.
    pub fn identical(&self) -> bool {
        self.keys_match() && self.overall_max == 0.0
    }
}

/// Per-key max absolute difference. Missing keys are listed, not fatal;
/// traces over different dims cannot be compared.
pub fn compare_traces(a: &Trace, b: &Trace) -> Result<TraceDiff> {
    if a.dims != b.dims {
        return Err(Error::Trace(format!(
            "dims differ: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let index: BTreeMap<TraceKey, &TraceEvent> = b.events.iter().map(|e| (e.key(), e)).collect();
    let mut diff = TraceDiff::default();
    let mut seen = std::collections::BTreeSet::new();
    for ea in &a.events {
        match index.get(&ea.key()) {
            Some(eb) => {
                seen.insert(ea.key());
                let m = ea
                    .values
                    .iter()
                    .zip(&eb.values)
                    .map(|(x, y)| {
                        if x.to_bits() == y.to_bits() {
                            0.0
                        } else {
                            (x - y).abs().max(f32::MIN_POSITIVE)
                        }
                    })
                    .fold(0.0, f32::max);
                diff.overall_max = diff.overall_max.max(m);
                diff.per_key.insert(ea.key(), m);
            }
            None => diff.only_in_a.push(ea.key()),
        }
    }
    diff.only_in_b = b
        .events
        .iter()
        .map(TraceEvent::key)
        .filter(|k| !seen.contains(k))
        .collect();
    Ok(diff)
}
