//! Classifies repetition at the tail of a token window.
//!
//! Three kinds are distinguished: a single token repeating (`Direct`), a short
//! multi-token cycle (`Cyclic`), and either of those persisting long enough to
//! be treated as unrecoverable (`Attractor`).

use std::fmt;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum RepetitionKind {
    #[default]
    None,
    Direct,
    Cyclic,
    Attractor,
}

impl fmt::Display for RepetitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Direct => "direct",
            Self::Cyclic => "cyclic",
            Self::Attractor => "attractor",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RepetitionReport {
    pub kind: RepetitionKind,
    /// Cycle length in tokens (0 when `kind` is `None`).
    pub period: usize,
    /// Whole repeats of the cycle at the tail of the window.
    pub run_length: usize,
    /// Index where the periodic tail begins.
    pub onset_index: usize,
}

impl RepetitionReport {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_attractor(&self) -> bool {
        self.kind == RepetitionKind::Attractor
    }
}

impl fmt::Display for RepetitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind == RepetitionKind::None {
            return f.write_str("repetition: none");
        }
        write!(
            f,
            "repetition: {} period={} run_length={} onset={}",
            self.kind, self.period, self.run_length, self.onset_index
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RepetitionConfig {
    /// Trailing tokens inspected during generation.
    pub window: usize,
    /// Longest cycle considered.
    pub max_period: usize,
    /// Repeats of one token needed to report `Direct`.
    pub min_direct_run: usize,
    /// Repeats of a longer cycle needed to report `Cyclic`.
    pub min_cycle_repeats: usize,
    /// Single-token run length that counts as an attractor.
    pub attractor_direct_run: usize,
    /// Cycle repeats (period >= 2) that count as an attractor.
    pub attractor_cycle_repeats: usize,
    /// Stop generation when an attractor is found.
    pub abort_on_attractor: bool,
}

impl Default for RepetitionConfig {
    fn default() -> Self {
        Self {
            window: 64,
            max_period: 8,
            min_direct_run: 3,
            min_cycle_repeats: 3,
            attractor_direct_run: 30,
            attractor_cycle_repeats: 6,
            abort_on_attractor: true,
        }
    }
}

/// Reports the smallest period whose repetition covers the window's tail.
pub fn detect_repetition(window: &[u32], cfg: &RepetitionConfig) -> RepetitionReport {
    let len = window.len();
    if len < 2 {
        return RepetitionReport::none();
    }
    for period in 1..=cfg.max_period.min(len / 2) {
        let matched = (period..len)
            .rev()
            .take_while(|&i| window[i] == window[i - period])
            .count();
        let covered = matched + period;
        let repeats = covered / period;
        let (min_repeats, attractor_at) = if period == 1 {
            (cfg.min_direct_run, cfg.attractor_direct_run)
        } else {
            (cfg.min_cycle_repeats, cfg.attractor_cycle_repeats)
        };
        if repeats < min_repeats.max(2) {
            continue;
        }
        let kind = if repeats >= attractor_at {
            RepetitionKind::Attractor
        } else if period == 1 {
            RepetitionKind::Direct
        } else {
            RepetitionKind::Cyclic
        };
        return RepetitionReport {
            kind,
            period,
            run_length: repeats,
            onset_index: len - covered,
        };
    }
    RepetitionReport::none()
}
