use std::io::Write;

use anyhow::Result;
use sst_core::cache_overhead;

use crate::cli::MembudgetArgs;
use crate::EXIT_OK;

const UNITS: [&str; 6] = ["B", "KB", "MB", "GB", "TB", "PB"];

/// Binary units (1 KB = 1024 B). Whole numbers print without decimals.
pub fn format_bytes(n: u64) -> String {
    let mut unit = 0;
    let mut whole = n;
    while unit + 1 < UNITS.len() && whole >= 1024 && whole.is_multiple_of(1024) {
        whole /= 1024;
        unit += 1;
    }
    if whole < 1024 || unit + 1 == UNITS.len() {
        return format!("{whole} {}", UNITS[unit]);
    }
    let mut v = n as f64;
    let mut unit = 0;
    while v >= 1024.0 && unit + 1 < UNITS.len() {
        v /= 1024.0;
        unit += 1;
    }
    format!("{v:.2} {}", UNITS[unit])
}

pub fn membudget_report(tokens: u64, d_model: u64, layers: u64, bytes: u64) -> Result<String> {
    let per_token = cache_overhead(1, d_model, layers, bytes)?;
    let total = cache_overhead(tokens, d_model, layers, bytes)?;
    Ok(format!(
        "per token: {}/token\ntotal for {tokens} tokens: {}\n",
        format_bytes(per_token),
        format_bytes(total)
    ))
}

pub(crate) fn run(a: &MembudgetArgs, out: &mut dyn Write) -> Result<i32> {
    out.write_all(membudget_report(a.tokens, a.d_model, a.layers, a.bytes)?.as_bytes())?;
    Ok(EXIT_OK)
}
