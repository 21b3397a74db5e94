//! Command-line harness over `sst-core`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 generation stopped
//! by attractor detection.

mod bench;
mod cli;
mod commands;
mod membudget;

use std::ffi::OsString;
use std::io::Write;

use clap::error::ErrorKind;
use clap::Parser;

pub use bench::{extract_answer, parse_tasks, Extractor, TaskItem};
pub use cli::{Cli, Command};
pub use membudget::{format_bytes, membudget_report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_ATTRACTOR: i32 = 3;

/// Bad flag values or combinations detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(rendered.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(rendered.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Init(a) => commands::init(&a, out),
        Command::Generate(a) => commands::generate(&a, false, out, err),
        Command::Trace(a) => commands::generate(&a, true, out, err),
        Command::Compare(a) => commands::compare(&a, out),
        Command::Membudget(a) => membudget::run(&a, out),
        Command::Bench(a) => bench::run(&a, out, err),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            if e.is::<UsageError>() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
