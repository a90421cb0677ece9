//! Text interaction-log formats.
//!
//! * `umt`: whitespace-separated `user item timestamp`
//! * `umrt`: whitespace-separated `user item rating timestamp` (rating ignored)
//! * `movielens`: `user::item::rating::timestamp`
//!
//! Blank lines are skipped. Line numbers in errors are 1-based.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use miqrec_core::data::{InteractionLog, RawInteraction};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputFormat {
    #[default]
    Umt,
    Umrt,
    Movielens,
}

impl InputFormat {
    pub fn name(self) -> &'static str {
        match self {
            InputFormat::Umt => "umt",
            InputFormat::Umrt => "umrt",
            InputFormat::Movielens => "movielens",
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputFormat {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "umt" => Ok(InputFormat::Umt),
            "umrt" => Ok(InputFormat::Umrt),
            "movielens" => Ok(InputFormat::Movielens),
            other => Err(CliError::Config(format!("unknown format `{other}` (expected umt, umrt or movielens)"))),
        }
    }
}

/// A line-numbered parse failure (`line` is 0 for stream errors).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn parse_line(line: &str, format: InputFormat) -> std::result::Result<RawInteraction, String> {
    let fields: Vec<&str> = match format {
        InputFormat::Umt | InputFormat::Umrt => line.split_whitespace().collect(),
        InputFormat::Movielens => line.trim_end_matches(['\r', '\n']).split("::").collect(),
    };
    let expected = if format == InputFormat::Umt { 3 } else { 4 };
    if fields.len() != expected {
        return Err(format!("expected {expected} fields for {format}, found {}", fields.len()));
    }
    let ts_field = fields[expected - 1];
    let num = |what: &str, s: &str| s.trim().parse::<u64>().map_err(|_| format!("invalid {what} `{s}`"));
    Ok(RawInteraction {
        user: num("user id", fields[0])?,
        item: num("item id", fields[1])?,
        timestamp: ts_field.trim().parse().map_err(|_| format!("invalid timestamp `{ts_field}`"))?,
    })
}

/// Raw records of a stream, in file order.
pub fn parse_records(
    reader: impl BufRead,
    format: InputFormat,
) -> std::result::Result<Vec<RawInteraction>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ParseError { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, format).map_err(|message| ParseError { line: i + 1, message })?);
    }
    Ok(out)
}

/// Reads and reindexes an interaction file.
pub fn read_interactions(path: &Path, format: InputFormat) -> Result<InteractionLog> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let raw = parse_records(BufReader::new(file), format).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line,
        message: e.message,
    })?;
    InteractionLog::from_raw(&raw).map_err(|source| CliError::InFile { path: path.to_path_buf(), source })
}
