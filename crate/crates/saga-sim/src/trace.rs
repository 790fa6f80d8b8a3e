//! Newline-delimited JSON serialization for event logs and cache-access
//! traces. One JSON object per line; these are the formats the CLI writes
//! and the replay tools read back.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::cache::{Access, CacheAccessTrace};
use crate::error::SimError;
use crate::model::SimEvent;

pub fn write_events<W: Write>(mut w: W, events: &[SimEvent]) -> Result<(), SimError> {
    for e in events {
        let line = serde_json::to_string(e).map_err(|e| SimError::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn events_to_string(events: &[SimEvent]) -> Result<String, SimError> {
    let mut buf = Vec::new();
    write_events(&mut buf, events)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Parse an event log; blank lines are ignored, any malformed line is an
/// error naming its 1-based line number.
pub fn parse_events(input: &str) -> Result<Vec<SimEvent>, SimError> {
    let mut events = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: SimEvent = serde_json::from_str(line)
            .map_err(|err| SimError::Parse(format!("events line {}: {err}", i + 1)))?;
        events.push(e);
    }
    Ok(events)
}

pub fn read_events(path: &Path) -> Result<Vec<SimEvent>, SimError> {
    let f = std::fs::File::open(path)?;
    let mut input = String::new();
    for line in std::io::BufReader::new(f).lines() {
        input.push_str(&line?);
        input.push('\n');
    }
    parse_events(&input)
}

pub fn write_events_file(path: &Path, events: &[SimEvent]) -> Result<(), SimError> {
    let f = std::fs::File::create(path)?;
    write_events(std::io::BufWriter::new(f), events)
}

pub fn access_trace_to_string(trace: &CacheAccessTrace) -> Result<String, SimError> {
    let mut out = String::new();
    for a in &trace.accesses {
        let line = serde_json::to_string(a).map_err(|e| SimError::Parse(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parse an access trace and validate its ordering invariants.
pub fn parse_access_trace(input: &str) -> Result<CacheAccessTrace, SimError> {
    let mut accesses = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: Access = serde_json::from_str(line)
            .map_err(|err| SimError::Parse(format!("trace line {}: {err}", i + 1)))?;
        accesses.push(a);
    }
    let trace = CacheAccessTrace { accesses };
    trace.validate()?;
    Ok(trace)
}

pub fn write_access_trace_file(path: &Path, trace: &CacheAccessTrace) -> Result<(), SimError> {
    std::fs::write(path, access_trace_to_string(trace)?)?;
    Ok(())
}

pub fn read_access_trace(path: &Path) -> Result<CacheAccessTrace, SimError> {
    let input = std::fs::read_to_string(path)?;
    parse_access_trace(&input)
}
