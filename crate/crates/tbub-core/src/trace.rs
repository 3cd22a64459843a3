//! Line-delimited JSON trace records exported by forward passes.
//!
//! One JSON object per line. Fork events carry exactly: layer, token_index,
//! fork_rank, log_cum, action. Analyses consume these files and nothing else,
//! so re-running an analysis on a saved trace is bit-identical.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Fork,
    Keep,
    Delete,
}

/// One forking-layer decision about one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkEvent {
    pub layer: usize,
    pub token_index: usize,
    pub fork_rank: usize,
    pub log_cum: f64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    /// Resolved run configuration, first line of a trace file.
    Header { run: BTreeMap<String, String> },
    /// Marks the start of one forward pass within a multi-pass trace.
    Block { index: usize },
    ForkEvent(ForkEvent),
    /// Stream layout of one layer: origin token and fork rank per row.
    Streams {
        layer: usize,
        origins: Vec<usize>,
        ranks: Vec<usize>,
    },
    /// One query row of an attention matrix (probe export).
    AttnRow {
        layer: usize,
        head: usize,
        query: usize,
        weights: Vec<f64>,
    },
    /// Per-input-token summary after the full forward pass.
    Token {
        position: usize,
        entropy: f64,
        final_forks: usize,
    },
}

pub fn write_records<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Format(format!("trace encode: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("trace line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip() {
        let recs = vec![
            TraceRecord::Block { index: 0 },
            TraceRecord::ForkEvent(ForkEvent {
                layer: 2,
                token_index: 5,
                fork_rank: 1,
                log_cum: -0.25,
                action: Action::Fork,
            }),
            TraceRecord::Token {
                position: 5,
                entropy: 1.5,
                final_forks: 2,
            },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(recs, back);
    }

    #[test]
    fn fork_event_field_names_are_stable() {
        let ev = TraceRecord::ForkEvent(ForkEvent {
            layer: 3,
            token_index: 0,
            fork_rank: 0,
            log_cum: -0.5,
            action: Action::Keep,
        });
        let line = serde_json::to_string(&ev).unwrap();
        for key in ["layer", "token_index", "fork_rank", "log_cum", "action"] {
            assert!(line.contains(key), "missing {key} in {line}");
        }
    }
}
