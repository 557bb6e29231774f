//! Line-delimited JSON routing traces: a header line followed by one record
//! per evaluated token.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use moelab_core::metrics::{RoutingTrace, TokenMeta};
use moelab_lm::EvalResult;
use serde::{Deserialize, Serialize};

use crate::corpus::{byte_class, stream_hash};
use crate::error::{io_err, HarnessError, Result};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Columns written by `compare-traces`.
pub const COMPARE_COLUMNS: [&str; 8] =
    ["trace_a", "trace_b", "weighted_jaccard", "weighted_dice", "jaccard", "dice", "joint_jsd", "total_variation"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub stream_hash: String,
    pub config_digest: String,
    pub step: u64,
    /// Indices of the routed layers, in record order.
    pub moe_layers: Vec<usize>,
    pub n_experts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub position: usize,
    pub loss: f64,
    pub domain: String,
    /// Routed experts per routed layer; the shared expert is never listed.
    pub experts: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl TraceFile {
    pub fn from_eval(res: &EvalResult, n_experts: usize, step: u64, config_digest: &str) -> Self {
        let records = (0..res.token_losses.len())
            .map(|t| TraceRecord {
                position: res.positions[t],
                loss: res.token_losses[t],
                domain: byte_class(res.tokens[t]).to_string(),
                experts: res.active.iter().map(|layer| layer[t].clone()).collect(),
            })
            .collect();
        Self {
            header: TraceHeader {
                schema_version: TRACE_SCHEMA_VERSION,
                stream_hash: stream_hash(&res.tokens),
                config_digest: config_digest.to_string(),
                step,
                moe_layers: res.moe_layers.clone(),
                n_experts,
            },
            records,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let mut line = |v: String| writeln!(w, "{v}").map_err(io_err(path));
        line(serde_json::to_string(&self.header)?)?;
        for r in &self.records {
            line(serde_json::to_string(r)?)?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        let bad = |detail: String| HarnessError::Format { path: path.display().to_string(), detail };
        let mut lines = BufReader::new(file).lines();
        let first = lines.next().ok_or_else(|| bad("missing header line".into()))?.map_err(io_err(path))?;
        let header: TraceHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
        if header.schema_version != TRACE_SCHEMA_VERSION {
            return Err(bad(format!("trace schema version {} unsupported", header.schema_version)));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TraceRecord = serde_json::from_str(&line).map_err(|e| bad(format!("record {i}: {e}")))?;
            if r.experts.len() != header.moe_layers.len() {
                return Err(bad(format!("record {i} has {} layers, header {}", r.experts.len(), header.moe_layers.len())));
            }
            if let Some(&e) = r.experts.iter().flatten().find(|&&e| e as usize >= header.n_experts) {
                return Err(bad(format!("record {i} names expert {e} of {}", header.n_experts)));
            }
            records.push(r);
        }
        Ok(Self { header, records })
    }

    pub fn to_routing_trace(&self) -> Result<RoutingTrace> {
        let tokens = self
            .records
            .iter()
            .map(|r| TokenMeta { position: r.position, loss: r.loss, domain: r.domain.clone() })
            .collect();
        let mut trace = RoutingTrace::new(self.header.moe_layers.len(), self.header.n_experts, tokens)
            .with_stream_hash(self.header.stream_hash.clone());
        for (t, r) in self.records.iter().enumerate() {
            for (l, experts) in r.experts.iter().enumerate() {
                for &e in experts {
                    trace.add_edge(l, t, e as usize)?;
                }
            }
        }
        Ok(trace)
    }
}

/// Loads two traces for comparison, refusing different eval streams.
pub fn load_pair(a: &Path, b: &Path) -> Result<(RoutingTrace, RoutingTrace)> {
    let ta = TraceFile::read(a)?;
    let tb = TraceFile::read(b)?;
    if ta.header.stream_hash != tb.header.stream_hash {
        return Err(HarnessError::HashMismatch(ta.header.stream_hash, tb.header.stream_hash));
    }
    Ok((ta.to_routing_trace()?, tb.to_routing_trace()?))
}
